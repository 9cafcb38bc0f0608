#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lamkit/dataset.hpp"
#include "lamkit/extract.hpp"
#include "lamkit/lam.hpp"
#include "lamkit/pipeline.hpp"

namespace lamkit {

// Layered run configuration. Every key lives in a fixed schema with a
// default; a config file overrides defaults and command-line key=value
// pairs override the file, last wins. Anything outside the schema is
// rejected by name.
class RunConfig {
 public:
  static RunConfig defaults();

  // INI-style file: [section] headers, key = value lines, # or ; comments.
  void apply_file(const std::filesystem::path& path);
  // "key=value", or "section.key=value" when the bare name is ambiguous.
  void apply_override(const std::string& kv);

  const std::string& get(const std::string& section, const std::string& key) const;
  int64_t get_int(const std::string& section, const std::string& key) const;
  double get_real(const std::string& section, const std::string& key) const;
  bool get_bool(const std::string& section, const std::string& key) const;
  std::vector<int> get_int_list(const std::string& section, const std::string& key) const;
  // "-" means disabled / automatic.
  std::optional<double> get_opt_real(const std::string& section, const std::string& key) const;
  std::optional<int64_t> get_opt_int(const std::string& section, const std::string& key) const;

  // Full INI snapshot in schema order; reapplying it reproduces this config.
  std::string serialized() const;
  void write_snapshot(const std::filesystem::path& path) const;

 private:
  struct Entry {
    std::string section, key, value;
  };
  std::vector<Entry> entries_;
  Entry* find(const std::string& section, const std::string& key);
  const Entry* find(const std::string& section, const std::string& key) const;
};

// Typed views over the schema sections.
GenConfig gen_config_from(const RunConfig& rc);
// num_epochs "-" resolves to 10 for image targets, 200 for vector targets.
LamConfig lam_config_from(const RunConfig& rc, bool image_target);
BcConfig bc_config_from(const RunConfig& rc);
DecoderConfig decoder_config_from(const RunConfig& rc);
ExtractionConfig extraction_config_from(const RunConfig& rc);
ExtractOptions extract_options_from(const RunConfig& rc);

}  // namespace lamkit
