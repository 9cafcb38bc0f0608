#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lamkit/dataset.hpp"

namespace lamkit {

// Forward-model prediction targets. The latent action model always embeds
// the transition (o_t, o_{t+1}) the same way; what varies across methods is
// only what the forward model must reconstruct from (o_t, z_t). Each kind
// below is one choice of that reconstruction target.

enum class TargetKind {
  pixel,      // next frame as stored
  twin,       // next frame rendered without the distractor layer
  oracle,     // simulator state vector plus pure-noise dimensions
  embedding,  // stored VLM vector for the next frame
  otter,      // text-filtered pooling over stored patch vectors
  univla,     // next frame, with instruction conditioning in the model
};

const char* target_kind_name(TargetKind k);
TargetKind parse_target_kind(const std::string& s);

struct TargetSpec {
  TargetKind kind = TargetKind::pixel;
  int oracle_noise_dims = 12;
  std::filesystem::path store_dir;         // embedding, otter
  std::filesystem::path text_vectors;      // otter: [K, D] float32 array file
  std::filesystem::path instruction_file;  // univla: u32 dim header + float32 payload
  int instruction_dim = 32;                // univla fallback when no file is given
};

// CLI syntax, e.g. "pixel", "oracle:12", "embedding:<store>",
// "otter:<patch_store>:<text_file>", "univla", "univla:<instr_file>".
TargetSpec parse_target_spec(const std::string& s);
std::string target_spec_string(const TargetSpec& spec);

class TargetProvider {
 public:
  virtual ~TargetProvider() = default;
  virtual TargetKind kind() const = 0;
  virtual std::vector<int64_t> shape() const = 0;  // [3, S, S] or [D]
  virtual bool is_image() const = 0;
  int64_t dim() const {
    int64_t n = 1;
    for (int64_t d : shape()) n *= d;
    return n;
  }
  // Target for transition t of trajectory n, written to out (dim() floats).
  // Pure: same (n, t) always produces the same bytes.
  virtual void target(int64_t n, int64_t t, float* out) const = 0;
  // Instruction vector for conditioning kinds; empty otherwise.
  virtual std::span<const float> instruction() const { return {}; }
};

// Validates spec against the dataset: twin targets need stored twins,
// state-based targets need simulator states (so imported data is rejected),
// store-backed targets need a readable store covering the dataset. Oracle
// noise is keyed off the dataset seed, so targets are a fixed property of
// the dataset.
std::unique_ptr<TargetProvider> make_target_provider(const TargetSpec& spec,
                                                     const TrajectoryDataset& ds);

// Text-conditioned patch pooling: score each patch by its mean dot product
// with the text vectors scaled by 1/sqrt(D), softmax the scores into weights
// and return the weighted sum of patches. patches is M x D, texts K x D.
std::vector<float> otter_filter(std::span<const float> patches, int64_t n_patches,
                                std::span<const float> texts, int64_t n_texts, int64_t dim);

// Writes u8 HWC pixels as normalized CHW floats in [0, 1].
void normalize_frame_chw(const uint8_t* hwc, int size, float* chw);

}  // namespace lamkit
