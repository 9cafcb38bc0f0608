#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace lamkit {

// Raw n-dimensional array with a flat byte payload. Serialized form is a
// 64-byte header followed by the payload, little-endian throughout; see
// array.cpp for the exact layout.

enum class Dtype : uint32_t {
  u8 = 0,
  f32 = 1,
  i32 = 2,
  u32 = 3,
  f64 = 4,
  u64 = 5,
};

size_t dtype_size(Dtype d);
const char* dtype_name(Dtype d);

struct NdArray {
  Dtype dtype = Dtype::f32;
  std::vector<int64_t> dims;
  std::vector<uint8_t> data;

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : dims) n *= d;
    return n;
  }

  std::span<const float> f32() const;
  std::span<float> f32();
  std::span<const uint8_t> u8() const;
  std::span<uint8_t> u8();
  std::span<const uint64_t> u64() const;
  std::span<uint64_t> u64();
  std::span<const int32_t> i32() const;
  std::span<int32_t> i32();
};

NdArray make_array(Dtype dtype, std::vector<int64_t> dims);

void write_array(const std::filesystem::path& path, const NdArray& a);
NdArray read_array(const std::filesystem::path& path);

// Text manifests: "key = value" lines, UTF-8, '#' comments, deterministic
// write order (insertion order).
struct Manifest {
  std::vector<std::pair<std::string, std::string>> entries;

  void set(const std::string& key, const std::string& value);
  void set_int(const std::string& key, int64_t value);
  void set_real(const std::string& key, double value);
  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;      // LookupError if absent
  std::string get_or(const std::string& key, const std::string& dflt) const;
  int64_t get_int(const std::string& key) const;
  double get_real(const std::string& key) const;
};

void write_manifest(const std::filesystem::path& path, const Manifest& m);
Manifest read_manifest(const std::filesystem::path& path);

// Atomic file replacement: write to <path>.tmp then rename.
void atomic_write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace lamkit
