#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <unordered_map>
#include <vector>

#include "lamkit/array.hpp"

namespace lamkit {

// Durable store of fixed-width float vectors keyed by (trajectory, frame).
// A key may own several rows (token or patch sets); row order within a key
// is append order. Directory layout:
//
//   store_manifest.txt  format_version, dim, n_rows, plus caller metadata
//   embeddings.f32      contiguous little-endian float32 rows, no header
//   index.bin           16 bytes per row: u32 traj, u32 frame, u64 row
//
// flush() appends payload and index first and rewrites the manifest last,
// so after a crash the manifest row count is the durable prefix; open()
// truncates both files back to it.
class EmbeddingStore {
 public:
  static EmbeddingStore create(const std::filesystem::path& dir, const Manifest& meta,
                               int64_t dim);
  static EmbeddingStore open(const std::filesystem::path& dir);
  static bool exists(const std::filesystem::path& dir);

  int64_t dim() const { return dim_; }
  int64_t n_rows() const { return static_cast<int64_t>(keys_.size()); }
  const Manifest& manifest() const { return manifest_; }
  const std::filesystem::path& dir() const { return dir_; }

  void append(uint32_t traj, uint32_t frame, std::span<const float> v);
  void flush();

  bool has(uint32_t traj, uint32_t frame) const;
  // Row indices for a key, append order. LookupError when absent.
  const std::vector<int64_t>& rows_for(uint32_t traj, uint32_t frame) const;
  std::span<const float> row(int64_t r) const;
  // Single-row convenience; LookupError when absent or multi-row.
  std::span<const float> vector_for(uint32_t traj, uint32_t frame) const;

  struct Key {
    uint32_t traj, frame;
  };
  const std::vector<Key>& keys() const { return keys_; }
  const std::vector<float>& data() const { return data_; }

 private:
  EmbeddingStore() = default;

  std::filesystem::path dir_;
  Manifest manifest_;
  int64_t dim_ = 0;
  std::vector<float> data_;
  std::vector<Key> keys_;
  std::unordered_map<uint64_t, std::vector<int64_t>> by_key_;
  int64_t flushed_rows_ = 0;
};

}  // namespace lamkit
