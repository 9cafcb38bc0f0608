#include "lamkit/store.hpp"

#include <cstring>
#include <fstream>

#include "lamkit/errors.hpp"

namespace lamkit {

namespace {

constexpr int64_t kFormatVersion = 1;
constexpr size_t kIndexEntryBytes = 16;

uint64_t key_of(uint32_t traj, uint32_t frame) {
  return (static_cast<uint64_t>(traj) << 32) | frame;
}

void append_bytes(const std::filesystem::path& path, const void* data, size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot open for append: " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw IoError("append failed: " + path.string());
}

}  // namespace

bool EmbeddingStore::exists(const std::filesystem::path& dir) {
  return std::filesystem::exists(dir / "store_manifest.txt");
}

EmbeddingStore EmbeddingStore::create(const std::filesystem::path& dir, const Manifest& meta,
                                      int64_t dim) {
  if (dim <= 0) throw ConfigError("embedding dim must be positive");
  if (exists(dir)) throw ConfigError("store already exists: " + dir.string());
  std::filesystem::create_directories(dir);

  EmbeddingStore s;
  s.dir_ = dir;
  s.dim_ = dim;
  s.manifest_ = meta;
  s.manifest_.set_int("format_version", kFormatVersion);
  s.manifest_.set_int("dim", dim);
  s.manifest_.set_int("n_rows", 0);
  {
    std::ofstream(dir / "embeddings.f32", std::ios::binary | std::ios::trunc);
    std::ofstream(dir / "index.bin", std::ios::binary | std::ios::trunc);
  }
  write_manifest(dir / "store_manifest.txt", s.manifest_);
  return s;
}

EmbeddingStore EmbeddingStore::open(const std::filesystem::path& dir) {
  EmbeddingStore s;
  s.dir_ = dir;
  s.manifest_ = read_manifest(dir / "store_manifest.txt");
  int64_t version = s.manifest_.get_int("format_version");
  if (version != kFormatVersion)
    throw VersionError("store format_version " + std::to_string(version) + " is not supported");
  s.dim_ = s.manifest_.get_int("dim");
  if (s.dim_ <= 0) throw CorruptionError("store manifest has non-positive dim");
  int64_t n_rows = s.manifest_.get_int("n_rows");

  std::error_code ec;
  auto payload_bytes = std::filesystem::file_size(dir / "embeddings.f32", ec);
  if (ec) throw IoError("cannot stat embeddings.f32 in " + dir.string());
  auto index_bytes = std::filesystem::file_size(dir / "index.bin", ec);
  if (ec) throw IoError("cannot stat index.bin in " + dir.string());

  int64_t payload_rows = static_cast<int64_t>(payload_bytes / (sizeof(float) * s.dim_));
  int64_t index_rows = static_cast<int64_t>(index_bytes / kIndexEntryBytes);
  if (payload_rows < n_rows || index_rows < n_rows)
    throw CorruptionError("store manifest claims " + std::to_string(n_rows) +
                          " rows but files hold fewer in " + dir.string());

  // Drop any torn tail beyond the durable prefix.
  if (payload_rows > n_rows || payload_bytes % (sizeof(float) * s.dim_) != 0)
    std::filesystem::resize_file(dir / "embeddings.f32",
                                 static_cast<uintmax_t>(n_rows) * sizeof(float) * s.dim_);
  if (index_rows > n_rows || index_bytes % kIndexEntryBytes != 0)
    std::filesystem::resize_file(dir / "index.bin",
                                 static_cast<uintmax_t>(n_rows) * kIndexEntryBytes);

  s.data_.resize(static_cast<size_t>(n_rows * s.dim_));
  {
    std::ifstream in(dir / "embeddings.f32", std::ios::binary);
    in.read(reinterpret_cast<char*>(s.data_.data()),
            static_cast<std::streamsize>(s.data_.size() * sizeof(float)));
    if (static_cast<size_t>(in.gcount()) != s.data_.size() * sizeof(float))
      throw CorruptionError("short read from embeddings.f32 in " + dir.string());
  }
  {
    std::ifstream in(dir / "index.bin", std::ios::binary);
    std::vector<uint8_t> raw(static_cast<size_t>(n_rows) * kIndexEntryBytes);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<size_t>(in.gcount()) != raw.size())
      throw CorruptionError("short read from index.bin in " + dir.string());
    s.keys_.resize(static_cast<size_t>(n_rows));
    for (int64_t i = 0; i < n_rows; ++i) {
      const uint8_t* p = raw.data() + i * kIndexEntryBytes;
      uint32_t traj, frame;
      uint64_t row;
      std::memcpy(&traj, p, 4);
      std::memcpy(&frame, p + 4, 4);
      std::memcpy(&row, p + 8, 8);
      if (static_cast<int64_t>(row) != i)
        throw CorruptionError("index row number out of order in " + dir.string());
      s.keys_[static_cast<size_t>(i)] = {traj, frame};
      s.by_key_[key_of(traj, frame)].push_back(i);
    }
  }
  s.flushed_rows_ = n_rows;
  return s;
}

void EmbeddingStore::append(uint32_t traj, uint32_t frame, std::span<const float> v) {
  if (static_cast<int64_t>(v.size()) != dim_)
    throw CorruptionError("appending vector of dim " + std::to_string(v.size()) +
                          " to store of dim " + std::to_string(dim_));
  int64_t row = n_rows();
  data_.insert(data_.end(), v.begin(), v.end());
  keys_.push_back({traj, frame});
  by_key_[key_of(traj, frame)].push_back(row);
}

void EmbeddingStore::flush() {
  int64_t total = n_rows();
  if (total == flushed_rows_) return;
  int64_t fresh = total - flushed_rows_;
  append_bytes(dir_ / "embeddings.f32", data_.data() + flushed_rows_ * dim_,
               static_cast<size_t>(fresh * dim_) * sizeof(float));

  std::vector<uint8_t> raw(static_cast<size_t>(fresh) * kIndexEntryBytes);
  for (int64_t i = 0; i < fresh; ++i) {
    int64_t r = flushed_rows_ + i;
    uint8_t* p = raw.data() + i * kIndexEntryBytes;
    uint64_t row = static_cast<uint64_t>(r);
    std::memcpy(p, &keys_[static_cast<size_t>(r)].traj, 4);
    std::memcpy(p + 4, &keys_[static_cast<size_t>(r)].frame, 4);
    std::memcpy(p + 8, &row, 8);
  }
  append_bytes(dir_ / "index.bin", raw.data(), raw.size());

  manifest_.set_int("n_rows", total);
  write_manifest(dir_ / "store_manifest.txt", manifest_);
  flushed_rows_ = total;
}

bool EmbeddingStore::has(uint32_t traj, uint32_t frame) const {
  return by_key_.contains(key_of(traj, frame));
}

const std::vector<int64_t>& EmbeddingStore::rows_for(uint32_t traj, uint32_t frame) const {
  auto it = by_key_.find(key_of(traj, frame));
  if (it == by_key_.end())
    throw LookupError("no embedding rows for trajectory " + std::to_string(traj) + " frame " +
                      std::to_string(frame));
  return it->second;
}

std::span<const float> EmbeddingStore::row(int64_t r) const {
  return {data_.data() + r * dim_, static_cast<size_t>(dim_)};
}

std::span<const float> EmbeddingStore::vector_for(uint32_t traj, uint32_t frame) const {
  const auto& rs = rows_for(traj, frame);
  if (rs.size() != 1)
    throw LookupError("expected one embedding row for trajectory " + std::to_string(traj) +
                      " frame " + std::to_string(frame) + ", found " + std::to_string(rs.size()));
  return row(rs[0]);
}

}  // namespace lamkit
