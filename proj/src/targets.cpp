#include "lamkit/targets.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "lamkit/errors.hpp"
#include "lamkit/rng.hpp"
#include "lamkit/store.hpp"

namespace lamkit {

namespace {

constexpr uint64_t kOracleNoiseTag = 0x6f7263ULL;
constexpr uint64_t kInstructionTag = 0x696e73ULL;

}  // namespace

const char* target_kind_name(TargetKind k) {
  switch (k) {
    case TargetKind::pixel: return "pixel";
    case TargetKind::twin: return "twin";
    case TargetKind::oracle: return "oracle";
    case TargetKind::embedding: return "embedding";
    case TargetKind::otter: return "otter";
    case TargetKind::univla: return "univla";
  }
  return "?";
}

TargetKind parse_target_kind(const std::string& s) {
  for (TargetKind k : {TargetKind::pixel, TargetKind::twin, TargetKind::oracle,
                       TargetKind::embedding, TargetKind::otter, TargetKind::univla})
    if (s == target_kind_name(k)) return k;
  throw ConfigError("unknown target kind '" + s + "'");
}

TargetSpec parse_target_spec(const std::string& s) {
  TargetSpec spec;
  size_t colon = s.find(':');
  std::string kind = colon == std::string::npos ? s : s.substr(0, colon);
  std::string rest = colon == std::string::npos ? "" : s.substr(colon + 1);
  spec.kind = parse_target_kind(kind);
  switch (spec.kind) {
    case TargetKind::pixel:
    case TargetKind::twin:
      if (!rest.empty()) throw ConfigError("target '" + kind + "' takes no argument");
      break;
    case TargetKind::oracle:
      if (!rest.empty()) {
        try {
          spec.oracle_noise_dims = std::stoi(rest);
        } catch (const std::exception&) {
          throw ConfigError("bad oracle noise dims '" + rest + "'");
        }
        if (spec.oracle_noise_dims < 0) throw ConfigError("oracle noise dims must be >= 0");
      }
      break;
    case TargetKind::embedding:
      if (rest.empty()) throw ConfigError("embedding target needs a store: embedding:<dir>");
      spec.store_dir = rest;
      break;
    case TargetKind::otter: {
      size_t sep = rest.find(':');
      if (sep == std::string::npos)
        throw ConfigError("otter target needs otter:<patch_store>:<text_file>");
      spec.store_dir = rest.substr(0, sep);
      spec.text_vectors = rest.substr(sep + 1);
      if (spec.store_dir.empty() || spec.text_vectors.empty())
        throw ConfigError("otter target needs otter:<patch_store>:<text_file>");
      break;
    }
    case TargetKind::univla:
      if (!rest.empty()) spec.instruction_file = rest;
      break;
  }
  return spec;
}

std::string target_spec_string(const TargetSpec& spec) {
  switch (spec.kind) {
    case TargetKind::pixel:
    case TargetKind::twin:
      return target_kind_name(spec.kind);
    case TargetKind::oracle:
      return "oracle:" + std::to_string(spec.oracle_noise_dims);
    case TargetKind::embedding:
      return "embedding:" + spec.store_dir.string();
    case TargetKind::otter:
      return "otter:" + spec.store_dir.string() + ":" + spec.text_vectors.string();
    case TargetKind::univla:
      return spec.instruction_file.empty() ? "univla"
                                           : "univla:" + spec.instruction_file.string();
  }
  return "?";
}

void normalize_frame_chw(const uint8_t* hwc, int size, float* chw) {
  int plane = size * size;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const uint8_t* p = hwc + 3 * (y * size + x);
      int i = y * size + x;
      chw[i] = p[0] * (1.0f / 255.0f);
      chw[plane + i] = p[1] * (1.0f / 255.0f);
      chw[2 * plane + i] = p[2] * (1.0f / 255.0f);
    }
}

std::vector<float> otter_filter(std::span<const float> patches, int64_t n_patches,
                                std::span<const float> texts, int64_t n_texts, int64_t dim) {
  if (n_patches <= 0) throw ConfigError("otter filter needs at least one patch");
  if (n_texts <= 0) throw ConfigError("otter filter needs at least one text vector");
  if (static_cast<int64_t>(patches.size()) != n_patches * dim ||
      static_cast<int64_t>(texts.size()) != n_texts * dim)
    throw ConfigError("otter filter shape mismatch");

  double scale = 1.0 / (std::sqrt(static_cast<double>(dim)) * static_cast<double>(n_texts));
  std::vector<double> scores(static_cast<size_t>(n_patches), 0.0);
  for (int64_t n = 0; n < n_patches; ++n) {
    const float* p = patches.data() + n * dim;
    double s = 0.0;
    for (int64_t m = 0; m < n_texts; ++m) {
      const float* t = texts.data() + m * dim;
      double dot = 0.0;
      for (int64_t d = 0; d < dim; ++d) dot += static_cast<double>(t[d]) * p[d];
      s += dot;
    }
    scores[static_cast<size_t>(n)] = s * scale;
  }

  double mx = scores[0];
  for (double s : scores) mx = std::max(mx, s);
  double z = 0.0;
  std::vector<double> w(scores.size());
  for (size_t i = 0; i < scores.size(); ++i) {
    w[i] = std::exp(scores[i] - mx);
    z += w[i];
  }

  std::vector<double> acc(static_cast<size_t>(dim), 0.0);
  for (int64_t n = 0; n < n_patches; ++n) {
    double wn = w[static_cast<size_t>(n)] / z;
    const float* p = patches.data() + n * dim;
    for (int64_t d = 0; d < dim; ++d) acc[static_cast<size_t>(d)] += wn * p[d];
  }
  std::vector<float> out(static_cast<size_t>(dim));
  for (int64_t d = 0; d < dim; ++d) out[static_cast<size_t>(d)] = static_cast<float>(acc[d]);
  return out;
}

namespace {

class FrameTarget final : public TargetProvider {
 public:
  FrameTarget(const TrajectoryDataset& ds, TargetKind kind) : ds_(ds), kind_(kind) {
    if (kind == TargetKind::twin && !ds.has_twins())
      throw ConfigError("twin targets need a dataset generated with twins");
  }
  TargetKind kind() const override { return kind_; }
  std::vector<int64_t> shape() const override { return {3, ds_.frame_size(), ds_.frame_size()}; }
  bool is_image() const override { return true; }
  void target(int64_t n, int64_t t, float* out) const override {
    const uint8_t* src =
        kind_ == TargetKind::twin ? ds_.twin(n, t + 1) : ds_.frame(n, t + 1);
    normalize_frame_chw(src, static_cast<int>(ds_.frame_size()), out);
  }

 protected:
  const TrajectoryDataset& ds_;
  TargetKind kind_;
};

class UnivlaTarget final : public TargetProvider {
 public:
  UnivlaTarget(const TrajectoryDataset& ds, const TargetSpec& spec) : ds_(ds) {
    if (!spec.instruction_file.empty()) {
      std::ifstream in(spec.instruction_file, std::ios::binary);
      if (!in) throw IoError("cannot open instruction file: " + spec.instruction_file.string());
      uint8_t hdr[4];
      in.read(reinterpret_cast<char*>(hdr), 4);
      if (in.gcount() != 4)
        throw CorruptionError("truncated instruction file: " + spec.instruction_file.string());
      uint32_t dim = uint32_t(hdr[0]) | uint32_t(hdr[1]) << 8 | uint32_t(hdr[2]) << 16 |
                     uint32_t(hdr[3]) << 24;
      if (dim == 0 || dim > (1u << 20))
        throw CorruptionError("implausible instruction dim " + std::to_string(dim));
      instruction_.resize(dim);
      in.read(reinterpret_cast<char*>(instruction_.data()),
              static_cast<std::streamsize>(dim * sizeof(float)));
      if (static_cast<size_t>(in.gcount()) != dim * sizeof(float))
        throw CorruptionError("truncated instruction file: " + spec.instruction_file.string());
    } else {
      // Pseudo embedding of the task text; any fixed text maps to a fixed
      // vector, distinct texts to distinct vectors.
      std::string text = ds.manifest.get_or("task_text", "");
      if (text.empty()) throw ConfigError("univla needs a dataset task_text or an instruction file");
      Rng rng({fnv1a64(text), kInstructionTag});
      instruction_.resize(static_cast<size_t>(spec.instruction_dim));
      for (float& v : instruction_) v = rng.normal();
    }
  }
  TargetKind kind() const override { return TargetKind::univla; }
  std::vector<int64_t> shape() const override { return {3, ds_.frame_size(), ds_.frame_size()}; }
  bool is_image() const override { return true; }
  void target(int64_t n, int64_t t, float* out) const override {
    normalize_frame_chw(ds_.frame(n, t + 1), static_cast<int>(ds_.frame_size()), out);
  }
  std::span<const float> instruction() const override { return instruction_; }

 private:
  const TrajectoryDataset& ds_;
  std::vector<float> instruction_;
};

class OracleTarget final : public TargetProvider {
 public:
  OracleTarget(const TrajectoryDataset& ds, int noise_dims)
      : ds_(ds),
        noise_dims_(noise_dims),
        noise_seed_(seed_mix(
            {static_cast<uint64_t>(ds.manifest.get_int("seed")), kOracleNoiseTag})) {
    if (!ds.states)
      throw UnsupportedError(
          "state-based targets need simulator states, which this dataset does not carry");
  }
  TargetKind kind() const override { return TargetKind::oracle; }
  std::vector<int64_t> shape() const override { return {4 + noise_dims_}; }
  bool is_image() const override { return false; }
  void target(int64_t n, int64_t t, float* out) const override {
    const float* s = ds_.state(n, t + 1);
    out[0] = s[0];
    out[1] = s[1];
    out[2] = s[2];
    out[3] = s[3];
    Rng rng({noise_seed_, static_cast<uint64_t>(n), static_cast<uint64_t>(t)});
    for (int d = 0; d < noise_dims_; ++d) out[4 + d] = rng.normal();
  }

 private:
  const TrajectoryDataset& ds_;
  int noise_dims_;
  uint64_t noise_seed_;
};

class EmbeddingTarget final : public TargetProvider {
 public:
  explicit EmbeddingTarget(const std::filesystem::path& dir)
      : store_(EmbeddingStore::open(dir)) {}
  TargetKind kind() const override { return TargetKind::embedding; }
  std::vector<int64_t> shape() const override { return {store_.dim()}; }
  bool is_image() const override { return false; }
  void target(int64_t n, int64_t t, float* out) const override {
    auto v = store_.vector_for(static_cast<uint32_t>(n), static_cast<uint32_t>(t + 1));
    std::memcpy(out, v.data(), v.size() * sizeof(float));
  }

 private:
  EmbeddingStore store_;
};

class OtterTarget final : public TargetProvider {
 public:
  OtterTarget(const std::filesystem::path& store_dir, const std::filesystem::path& text_file)
      : store_(EmbeddingStore::open(store_dir)) {
    NdArray texts = read_array(text_file);
    if (texts.dims.size() != 2 || texts.dtype != Dtype::f32)
      throw ConfigError("text vectors must be a rank-2 float32 array [K, D]");
    if (texts.dims[1] != store_.dim())
      throw ConfigError("text vector dim " + std::to_string(texts.dims[1]) +
                        " does not match patch store dim " + std::to_string(store_.dim()));
    n_texts_ = texts.dims[0];
    auto v = texts.f32();
    texts_.assign(v.begin(), v.end());
  }
  TargetKind kind() const override { return TargetKind::otter; }
  std::vector<int64_t> shape() const override { return {store_.dim()}; }
  bool is_image() const override { return false; }
  void target(int64_t n, int64_t t, float* out) const override {
    const auto& rows = store_.rows_for(static_cast<uint32_t>(n), static_cast<uint32_t>(t + 1));
    std::vector<float> patches;
    patches.reserve(rows.size() * static_cast<size_t>(store_.dim()));
    for (int64_t r : rows) {
      auto row = store_.row(r);
      patches.insert(patches.end(), row.begin(), row.end());
    }
    std::vector<float> filtered = otter_filter(patches, static_cast<int64_t>(rows.size()),
                                               texts_, n_texts_, store_.dim());
    std::memcpy(out, filtered.data(), filtered.size() * sizeof(float));
  }

 private:
  EmbeddingStore store_;
  std::vector<float> texts_;
  int64_t n_texts_ = 0;
};

}  // namespace

std::unique_ptr<TargetProvider> make_target_provider(const TargetSpec& spec,
                                                     const TrajectoryDataset& ds) {
  switch (spec.kind) {
    case TargetKind::pixel:
      return std::make_unique<FrameTarget>(ds, TargetKind::pixel);
    case TargetKind::twin:
      return std::make_unique<FrameTarget>(ds, TargetKind::twin);
    case TargetKind::oracle:
      return std::make_unique<OracleTarget>(ds, spec.oracle_noise_dims);
    case TargetKind::embedding:
      return std::make_unique<EmbeddingTarget>(spec.store_dir);
    case TargetKind::otter:
      return std::make_unique<OtterTarget>(spec.store_dir, spec.text_vectors);
    case TargetKind::univla:
      return std::make_unique<UnivlaTarget>(ds, spec);
  }
  throw ConfigError("unhandled target kind");
}

}  // namespace lamkit
