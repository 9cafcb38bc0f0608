#include "lamkit/nn/modules.hpp"

#include <cmath>

#include "lamkit/errors.hpp"

namespace lamkit::nn {

ConvEncoder::ConvEncoder(ParamStore& ps, const std::string& prefix, int in_channels,
                         int input_size, std::vector<int> channels, int res_blocks, Rng& init)
    : in_channels_(in_channels), input_size_(input_size), channels_(std::move(channels)) {
  if (channels_.empty()) throw ConfigError("conv encoder needs at least one channel entry");
  int size = input_size;
  int cin = in_channels;
  for (size_t i = 0; i < channels_.size(); ++i) {
    int c = channels_[i];
    if (c <= 0) throw ConfigError("conv encoder channel counts must be positive");
    Block b;
    std::string base = prefix + "/block" + std::to_string(i);
    b.w = &ps.add(base + "/conv_w", {c, cin, 3, 3});
    b.b = &ps.add(base + "/conv_b", {c});
    init_kaiming(*b.w, static_cast<int64_t>(cin) * 9, init);
    for (int r = 0; r < res_blocks; ++r) {
      ResPair rp;
      std::string rb = base + "/res" + std::to_string(r);
      rp.w1 = &ps.add(rb + "/conv1_w", {c, c, 3, 3});
      rp.b1 = &ps.add(rb + "/conv1_b", {c});
      rp.w2 = &ps.add(rb + "/conv2_w", {c, c, 3, 3});
      rp.b2 = &ps.add(rb + "/conv2_b", {c});
      init_kaiming(*rp.w1, static_cast<int64_t>(c) * 9, init);
      init_kaiming(*rp.w2, static_cast<int64_t>(c) * 9, init);
      b.res.push_back(rp);
    }
    blocks_.push_back(b);
    size = (size - 1) / 2 + 1;
    sizes_.push_back(size);
    cin = c;
  }
}

int64_t ConvEncoder::map_dim() const {
  int64_t s = sizes_.back();
  return static_cast<int64_t>(channels_.back()) * s * s;
}

int64_t ConvEncoder::coord_dim() const {
  int64_t n = 2 * in_channels_;
  for (int c : channels_) n += 2 * c;
  return n;
}

int64_t ConvEncoder::flat_dim() const { return map_dim() + coord_dim(); }

namespace {
constexpr float kCoordBeta = 3.0f;
}

ConvEncoder::Result ConvEncoder::forward(Tape& t, int x) const {
  Result res;
  int cin = in_channels_;
  int size = input_size_;
  int h = x;
  std::vector<int> parts;
  // Coordinates of the raw input planes anchor the readout from step one:
  // they need no trained weights, so they are precise at any init, and the
  // learned stages refine on top of them.
  parts.push_back(t.softargmax2d(x, cin, size, size, kCoordBeta));
  for (size_t i = 0; i < blocks_.size(); ++i) {
    const Block& b = blocks_[i];
    int c = channels_[i];
    h = t.conv3x3(h, *b.w, *b.b, cin, size, size, c);
    h = t.avgpool3x3s2(h, c, size, size);
    size = sizes_[i];
    for (const ResPair& rp : b.res) {
      int r = t.relu(h);
      r = t.conv3x3(r, *rp.w1, *rp.b1, c, size, size, c);
      r = t.relu(r);
      r = t.conv3x3(r, *rp.w2, *rp.b2, c, size, size, c);
      h = t.add(h, r);
    }
    res.stages.push_back(h);
    parts.push_back(t.softargmax2d(h, c, size, size, kCoordBeta));
    cin = c;
  }
  int co = parts[0];
  for (size_t i = 1; i < parts.size(); ++i) co = t.concat({co, parts[i]});
  res.coords = co;
  res.flat = t.concat({h, co});
  return res;
}

ImageDecoder::ImageDecoder(ParamStore& ps, const std::string& prefix, const ConvEncoder& enc,
                           int64_t cond_dim, Rng& init)
    : enc_(enc), cond_dim_(cond_dim) {
  const auto& ch = enc.stage_channels();
  int64_t c_bot = ch.back();
  neck_w_ = &ps.add(prefix + "/neck_w", {c_bot, c_bot + cond_dim, 3, 3});
  neck_b_ = &ps.add(prefix + "/neck_b", {c_bot});
  init_kaiming(*neck_w_, (c_bot + cond_dim) * 9, init);

  for (size_t i = ch.size(); i-- > 1;) {
    Up u;
    std::string base = prefix + "/up" + std::to_string(i);
    u.w = &ps.add(base + "/conv_w", {ch[i - 1], ch[i] + cond_dim, 3, 3});
    u.b = &ps.add(base + "/conv_b", {ch[i - 1]});
    init_kaiming(*u.w, static_cast<int64_t>(ch[i] + cond_dim) * 9, init);
    ups_.push_back(u);
  }
  head_w_ = &ps.add(prefix + "/head_w", {3, ch[0], 3, 3});
  head_b_ = &ps.add(prefix + "/head_b", {3});
  init_normal(*head_w_, 1.0f / std::sqrt(static_cast<float>(ch[0]) * 9.0f), init);
}

int ImageDecoder::forward(Tape& t, const ConvEncoder::Result& enc_out, int cond) const {
  const auto& ch = enc_.stage_channels();
  const auto& sz = enc_.stage_sizes();
  size_t m = ch.size();

  // The conditioning vector is broadcast over space and consumed by plain
  // convolutions at every scale. A conv stack has no way to turn a global
  // value into an output location by itself, so the latent can only act
  // relative to structure already present in the encoder features; that is
  // exactly the role a latent action should play, and it rules out codes
  // that name absolute positions. For the same reason the decoder reads the
  // encoder's feature maps, never its coordinate readouts.
  int d = t.concat({enc_out.stages.back(), t.tile2d(cond, cond_dim_, sz[m - 1], sz[m - 1])});
  d = t.conv3x3(d, *neck_w_, *neck_b_, static_cast<int>(ch[m - 1] + cond_dim_), sz[m - 1],
                sz[m - 1], ch[m - 1]);
  d = t.relu(d);

  for (size_t k = 0; k < ups_.size(); ++k) {
    size_t i = m - 1 - k;  // producing stage i-1 from stage i
    int u = t.upsample2x(d, ch[i], sz[i], sz[i]);
    int up_size = sz[i] * 2;
    u = t.concat({u, t.tile2d(cond, cond_dim_, up_size, up_size)});
    int c = t.conv3x3(u, *ups_[k].w, *ups_[k].b, static_cast<int>(ch[i] + cond_dim_), up_size,
                      up_size, ch[i - 1]);
    d = t.relu(c);
  }

  int u = t.upsample2x(d, ch[0], sz[0], sz[0]);
  int full = sz[0] * 2;
  return t.conv3x3(u, *head_w_, *head_b_, ch[0], full, full, 3);
}

MlpStack::MlpStack(ParamStore& ps, const std::string& prefix, int64_t in_dim, int hidden,
                   int layers, int expand, int64_t out_dim, Rng& init)
    : in_dim_(in_dim), out_dim_(out_dim), hidden_(hidden), expand_(expand) {
  if (hidden <= 0 || layers < 0 || expand <= 0) throw ConfigError("bad mlp stack geometry");
  in_w_ = &ps.add(prefix + "/in_w", {hidden, in_dim});
  in_b_ = &ps.add(prefix + "/in_b", {hidden});
  init_kaiming(*in_w_, in_dim, init);
  for (int l = 0; l < layers; ++l) {
    Layer lay;
    std::string base = prefix + "/layer" + std::to_string(l);
    lay.ln_g = &ps.add(base + "/ln_g", {hidden});
    lay.ln_b = &ps.add(base + "/ln_b", {hidden});
    init_ones(*lay.ln_g);
    lay.w1 = &ps.add(base + "/w1", {static_cast<int64_t>(hidden) * expand, hidden});
    lay.b1 = &ps.add(base + "/b1", {static_cast<int64_t>(hidden) * expand});
    lay.w2 = &ps.add(base + "/w2", {hidden, static_cast<int64_t>(hidden) * expand});
    lay.b2 = &ps.add(base + "/b2", {hidden});
    init_kaiming(*lay.w1, hidden, init);
    init_normal(*lay.w2, 1.0f / std::sqrt(static_cast<float>(hidden) * expand), init);
    layers_.push_back(lay);
  }
  fin_g_ = &ps.add(prefix + "/final_ln_g", {hidden});
  fin_b_ = &ps.add(prefix + "/final_ln_b", {hidden});
  init_ones(*fin_g_);
  out_w_ = &ps.add(prefix + "/out_w", {out_dim, hidden});
  out_b_ = &ps.add(prefix + "/out_b", {out_dim});
  init_normal(*out_w_, 1.0f / std::sqrt(static_cast<float>(hidden)), init);
}

int MlpStack::forward(Tape& t, int x) const {
  int h = t.linear(x, *in_w_, in_b_, 1, in_dim_, hidden_);
  for (const Layer& lay : layers_) {
    int n = t.layernorm(h, *lay.ln_g, *lay.ln_b, 1, hidden_);
    int m = t.linear(n, *lay.w1, lay.b1, 1, hidden_, static_cast<int64_t>(hidden_) * expand_);
    m = t.gelu(m);
    m = t.linear(m, *lay.w2, lay.b2, 1, static_cast<int64_t>(hidden_) * expand_, hidden_);
    h = t.add(h, m);
  }
  int n = t.layernorm(h, *fin_g_, *fin_b_, 1, hidden_);
  return t.linear(n, *out_w_, out_b_, 1, hidden_, out_dim_);
}

TransformerEncoder::TransformerEncoder(ParamStore& ps, const std::string& prefix, int n_tokens,
                                       int64_t token_dim, int hidden, int layers, int heads,
                                       bool pre_norm, bool normalize_qk, int64_t extra_dim,
                                       int64_t out_dim, Rng& init)
    : n_tokens_(n_tokens),
      token_dim_(token_dim),
      extra_dim_(extra_dim),
      out_dim_(out_dim),
      hidden_(hidden),
      heads_(heads),
      pre_norm_(pre_norm),
      normalize_qk_(normalize_qk) {
  if (hidden % heads != 0) throw ConfigError("transformer hidden dim not divisible by heads");
  proj_w_ = &ps.add(prefix + "/proj_w", {hidden, token_dim});
  proj_b_ = &ps.add(prefix + "/proj_b", {hidden});
  init_normal(*proj_w_, 1.0f / std::sqrt(static_cast<float>(token_dim)), init);
  extra_w_ = extra_b_ = nullptr;
  int total = n_tokens;
  if (extra_dim > 0) {
    extra_w_ = &ps.add(prefix + "/extra_w", {hidden, extra_dim});
    extra_b_ = &ps.add(prefix + "/extra_b", {hidden});
    init_normal(*extra_w_, 1.0f / std::sqrt(static_cast<float>(extra_dim)), init);
    total += 1;
  }
  pos_ = &ps.add(prefix + "/pos", {static_cast<int64_t>(total) * hidden});
  init_normal(*pos_, 0.02f, init);

  for (int l = 0; l < layers; ++l) {
    Block b;
    std::string base = prefix + "/block" + std::to_string(l);
    b.ln1_g = &ps.add(base + "/ln1_g", {hidden});
    b.ln1_b = &ps.add(base + "/ln1_b", {hidden});
    b.ln2_g = &ps.add(base + "/ln2_g", {hidden});
    b.ln2_b = &ps.add(base + "/ln2_b", {hidden});
    init_ones(*b.ln1_g);
    init_ones(*b.ln2_g);
    auto attn_param = [&](const char* nm, std::vector<int64_t> shape, float std) {
      Param& p = ps.add(base + "/attn_" + nm, std::move(shape));
      if (std > 0) init_normal(p, std, init);
      return &p;
    };
    float wstd = 0.02f;
    b.attn.wq = attn_param("wq", {hidden, hidden}, wstd);
    b.attn.bq = attn_param("bq", {hidden}, 0);
    b.attn.wk = attn_param("wk", {hidden, hidden}, wstd);
    b.attn.bk = attn_param("bk", {hidden}, 0);
    b.attn.wv = attn_param("wv", {hidden, hidden}, wstd);
    b.attn.bv = attn_param("bv", {hidden}, 0);
    b.attn.wo = attn_param("wo", {hidden, hidden}, wstd);
    b.attn.bo = attn_param("bo", {hidden}, 0);
    b.mlp_w1 = &ps.add(base + "/mlp_w1", {static_cast<int64_t>(hidden) * 4, hidden});
    b.mlp_b1 = &ps.add(base + "/mlp_b1", {static_cast<int64_t>(hidden) * 4});
    b.mlp_w2 = &ps.add(base + "/mlp_w2", {hidden, static_cast<int64_t>(hidden) * 4});
    b.mlp_b2 = &ps.add(base + "/mlp_b2", {hidden});
    init_kaiming(*b.mlp_w1, hidden, init);
    init_normal(*b.mlp_w2, 0.02f, init);
    blocks_.push_back(b);
  }
  fin_g_ = &ps.add(prefix + "/final_ln_g", {hidden});
  fin_b_ = &ps.add(prefix + "/final_ln_b", {hidden});
  init_ones(*fin_g_);
  out_w_ = &ps.add(prefix + "/out_w", {out_dim, hidden});
  out_b_ = &ps.add(prefix + "/out_b", {out_dim});
  init_normal(*out_w_, 1.0f / std::sqrt(static_cast<float>(hidden)), init);
}

int TransformerEncoder::forward(Tape& t, int tokens, int extra) const {
  int64_t rows = n_tokens_;
  int x = t.linear(tokens, *proj_w_, proj_b_, rows, token_dim_, hidden_);
  if (extra_dim_ > 0) {
    if (extra < 0) throw ConfigError("transformer expects a conditioning vector");
    int xi = t.linear(extra, *extra_w_, extra_b_, 1, extra_dim_, hidden_);
    x = t.concat({x, xi});
    rows += 1;
  }
  x = t.add(x, t.param(*pos_));

  for (const Block& b : blocks_) {
    if (pre_norm_) {
      int a = t.layernorm(x, *b.ln1_g, *b.ln1_b, rows, hidden_);
      a = t.attention(a, b.attn, rows, hidden_, heads_, normalize_qk_);
      x = t.add(x, a);
      int m = t.layernorm(x, *b.ln2_g, *b.ln2_b, rows, hidden_);
      m = t.linear(m, *b.mlp_w1, b.mlp_b1, rows, hidden_, static_cast<int64_t>(hidden_) * 4);
      m = t.gelu(m);
      m = t.linear(m, *b.mlp_w2, b.mlp_b2, rows, static_cast<int64_t>(hidden_) * 4, hidden_);
      x = t.add(x, m);
    } else {
      int a = t.attention(x, b.attn, rows, hidden_, heads_, normalize_qk_);
      x = t.layernorm(t.add(x, a), *b.ln1_g, *b.ln1_b, rows, hidden_);
      int m = t.linear(x, *b.mlp_w1, b.mlp_b1, rows, hidden_, static_cast<int64_t>(hidden_) * 4);
      m = t.gelu(m);
      m = t.linear(m, *b.mlp_w2, b.mlp_b2, rows, static_cast<int64_t>(hidden_) * 4, hidden_);
      x = t.layernorm(t.add(x, m), *b.ln2_g, *b.ln2_b, rows, hidden_);
    }
  }
  if (pre_norm_) x = t.layernorm(x, *fin_g_, *fin_b_, rows, hidden_);
  int pooled = t.mean_rows(x, rows, hidden_);
  return t.linear(pooled, *out_w_, out_b_, 1, hidden_, out_dim_);
}

void patchify_chw(const float* chw, int channels, int size, int patch, float* tokens) {
  if (size % patch != 0) throw ConfigError("frame size not divisible by patch size");
  int per_side = size / patch;
  int64_t token_dim = static_cast<int64_t>(patch) * patch * channels;
  for (int py = 0; py < per_side; ++py)
    for (int px = 0; px < per_side; ++px) {
      float* tok = tokens + (static_cast<int64_t>(py) * per_side + px) * token_dim;
      int64_t o = 0;
      for (int c = 0; c < channels; ++c) {
        const float* plane = chw + static_cast<int64_t>(c) * size * size;
        for (int y = 0; y < patch; ++y) {
          const float* row = plane + static_cast<int64_t>(py * patch + y) * size + px * patch;
          for (int x = 0; x < patch; ++x) tok[o++] = row[x];
        }
      }
    }
}

}  // namespace lamkit::nn
