#include "lamkit/nn/tape.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

#include "lamkit/errors.hpp"

namespace lamkit::nn {

namespace {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<Mat>;
using CMapM = Eigen::Map<const Mat>;
using Stride = Eigen::OuterStride<>;
using MapS = Eigen::Map<Mat, 0, Stride>;
using CMapS = Eigen::Map<const Mat, 0, Stride>;

constexpr float kGeluK = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluC = 0.044715f;

}  // namespace

void Tape::reset() {
  nodes_.clear();
  backs_.clear();
  chunk_pos_ = 0;
  chunk_idx_ = 0;
  ichunk_pos_ = 0;
  ichunk_idx_ = 0;
}

float* Tape::alloc(int64_t n) {
  size_t need = static_cast<size_t>(n);
  while (chunk_idx_ < chunks_.size() && chunks_[chunk_idx_].size() - chunk_pos_ < need) {
    ++chunk_idx_;
    chunk_pos_ = 0;
  }
  if (chunk_idx_ == chunks_.size()) {
    chunks_.emplace_back(std::max<size_t>(need, size_t{1} << 20));
    chunk_pos_ = 0;
  }
  float* p = chunks_[chunk_idx_].data() + chunk_pos_;
  chunk_pos_ += need;
  return p;
}

float* Tape::alloc_zero(int64_t n) {
  float* p = alloc(n);
  std::memset(p, 0, static_cast<size_t>(n) * sizeof(float));
  return p;
}

int32_t* Tape::alloc_i32(int64_t n) {
  size_t need = static_cast<size_t>(n);
  while (ichunk_idx_ < ichunks_.size() && ichunks_[ichunk_idx_].size() - ichunk_pos_ < need) {
    ++ichunk_idx_;
    ichunk_pos_ = 0;
  }
  if (ichunk_idx_ == ichunks_.size()) {
    ichunks_.emplace_back(std::max<size_t>(need, size_t{1} << 18));
    ichunk_pos_ = 0;
  }
  int32_t* p = ichunks_[ichunk_idx_].data() + ichunk_pos_;
  ichunk_pos_ += need;
  return p;
}

int Tape::push(const float* v, float* g, int64_t n) {
  nodes_.push_back({v, g, n});
  backs_.emplace_back();
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::make(int64_t n) { return push(alloc(n), alloc_zero(n), n); }

int Tape::constant(const float* data, int64_t n) { return push(data, nullptr, n); }

int Tape::param(Param& p) { return push(p.value.data(), p.grad.data(), p.numel()); }

int Tape::add(int a, int b) {
  const Node& na = nodes_[static_cast<size_t>(a)];
  const Node& nb = nodes_[static_cast<size_t>(b)];
  if (na.n != nb.n) throw ConfigError("add: operand sizes differ");
  int out = make(na.n);
  Node& no = nodes_[static_cast<size_t>(out)];
  for (int64_t i = 0; i < na.n; ++i) const_cast<float*>(no.v)[i] = na.v[i] + nb.v[i];
  float* ga = na.g;
  float* gb = nb.g;
  float* go = no.g;
  int64_t n = na.n;
  backs_.back() = [ga, gb, go, n] {
    if (ga)
      for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
    if (gb)
      for (int64_t i = 0; i < n; ++i) gb[i] += go[i];
  };
  return out;
}

int Tape::relu(int x) {
  const Node& nx = nodes_[static_cast<size_t>(x)];
  int out = make(nx.n);
  Node& no = nodes_[static_cast<size_t>(out)];
  float* ov = const_cast<float*>(no.v);
  for (int64_t i = 0; i < nx.n; ++i) ov[i] = nx.v[i] > 0.0f ? nx.v[i] : 0.0f;
  float* gx = nx.g;
  float* go = no.g;
  const float* xv = nx.v;
  int64_t n = nx.n;
  backs_.back() = [gx, go, xv, n] {
    if (!gx) return;
    for (int64_t i = 0; i < n; ++i)
      if (xv[i] > 0.0f) gx[i] += go[i];
  };
  return out;
}

int Tape::gelu(int x) {
  const Node& nx = nodes_[static_cast<size_t>(x)];
  int out = make(nx.n);
  Node& no = nodes_[static_cast<size_t>(out)];
  float* ov = const_cast<float*>(no.v);
  for (int64_t i = 0; i < nx.n; ++i) {
    float v = nx.v[i];
    float t = std::tanh(kGeluK * (v + kGeluC * v * v * v));
    ov[i] = 0.5f * v * (1.0f + t);
  }
  float* gx = nx.g;
  float* go = no.g;
  const float* xv = nx.v;
  int64_t n = nx.n;
  backs_.back() = [gx, go, xv, n] {
    if (!gx) return;
    for (int64_t i = 0; i < n; ++i) {
      float v = xv[i];
      float t = std::tanh(kGeluK * (v + kGeluC * v * v * v));
      float d = 0.5f * (1.0f + t) +
                0.5f * v * (1.0f - t * t) * kGeluK * (1.0f + 3.0f * kGeluC * v * v);
      gx[i] += go[i] * d;
    }
  };
  return out;
}

int Tape::concat(std::initializer_list<int> xs) {
  int64_t total = 0;
  for (int x : xs) total += nodes_[static_cast<size_t>(x)].n;
  int out = make(total);
  Node& no = nodes_[static_cast<size_t>(out)];
  float* ov = const_cast<float*>(no.v);
  struct Piece {
    float* g;
    int64_t n, off;
  };
  std::vector<Piece> pieces;
  int64_t off = 0;
  for (int x : xs) {
    const Node& nx = nodes_[static_cast<size_t>(x)];
    std::memcpy(ov + off, nx.v, static_cast<size_t>(nx.n) * sizeof(float));
    pieces.push_back({nx.g, nx.n, off});
    off += nx.n;
  }
  float* go = no.g;
  backs_.back() = [pieces = std::move(pieces), go] {
    for (const Piece& p : pieces) {
      if (!p.g) continue;
      for (int64_t i = 0; i < p.n; ++i) p.g[i] += go[p.off + i];
    }
  };
  return out;
}

int Tape::mean_rows(int x, int64_t rows, int64_t cols) {
  const Node& nx = nodes_[static_cast<size_t>(x)];
  if (nx.n != rows * cols) throw ConfigError("mean_rows: size mismatch");
  int out = make(cols);
  Node& no = nodes_[static_cast<size_t>(out)];
  float* ov = const_cast<float*>(no.v);
  for (int64_t d = 0; d < cols; ++d) {
    double acc = 0.0;
    for (int64_t r = 0; r < rows; ++r) acc += nx.v[r * cols + d];
    ov[d] = static_cast<float>(acc / static_cast<double>(rows));
  }
  float* gx = nx.g;
  float* go = no.g;
  backs_.back() = [gx, go, rows, cols] {
    if (!gx) return;
    float inv = 1.0f / static_cast<float>(rows);
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t d = 0; d < cols; ++d) gx[r * cols + d] += go[d] * inv;
  };
  return out;
}

int Tape::linear(int x, Param& w, Param* b, int64_t rows, int64_t in_dim, int64_t out_dim) {
  const Node& nx = nodes_[static_cast<size_t>(x)];
  if (nx.n != rows * in_dim) throw ConfigError("linear: input size mismatch for " + w.name);
  if (w.numel() != in_dim * out_dim) throw ConfigError("linear: weight shape mismatch for " + w.name);
  if (b && b->numel() != out_dim) throw ConfigError("linear: bias shape mismatch for " + w.name);

  int out = make(rows * out_dim);
  Node& no = nodes_[static_cast<size_t>(out)];
  float* ov = const_cast<float*>(no.v);
  {
    CMapM X(nx.v, rows, in_dim);
    CMapM W(w.value.data(), out_dim, in_dim);
    MapM Y(ov, rows, out_dim);
    Y.noalias() = X * W.transpose();
    if (b)
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t d = 0; d < out_dim; ++d) ov[r * out_dim + d] += b->value[d];
  }
  const float* xv = nx.v;
  float* gx = nx.g;
  float* go = no.g;
  float* wv = w.value.data();
  float* wg = w.grad.data();
  float* bg = b ? b->grad.data() : nullptr;
  backs_.back() = [xv, gx, go, wv, wg, bg, rows, in_dim, out_dim] {
    CMapM dY(go, rows, out_dim);
    CMapM X(xv, rows, in_dim);
    CMapM W(wv, out_dim, in_dim);
    MapM dW(wg, out_dim, in_dim);
    dW.noalias() += dY.transpose() * X;
    if (gx) {
      MapM dX(gx, rows, in_dim);
      dX.noalias() += dY * W;
    }
    if (bg)
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t d = 0; d < out_dim; ++d) bg[d] += go[r * out_dim + d];
  };
  return out;
}

int Tape::conv3x3(int x, Param& w, Param& b, int c_in, int h, int wd, int c_out) {
  const Node& nx = nodes_[static_cast<size_t>(x)];
  int64_t hw = static_cast<int64_t>(h) * wd;
  if (nx.n != c_in * hw) throw ConfigError("conv3x3: input size mismatch for " + w.name);
  if (w.numel() != static_cast<int64_t>(c_out) * c_in * 9)
    throw ConfigError("conv3x3: weight shape mismatch for " + w.name);
  if (b.numel() != c_out) throw ConfigError("conv3x3: bias shape mismatch for " + w.name);

  int64_t k = static_cast<int64_t>(c_in) * 9;
  float* cols = alloc(k * hw);
  for (int c = 0; c < c_in; ++c) {
    const float* plane = nx.v + static_cast<int64_t>(c) * hw;
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        float* row = cols + (static_cast<int64_t>(c) * 9 + ky * 3 + kx) * hw;
        int dy = ky - 1, dx = kx - 1;
        for (int y = 0; y < h; ++y) {
          int sy = y + dy;
          float* dst = row + static_cast<int64_t>(y) * wd;
          if (sy < 0 || sy >= h) {
            std::memset(dst, 0, static_cast<size_t>(wd) * sizeof(float));
            continue;
          }
          const float* src = plane + static_cast<int64_t>(sy) * wd;
          int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
          if (x0 > 0) std::memset(dst, 0, static_cast<size_t>(x0) * sizeof(float));
          if (x1 > x0)
            std::memcpy(dst + x0, src + x0 + dx, static_cast<size_t>(x1 - x0) * sizeof(float));
          if (x1 < wd) std::memset(dst + x1, 0, static_cast<size_t>(wd - x1) * sizeof(float));
        }
      }
  }

  int out = make(static_cast<int64_t>(c_out) * hw);
  Node& no = nodes_[static_cast<size_t>(out)];
  float* ov = const_cast<float*>(no.v);
  {
    CMapM W(w.value.data(), c_out, k);
    CMapM C(cols, k, hw);
    MapM Y(ov, c_out, hw);
    Y.noalias() = W * C;
    for (int c = 0; c < c_out; ++c) {
      float bias = b.value[c];
      float* row = ov + static_cast<int64_t>(c) * hw;
      for (int64_t i = 0; i < hw; ++i) row[i] += bias;
    }
  }

  float* gx = nx.g;
  float* go = no.g;
  float* wv = w.value.data();
  float* wg = w.grad.data();
  float* bgr = b.grad.data();
  Tape* self = this;
  backs_.back() = [self, cols, gx, go, wv, wg, bgr, c_in, h, wd, c_out, k, hw] {
    CMapM dY(go, c_out, hw);
    CMapM C(cols, k, hw);
    MapM dW(wg, c_out, k);
    dW.noalias() += dY * C.transpose();
    for (int c = 0; c < c_out; ++c) {
      double acc = 0.0;
      const float* row = go + static_cast<int64_t>(c) * hw;
      for (int64_t i = 0; i < hw; ++i) acc += row[i];
      bgr[c] += static_cast<float>(acc);
    }
    if (!gx) return;
    float* dcols = self->alloc(k * hw);
    CMapM W(wv, c_out, k);
    MapM dC(dcols, k, hw);
    dC.noalias() = W.transpose() * dY;
    for (int c = 0; c < c_in; ++c) {
      float* plane = gx + static_cast<int64_t>(c) * hw;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const float* row = dcols + (static_cast<int64_t>(c) * 9 + ky * 3 + kx) * hw;
          int dy = ky - 1, dx = kx - 1;
          for (int y = 0; y < h; ++y) {
            int sy = y + dy;
            if (sy < 0 || sy >= h) continue;
            const float* src = row + static_cast<int64_t>(y) * wd;
            float* dst = plane + static_cast<int64_t>(sy) * wd;
            int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
            for (int xx = x0; xx < x1; ++xx) dst[xx + dx] += src[xx];
          }
        }
    }
  };
  return out;
}

int Tape::avgpool3x3s2(int x, int c, int h, int wd) {
  const Node& nx = nodes_[static_cast<size_t>(x)];
  if (nx.n != static_cast<int64_t>(c) * h * wd) throw ConfigError("avgpool: input size mismatch");
  int oh = (h - 1) / 2 + 1;
  int ow = (wd - 1) / 2 + 1;
  int64_t ohw = static_cast<int64_t>(oh) * ow;
  int out = make(static_cast<int64_t>(c) * ohw);
  Node& no = nodes_[static_cast<size_t>(out)];
  float* ov = const_cast<float*>(no.v);

  for (int ch = 0; ch < c; ++ch) {
    const float* plane = nx.v + static_cast<int64_t>(ch) * h * wd;
    float* oplane = ov + static_cast<int64_t>(ch) * ohw;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        int y0 = oy * 2 - 1, x0 = ox * 2 - 1;
        float sum = 0.0f;
        int cnt = 0;
        for (int dy = 0; dy < 3; ++dy) {
          int y = y0 + dy;
          if (y < 0 || y >= h) continue;
          for (int dx = 0; dx < 3; ++dx) {
            int xx = x0 + dx;
            if (xx < 0 || xx >= wd) continue;
            sum += plane[y * wd + xx];
            ++cnt;
          }
        }
        oplane[oy * ow + ox] = sum / static_cast<float>(cnt);
      }
  }

  float* gx = nx.g;
  float* go = no.g;
  backs_.back() = [gx, go, c, h, wd, oh, ow, ohw] {
    if (!gx) return;
    int64_t hw = static_cast<int64_t>(h) * wd;
    for (int ch = 0; ch < c; ++ch) {
      float* plane = gx + ch * hw;
      const float* gop = go + ch * ohw;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          int y0 = oy * 2 - 1, x0 = ox * 2 - 1;
          int cnt = 0;
          for (int dy = 0; dy < 3; ++dy) {
            int y = y0 + dy;
            if (y < 0 || y >= h) continue;
            for (int dx = 0; dx < 3; ++dx) {
              int xx = x0 + dx;
              if (xx < 0 || xx >= wd) continue;
              ++cnt;
            }
          }
          float g = gop[oy * ow + ox] / static_cast<float>(cnt);
          for (int dy = 0; dy < 3; ++dy) {
            int y = y0 + dy;
            if (y < 0 || y >= h) continue;
            for (int dx = 0; dx < 3; ++dx) {
              int xx = x0 + dx;
              if (xx < 0 || xx >= wd) continue;
              plane[y * wd + xx] += g;
            }
          }
        }
    }
  };
  return out;
}

int Tape::softargmax2d(int x, int c, int h, int wd, float beta) {
  const Node& nx = nodes_[static_cast<size_t>(x)];
  if (nx.n != static_cast<int64_t>(c) * h * wd) throw ConfigError("softargmax: input size mismatch");
  int64_t hw = static_cast<int64_t>(h) * wd;
  int out = make(2 * static_cast<int64_t>(c));
  Node& no = nodes_[static_cast<size_t>(out)];
  float* ov = const_cast<float*>(no.v);
  float* probs = alloc(static_cast<int64_t>(c) * hw);
  float* us = alloc(static_cast<int64_t>(c) * hw);
  float* sdev = alloc(c);

  // Logits are standardized per channel, which makes the sharpness adapt to
  // the activation contrast: a flat plane stays near-uniform while a peaked
  // one localizes, independent of the feature scale.
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = nx.v + ch * hw;
    float* p = probs + ch * hw;
    float* u = us + ch * hw;
    double m = 0.0;
    for (int64_t i = 0; i < hw; ++i) m += plane[i];
    m /= static_cast<double>(hw);
    double var = 0.0;
    for (int64_t i = 0; i < hw; ++i) var += (plane[i] - m) * (plane[i] - m);
    float s = static_cast<float>(std::sqrt(var / static_cast<double>(hw) + 1e-6));
    sdev[ch] = s;
    float mx = -1e30f;
    for (int64_t i = 0; i < hw; ++i) {
      u[i] = static_cast<float>((plane[i] - m) / s);
      mx = std::max(mx, u[i]);
    }
    double sum = 0.0;
    for (int64_t i = 0; i < hw; ++i) {
      p[i] = std::exp(beta * (u[i] - mx));
      sum += p[i];
    }
    float inv = static_cast<float>(1.0 / sum);
    double ex = 0.0, ey = 0.0;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < wd; ++xx) {
        float pi = p[y * wd + xx] * inv;
        p[y * wd + xx] = pi;
        ex += pi * ((xx + 0.5f) / wd * 2.0f - 1.0f);
        ey += pi * ((y + 0.5f) / h * 2.0f - 1.0f);
      }
    ov[2 * ch] = static_cast<float>(ex);
    ov[2 * ch + 1] = static_cast<float>(ey);
  }

  float* gx = nx.g;
  float* go = no.g;
  backs_.back() = [gx, go, ov, probs, us, sdev, c, h, wd, hw, beta] {
    if (!gx) return;
    for (int ch = 0; ch < c; ++ch) {
      float* plane = gx + ch * hw;
      const float* p = probs + ch * hw;
      const float* u = us + ch * hw;
      float gex = go[2 * ch], gey = go[2 * ch + 1];
      float ex = ov[2 * ch], ey = ov[2 * ch + 1];
      // d/du of the expectation is beta*p_k*(c_k - e); pulling that back
      // through the standardization leaves a correction along u because the
      // mean shift cancels inside the softmax.
      double ax = 0.0, ay = 0.0;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < wd; ++xx) {
          int64_t i = static_cast<int64_t>(y) * wd + xx;
          float cx = (xx + 0.5f) / wd * 2.0f - 1.0f;
          float cy = (y + 0.5f) / h * 2.0f - 1.0f;
          ax += p[i] * (cx - ex) * u[i];
          ay += p[i] * (cy - ey) * u[i];
        }
      float bs = beta / sdev[ch];
      float inv_n = 1.0f / static_cast<float>(hw);
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < wd; ++xx) {
          int64_t i = static_cast<int64_t>(y) * wd + xx;
          float cx = (xx + 0.5f) / wd * 2.0f - 1.0f;
          float cy = (y + 0.5f) / h * 2.0f - 1.0f;
          float gxv = bs * (p[i] * (cx - ex) - u[i] * inv_n * static_cast<float>(ax));
          float gyv = bs * (p[i] * (cy - ey) - u[i] * inv_n * static_cast<float>(ay));
          plane[i] += gxv * gex + gyv * gey;
        }
    }
  };
  return out;
}

int Tape::tile2d(int v, int dim, int h, int wd) {
  const Node& nv = nodes_[static_cast<size_t>(v)];
  if (nv.n != dim) throw ConfigError("tile2d: input size mismatch");
  int64_t hw = static_cast<int64_t>(h) * wd;
  int out = make(dim * hw);
  Node& no = nodes_[static_cast<size_t>(out)];
  float* ov = const_cast<float*>(no.v);
  for (int d = 0; d < dim; ++d)
    for (int64_t i = 0; i < hw; ++i) ov[d * hw + i] = nv.v[d];

  float* gv = nv.g;
  float* go = no.g;
  backs_.back() = [gv, go, dim, hw] {
    if (!gv) return;
    for (int d = 0; d < dim; ++d) {
      double s = 0.0;
      for (int64_t i = 0; i < hw; ++i) s += go[d * hw + i];
      gv[d] += static_cast<float>(s);
    }
  };
  return out;
}

int Tape::maxpool3x3s2(int x, int c, int h, int wd) {
  const Node& nx = nodes_[static_cast<size_t>(x)];
  if (nx.n != static_cast<int64_t>(c) * h * wd) throw ConfigError("maxpool: input size mismatch");
  int oh = (h - 1) / 2 + 1;
  int ow = (wd - 1) / 2 + 1;
  int64_t ohw = static_cast<int64_t>(oh) * ow;
  int out = make(static_cast<int64_t>(c) * ohw);
  Node& no = nodes_[static_cast<size_t>(out)];
  float* ov = const_cast<float*>(no.v);
  int32_t* arg = alloc_i32(static_cast<int64_t>(c) * ohw);

  for (int ch = 0; ch < c; ++ch) {
    const float* plane = nx.v + static_cast<int64_t>(ch) * h * wd;
    float* oplane = ov + static_cast<int64_t>(ch) * ohw;
    int32_t* aplane = arg + static_cast<int64_t>(ch) * ohw;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        int y0 = oy * 2 - 1, x0 = ox * 2 - 1;
        float best = -std::numeric_limits<float>::infinity();
        int32_t bi = -1;
        for (int dy = 0; dy < 3; ++dy) {
          int y = y0 + dy;
          if (y < 0 || y >= h) continue;
          for (int dx = 0; dx < 3; ++dx) {
            int xx = x0 + dx;
            if (xx < 0 || xx >= wd) continue;
            float v = plane[y * wd + xx];
            if (v > best) {
              best = v;
              bi = y * wd + xx;
            }
          }
        }
        oplane[oy * ow + ox] = best;
        aplane[oy * ow + ox] = bi;
      }
  }

  float* gx = nx.g;
  float* go = no.g;
  int64_t hw = static_cast<int64_t>(h) * wd;
  backs_.back() = [gx, go, arg, c, ohw, hw] {
    if (!gx) return;
    for (int ch = 0; ch < c; ++ch) {
      float* plane = gx + ch * hw;
      const float* gop = go + ch * ohw;
      const int32_t* ap = arg + ch * ohw;
      for (int64_t i = 0; i < ohw; ++i) plane[ap[i]] += gop[i];
    }
  };
  return out;
}

int Tape::upsample2x(int x, int c, int h, int wd) {
  const Node& nx = nodes_[static_cast<size_t>(x)];
  if (nx.n != static_cast<int64_t>(c) * h * wd) throw ConfigError("upsample2x: size mismatch");
  int oh = h * 2, ow = wd * 2;
  int out = make(static_cast<int64_t>(c) * oh * ow);
  Node& no = nodes_[static_cast<size_t>(out)];
  float* ov = const_cast<float*>(no.v);
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = nx.v + static_cast<int64_t>(ch) * h * wd;
    float* oplane = ov + static_cast<int64_t>(ch) * oh * ow;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < wd; ++xx) {
        float v = plane[y * wd + xx];
        float* q = oplane + (2 * y) * ow + 2 * xx;
        q[0] = v;
        q[1] = v;
        q[ow] = v;
        q[ow + 1] = v;
      }
  }
  float* gx = nx.g;
  float* go = no.g;
  backs_.back() = [gx, go, c, h, wd, oh, ow] {
    if (!gx) return;
    for (int ch = 0; ch < c; ++ch) {
      float* plane = gx + static_cast<int64_t>(ch) * h * wd;
      const float* gop = go + static_cast<int64_t>(ch) * oh * ow;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < wd; ++xx) {
          const float* q = gop + (2 * y) * ow + 2 * xx;
          plane[y * wd + xx] += q[0] + q[1] + q[ow] + q[ow + 1];
        }
    }
  };
  return out;
}

int Tape::layernorm(int x, Param& gamma, Param& beta, int64_t rows, int64_t cols) {
  const Node& nx = nodes_[static_cast<size_t>(x)];
  if (nx.n != rows * cols) throw ConfigError("layernorm: size mismatch for " + gamma.name);
  if (gamma.numel() != cols || beta.numel() != cols)
    throw ConfigError("layernorm: affine shape mismatch for " + gamma.name);

  int out = make(rows * cols);
  Node& no = nodes_[static_cast<size_t>(out)];
  float* ov = const_cast<float*>(no.v);
  float* xhat = alloc(rows * cols);
  float* inv_std = alloc(rows);
  constexpr double kEps = 1e-5;

  for (int64_t r = 0; r < rows; ++r) {
    const float* row = nx.v + r * cols;
    double mean = 0.0;
    for (int64_t d = 0; d < cols; ++d) mean += row[d];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t d = 0; d < cols; ++d) {
      double z = row[d] - mean;
      var += z * z;
    }
    var /= static_cast<double>(cols);
    double istd = 1.0 / std::sqrt(var + kEps);
    inv_std[r] = static_cast<float>(istd);
    for (int64_t d = 0; d < cols; ++d) {
      float xh = static_cast<float>((row[d] - mean) * istd);
      xhat[r * cols + d] = xh;
      ov[r * cols + d] = gamma.value[d] * xh + beta.value[d];
    }
  }

  float* gx = nx.g;
  float* go = no.g;
  float* gv = gamma.value.data();
  float* gg = gamma.grad.data();
  float* bg = beta.grad.data();
  backs_.back() = [gx, go, gv, gg, bg, xhat, inv_std, rows, cols] {
    for (int64_t r = 0; r < rows; ++r) {
      const float* dy = go + r * cols;
      const float* xh = xhat + r * cols;
      double m1 = 0.0, m2 = 0.0;
      for (int64_t d = 0; d < cols; ++d) {
        float dxh = dy[d] * gv[d];
        gg[d] += dy[d] * xh[d];
        bg[d] += dy[d];
        m1 += dxh;
        m2 += static_cast<double>(dxh) * xh[d];
      }
      if (!gx) continue;
      m1 /= static_cast<double>(cols);
      m2 /= static_cast<double>(cols);
      float* dx = gx + r * cols;
      for (int64_t d = 0; d < cols; ++d) {
        float dxh = dy[d] * gv[d];
        dx[d] += static_cast<float>((dxh - m1 - xh[d] * m2) * inv_std[r]);
      }
    }
  };
  return out;
}

int Tape::attention(int x, const AttnParams& p, int64_t rows, int64_t dim, int n_heads,
                    bool normalize_qk) {
  const Node& nx = nodes_[static_cast<size_t>(x)];
  if (nx.n != rows * dim) throw ConfigError("attention: input size mismatch");
  if (dim % n_heads != 0) throw ConfigError("attention: dim not divisible by heads");
  int64_t dk = dim / n_heads;
  float scale = 1.0f / std::sqrt(static_cast<float>(dk));
  constexpr double kNormEps = 1e-6;

  float* q = alloc(rows * dim);
  float* kk = alloc(rows * dim);
  float* vv = alloc(rows * dim);
  {
    CMapM X(nx.v, rows, dim);
    CMapM Wq(p.wq->value.data(), dim, dim);
    CMapM Wk(p.wk->value.data(), dim, dim);
    CMapM Wv(p.wv->value.data(), dim, dim);
    MapM(q, rows, dim).noalias() = X * Wq.transpose();
    MapM(kk, rows, dim).noalias() = X * Wk.transpose();
    MapM(vv, rows, dim).noalias() = X * Wv.transpose();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t d = 0; d < dim; ++d) {
        q[r * dim + d] += p.bq->value[d];
        kk[r * dim + d] += p.bk->value[d];
        vv[r * dim + d] += p.bv->value[d];
      }
  }

  // Normalized copies when qk-norm is on; otherwise aliases of q/k.
  float* qn = q;
  float* kn = kk;
  float* qnorm = nullptr;
  float* knorm = nullptr;
  if (normalize_qk) {
    qn = alloc(rows * dim);
    kn = alloc(rows * dim);
    qnorm = alloc(rows * n_heads);
    knorm = alloc(rows * n_heads);
    auto normalize = [&](const float* src, float* dst, float* norms) {
      for (int64_t r = 0; r < rows; ++r)
        for (int h = 0; h < n_heads; ++h) {
          const float* s = src + r * dim + h * dk;
          float* d = dst + r * dim + h * dk;
          double sq = kNormEps;
          for (int64_t i = 0; i < dk; ++i) sq += static_cast<double>(s[i]) * s[i];
          float nu = static_cast<float>(std::sqrt(sq));
          norms[r * n_heads + h] = nu;
          for (int64_t i = 0; i < dk; ++i) d[i] = s[i] / nu;
        }
    };
    normalize(q, qn, qnorm);
    normalize(kk, kn, knorm);
  }

  float* attn = alloc(static_cast<int64_t>(n_heads) * rows * rows);
  float* ctx = alloc(rows * dim);
  for (int h = 0; h < n_heads; ++h) {
    CMapS Qh(qn + h * dk, rows, dk, Stride(dim));
    CMapS Kh(kn + h * dk, rows, dk, Stride(dim));
    CMapS Vh(vv + h * dk, rows, dk, Stride(dim));
    MapM A(attn + static_cast<int64_t>(h) * rows * rows, rows, rows);
    A.noalias() = Qh * Kh.transpose();
    for (int64_t r = 0; r < rows; ++r) {
      float* arow = attn + static_cast<int64_t>(h) * rows * rows + r * rows;
      float mx = -std::numeric_limits<float>::infinity();
      for (int64_t j = 0; j < rows; ++j) {
        arow[j] *= scale;
        mx = std::max(mx, arow[j]);
      }
      double z = 0.0;
      for (int64_t j = 0; j < rows; ++j) {
        arow[j] = std::exp(arow[j] - mx);
        z += arow[j];
      }
      float iz = static_cast<float>(1.0 / z);
      for (int64_t j = 0; j < rows; ++j) arow[j] *= iz;
    }
    MapS Ch(ctx + h * dk, rows, dk, Stride(dim));
    CMapM Af(attn + static_cast<int64_t>(h) * rows * rows, rows, rows);
    Ch.noalias() = Af * Vh;
  }

  int out = make(rows * dim);
  Node& no = nodes_[static_cast<size_t>(out)];
  float* ov = const_cast<float*>(no.v);
  {
    CMapM C(ctx, rows, dim);
    CMapM Wo(p.wo->value.data(), dim, dim);
    MapM Y(ov, rows, dim);
    Y.noalias() = C * Wo.transpose();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t d = 0; d < dim; ++d) ov[r * dim + d] += p.bo->value[d];
  }

  AttnParams ps = p;
  const float* xv = nx.v;
  float* gx = nx.g;
  float* go = no.g;
  Tape* self = this;
  backs_.back() = [self, ps, xv, gx, go, q, kk, vv, qn, kn, qnorm, knorm, attn, ctx, rows, dim,
                   n_heads, dk, scale, normalize_qk] {
    CMapM dY(go, rows, dim);
    CMapM C(ctx, rows, dim);
    CMapM X(xv, rows, dim);

    MapM(ps.wo->grad.data(), dim, dim).noalias() += dY.transpose() * C;
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t d = 0; d < dim; ++d) ps.bo->grad[d] += go[r * dim + d];

    float* dctx = self->alloc(rows * dim);
    MapM(dctx, rows, dim).noalias() = dY * CMapM(ps.wo->value.data(), dim, dim);

    float* dqn = self->alloc_zero(rows * dim);
    float* dkn = self->alloc_zero(rows * dim);
    float* dv = self->alloc_zero(rows * dim);
    float* dA = self->alloc(rows * rows);
    float* dS = self->alloc(rows * rows);

    for (int h = 0; h < n_heads; ++h) {
      CMapM A(attn + static_cast<int64_t>(h) * rows * rows, rows, rows);
      CMapS dCh(dctx + h * dk, rows, dk, Stride(dim));
      CMapS Vh(vv + h * dk, rows, dk, Stride(dim));
      MapM dAm(dA, rows, rows);
      dAm.noalias() = dCh * Vh.transpose();
      MapS dVh(dv + h * dk, rows, dk, Stride(dim));
      dVh.noalias() += A.transpose() * dCh;

      for (int64_t r = 0; r < rows; ++r) {
        const float* arow = attn + static_cast<int64_t>(h) * rows * rows + r * rows;
        const float* darow = dA + r * rows;
        double dot = 0.0;
        for (int64_t j = 0; j < rows; ++j) dot += static_cast<double>(darow[j]) * arow[j];
        float* dsrow = dS + r * rows;
        for (int64_t j = 0; j < rows; ++j)
          dsrow[j] = static_cast<float>(arow[j] * (darow[j] - dot)) * scale;
      }
      CMapM dSm(dS, rows, rows);
      CMapS Qh(qn + h * dk, rows, dk, Stride(dim));
      CMapS Kh(kn + h * dk, rows, dk, Stride(dim));
      MapS dQh(dqn + h * dk, rows, dk, Stride(dim));
      MapS dKh(dkn + h * dk, rows, dk, Stride(dim));
      dQh.noalias() += dSm * Kh;
      dKh.noalias() += dSm.transpose() * Qh;
    }

    float* dq = dqn;
    float* dk_ = dkn;
    if (normalize_qk) {
      dq = self->alloc(rows * dim);
      dk_ = self->alloc(rows * dim);
      auto denorm = [&](const float* raw, const float* dhat, const float* norms, float* out_) {
        for (int64_t r = 0; r < rows; ++r)
          for (int h = 0; h < n_heads; ++h) {
            const float* rv = raw + r * dim + h * dk;
            const float* dh = dhat + r * dim + h * dk;
            float nu = norms[r * n_heads + h];
            double dot = 0.0;
            for (int64_t i = 0; i < dk; ++i) dot += static_cast<double>(rv[i]) * dh[i];
            double nu3 = static_cast<double>(nu) * nu * nu;
            float* o = out_ + r * dim + h * dk;
            for (int64_t i = 0; i < dk; ++i)
              o[i] = static_cast<float>(dh[i] / nu - rv[i] * dot / nu3);
          }
      };
      denorm(q, dqn, qnorm, dq);
      denorm(kk, dkn, knorm, dk_);
    }

    MapM(ps.wq->grad.data(), dim, dim).noalias() += CMapM(dq, rows, dim).transpose() * X;
    MapM(ps.wk->grad.data(), dim, dim).noalias() += CMapM(dk_, rows, dim).transpose() * X;
    MapM(ps.wv->grad.data(), dim, dim).noalias() += CMapM(dv, rows, dim).transpose() * X;
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t d = 0; d < dim; ++d) {
        ps.bq->grad[d] += dq[r * dim + d];
        ps.bk->grad[d] += dk_[r * dim + d];
        ps.bv->grad[d] += dv[r * dim + d];
      }
    if (gx) {
      MapM dX(gx, rows, dim);
      dX.noalias() += CMapM(dq, rows, dim) * CMapM(ps.wq->value.data(), dim, dim);
      dX.noalias() += CMapM(dk_, rows, dim) * CMapM(ps.wk->value.data(), dim, dim);
      dX.noalias() += CMapM(dv, rows, dim) * CMapM(ps.wv->value.data(), dim, dim);
    }
  };
  return out;
}

int Tape::mse(int pred, const float* target, int64_t n) {
  const Node& np = nodes_[static_cast<size_t>(pred)];
  if (np.n != n) throw ConfigError("mse: prediction/target size mismatch");
  int out = make(1);
  Node& no = nodes_[static_cast<size_t>(out)];
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double d = static_cast<double>(np.v[i]) - target[i];
    acc += d * d;
  }
  const_cast<float*>(no.v)[0] = static_cast<float>(acc / static_cast<double>(n));

  const float* pv = np.v;
  float* pg = np.g;
  float* go = no.g;
  backs_.back() = [pv, pg, go, target, n] {
    if (!pg) return;
    float s = go[0] * 2.0f / static_cast<float>(n);
    for (int64_t i = 0; i < n; ++i) pg[i] += s * (pv[i] - target[i]);
  };
  return out;
}

void Tape::backward(int node, float seed) {
  Node& n = nodes_[static_cast<size_t>(node)];
  if (!n.g) throw ConfigError("backward from a node with no gradient");
  n.g[0] += seed;
  for (int i = node; i >= 0; --i)
    if (backs_[static_cast<size_t>(i)]) backs_[static_cast<size_t>(i)]();
}

}  // namespace lamkit::nn
