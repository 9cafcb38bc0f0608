#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "lamkit/nn/params.hpp"

namespace lamkit::nn {

// Single-sample reverse-mode tape. Ops evaluate eagerly into an arena and
// record a closure that scatters gradients back to their operands; leaves
// backed by a Param accumulate straight into Param::grad, so running several
// samples between optimizer steps sums their gradients.
//
// Buffers are flat; image ops take explicit CHW dims and sequence ops take
// explicit (rows, cols). The tape is reset per sample and reuses its arena.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void reset();

  // Leaves. constant() keeps the pointer; the caller owns the memory until
  // backward() finishes.
  int constant(const float* data, int64_t n);
  int param(Param& p);

  // Elementwise and structural.
  int add(int a, int b);
  int relu(int x);
  int gelu(int x);  // tanh approximation
  int concat(std::initializer_list<int> xs);
  int mean_rows(int x, int64_t rows, int64_t cols);  // -> [cols]

  // x as [rows, in], W as [out, in], optional bias [out] -> [rows, out].
  int linear(int x, Param& w, Param* b, int64_t rows, int64_t in_dim, int64_t out_dim);

  // CHW image ops.
  int conv3x3(int x, Param& w, Param& b, int c_in, int h, int wd, int c_out);  // s1 p1
  int maxpool3x3s2(int x, int c, int h, int wd);                               // pad 1
  int avgpool3x3s2(int x, int c, int h, int wd);                               // pad 1
  int upsample2x(int x, int c, int h, int wd);
  // Per-channel softmax-weighted coordinate expectation -> [c, 2] as (x, y)
  // in [-1, 1]. beta scales the per-channel standardized logits.
  int softargmax2d(int x, int c, int h, int wd, float beta);
  // Broadcasts a vector [dim] to [dim, h, wd], one constant plane per entry.
  int tile2d(int v, int dim, int h, int wd);

  // Row-wise layer norm over cols with affine params.
  int layernorm(int x, Param& gamma, Param& beta, int64_t rows, int64_t cols);

  struct AttnParams {
    Param *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  };
  // Fused multi-head self-attention on [rows, dim].
  int attention(int x, const AttnParams& p, int64_t rows, int64_t dim, int n_heads,
                bool normalize_qk);

  // Mean squared error against an external target; returns a scalar node.
  // Accumulates in double. The target pointer must stay valid through
  // backward().
  int mse(int pred, const float* target, int64_t n);

  // Seeds node's grad with seed and runs recorded closures in reverse.
  void backward(int node, float seed);

  const float* val(int node) const { return nodes_[static_cast<size_t>(node)].v; }
  float* grad(int node) { return nodes_[static_cast<size_t>(node)].g; }
  int64_t numel(int node) const { return nodes_[static_cast<size_t>(node)].n; }

 private:
  struct Node {
    const float* v;
    float* g;  // null when no gradient flows here
    int64_t n;
  };

  float* alloc(int64_t n);
  float* alloc_zero(int64_t n);
  int32_t* alloc_i32(int64_t n);
  int push(const float* v, float* g, int64_t n);
  int make(int64_t n);  // value+grad from arena

  std::deque<Node> nodes_;
  std::vector<std::function<void()>> backs_;
  std::vector<std::vector<float>> chunks_;
  size_t chunk_pos_ = 0;
  size_t chunk_idx_ = 0;
  std::vector<std::vector<int32_t>> ichunks_;
  size_t ichunk_pos_ = 0;
  size_t ichunk_idx_ = 0;
};

}  // namespace lamkit::nn
