#pragma once

#include <string>
#include <vector>

#include "lamkit/nn/tape.hpp"

namespace lamkit::nn {

// Stacked conv blocks: 3x3 conv, 3x3/2 average pool, then residual pairs, as
// in scaled-up conv encoders for pixel control. The flat output appends
// per-channel softargmax coordinates from every stage so precise positions
// survive the pooling pyramid in a linearly accessible form; the early
// high-resolution stages carry most of the precision.
class ConvEncoder {
 public:
  ConvEncoder(ParamStore& ps, const std::string& prefix, int in_channels, int input_size,
              std::vector<int> channels, int res_blocks, Rng& init);

  struct Result {
    int flat = -1;    // final stage flattened, with coordinate readouts appended
    int coords = -1;  // the coordinate readouts alone, all stages concatenated
    std::vector<int> stages;
  };
  Result forward(Tape& t, int x) const;

  int64_t flat_dim() const;
  int64_t map_dim() const;    // final stage alone, channels * size * size
  int64_t coord_dim() const;  // two coordinates per channel per stage
  const std::vector<int>& stage_channels() const { return channels_; }
  const std::vector<int>& stage_sizes() const { return sizes_; }
  int input_size() const { return input_size_; }
  int in_channels() const { return in_channels_; }

 private:
  struct ResPair {
    Param *w1, *b1, *w2, *b2;
  };
  struct Block {
    Param *w, *b;
    std::vector<ResPair> res;
  };
  int in_channels_;
  int input_size_;
  std::vector<int> channels_;
  std::vector<int> sizes_;  // spatial size after each block's pool
  std::vector<Block> blocks_;
};

// Upsampling decoder mirroring a ConvEncoder. The encoder features and the
// conditioning vector enter together through the bottleneck projection, so
// the whole rendering is conditioned on both.
class ImageDecoder {
 public:
  ImageDecoder(ParamStore& ps, const std::string& prefix, const ConvEncoder& enc,
               int64_t cond_dim, Rng& init);

  // cond is the conditioning node (latent action, possibly with extras
  // concatenated). Returns a [3, S, S] node at the encoder's input size.
  int forward(Tape& t, const ConvEncoder::Result& enc_out, int cond) const;

 private:
  const ConvEncoder& enc_;
  Param *neck_w_, *neck_b_;
  struct Up {
    Param *w, *b;
  };
  std::vector<Up> ups_;
  Param *head_w_, *head_b_;
  int64_t cond_dim_;
};

// Pre-norm residual MLP tower for vector-valued predictions.
class MlpStack {
 public:
  MlpStack(ParamStore& ps, const std::string& prefix, int64_t in_dim, int hidden, int layers,
           int expand, int64_t out_dim, Rng& init);

  int forward(Tape& t, int x) const;  // x is [in_dim]

 private:
  struct Layer {
    Param *ln_g, *ln_b, *w1, *b1, *w2, *b2;
  };
  Param *in_w_, *in_b_;
  std::vector<Layer> layers_;
  Param *fin_g_, *fin_b_, *out_w_, *out_b_;
  int64_t in_dim_, out_dim_;
  int hidden_, expand_;
};

// Patch transformer over token sequences, mean-pooled into one vector.
class TransformerEncoder {
 public:
  TransformerEncoder(ParamStore& ps, const std::string& prefix, int n_tokens, int64_t token_dim,
                     int hidden, int layers, int heads, bool pre_norm, bool normalize_qk,
                     int64_t extra_dim, int64_t out_dim, Rng& init);

  // tokens is [n_tokens, token_dim]; extra (such as an instruction vector)
  // becomes one additional projected token when extra_dim > 0.
  int forward(Tape& t, int tokens, int extra = -1) const;

  int n_tokens() const { return n_tokens_; }

 private:
  struct Block {
    Param *ln1_g, *ln1_b, *ln2_g, *ln2_b;
    Tape::AttnParams attn;
    Param *mlp_w1, *mlp_b1, *mlp_w2, *mlp_b2;
  };
  int n_tokens_;
  int64_t token_dim_, extra_dim_, out_dim_;
  int hidden_, heads_;
  bool pre_norm_, normalize_qk_;
  Param *proj_w_, *proj_b_;
  Param *extra_w_, *extra_b_;
  Param *pos_;
  std::vector<Block> blocks_;
  Param *fin_g_, *fin_b_, *out_w_, *out_b_;
};

// Rearranges a CHW frame into patch tokens, each patch row-major across
// channels: token dim = patch * patch * C.
void patchify_chw(const float* chw, int channels, int size, int patch, float* tokens);

}  // namespace lamkit::nn
