#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "lamkit/dataset.hpp"
#include "lamkit/nn/modules.hpp"
#include "lamkit/targets.hpp"

namespace lamkit {

// Latent action model: an inverse model embeds each transition
// (o_{t-k+1..t}, o_{t+1}) into a continuous latent action, and a forward
// model must reproduce a target for the transition from (o_t, z_t) alone,
// so the latent bottleneck is the only path information about o_{t+1} can
// take. There is no quantization anywhere. Frame stacking exists only on
// the inverse-model side.

enum class Backbone { conv_residual, patch_transformer };

const char* backbone_name(Backbone b);
Backbone parse_backbone(const std::string& s);

struct LamConfig {
  int latent_action_dim = 128;
  int frame_stack = 4;
  Backbone backbone = Backbone::conv_residual;

  int idm_encoder_scale = 5;
  int idm_encoder_res_blocks = 1;
  std::vector<int> idm_encoder_channels = {16, 16, 32, 32, 128, 128, 256};

  int patch_size = 32;
  int idm_hidden_dim = 896;
  int idm_num_layers = 4;
  int idm_num_heads = 16;
  bool normalize_qk = false;
  bool pre_norm = true;
  bool fdm_use_cross_attn = false;  // accepted in config form, rejected at build

  int fdm_encoder_scale = 1;
  int fdm_encoder_res_blocks = 1;
  std::vector<int> fdm_encoder_channels = {16, 16, 32, 32, 128, 128, 256};

  int fdm_hidden_dim = 1024;
  int fdm_num_layers = 4;
  int fdm_expand = 4;

  int num_epochs = 10;
  int batch_size = 64;
  double learning_rate = 1e-4;
  double weight_decay = 0.0;
  double warmup_epochs = 1.0;
  std::optional<double> grad_norm;  // global L2 clip when set
  double probe_learning_rate = 3e-4;
  double holdout_fraction = 0.05;
  int probe_eval_every = 100;
  uint64_t seed = 0;
};

// The assembled networks for one (config, dataset geometry, target) triple.
// Probe parameters live under the "probe/" prefix and are excluded from the
// model optimizer; the trainer never lets gradients flow from the probe into
// the latent.
class LamModel {
 public:
  LamModel(const LamConfig& cfg, int frame_size, int action_dim, bool image_target,
           std::vector<int64_t> target_shape, int64_t instr_dim, uint64_t init_seed);

  // stack_chw holds frame_stack+1 normalized CHW frames, oldest first, the
  // transition's next frame last. instr may be null when the model is
  // unconditioned. Returns the latent node.
  int idm(nn::Tape& t, const float* stack_chw, const float* instr);
  // cur_chw is the current frame only.
  int fdm(nn::Tape& t, const float* cur_chw, int z, const float* instr);

  // Latent for one transition without building gradients for reuse: runs
  // idm on a private tape and copies the latent out.
  void encode(const float* stack_chw, const float* instr, float* z_out);

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const LamConfig& config() const { return cfg_; }
  int frame_size() const { return frame_size_; }
  int action_dim() const { return action_dim_; }
  int64_t instr_dim() const { return instr_dim_; }
  bool image_target() const { return image_target_; }
  const std::vector<int64_t>& target_shape() const { return target_shape_; }
  int64_t target_dim() const;
  int64_t stack_numel() const;

  nn::Param& probe_w() { return params_.at("probe/w"); }
  nn::Param& probe_b() { return params_.at("probe/b"); }

  // Null for the patch_transformer backbone.
  const nn::ConvEncoder* idm_encoder() const { return idm_enc_.get(); }

 private:
  LamConfig cfg_;
  int frame_size_;
  int action_dim_;
  bool image_target_;
  std::vector<int64_t> target_shape_;
  int64_t instr_dim_;

  nn::ParamStore params_;
  std::unique_ptr<nn::ConvEncoder> idm_enc_;
  nn::Param* idm_head_w_ = nullptr;
  nn::Param* idm_head_b_ = nullptr;
  std::unique_ptr<nn::TransformerEncoder> idm_trans_;
  std::unique_ptr<nn::ConvEncoder> fdm_enc_;
  std::unique_ptr<nn::ImageDecoder> fdm_dec_;
  std::unique_ptr<nn::MlpStack> fdm_mlp_;
  std::vector<float> patch_scratch_;
  nn::Tape encode_tape_;
};

struct ProbePoint {
  int64_t step;
  double probe_mse;
  double train_loss;
};

struct ProbeReport {
  std::vector<ProbePoint> points;
  double final_probe_mse = 0.0;  // mean of the last three evaluations
  int64_t holdout_count = 0;
};

struct TrainLamResult {
  ProbeReport probe;
  double final_train_loss = 0.0;
  int64_t steps = 0;
};

// Trains the latent action model on every transition of the dataset and
// writes a checkpoint into out_dir. The linear probe is trained alongside on
// detached latents and evaluated on a held-out transition split every
// probe_eval_every optimizer steps plus once at the end. Instruction-
// conditioned targets run unconditioned (zero vector) for the first half of
// the epochs and conditioned for the second half. On a non-finite loss a
// diagnostic checkpoint is written to out_dir/diagnostic and
// DivergenceError is thrown.
TrainLamResult train_lam(const TrajectoryDataset& ds, const LamConfig& cfg,
                         TargetProvider& target, const std::filesystem::path& out_dir);

struct LamCheckpoint {
  LamConfig config;
  int frame_size = 0;
  int action_dim = 0;
  TargetKind target_kind = TargetKind::pixel;
  std::vector<int64_t> target_shape;
  int64_t instr_dim = 0;
  std::vector<float> instruction;         // conditioning vector, when any
  std::vector<float> target_mean, target_std;  // vector targets only
  int64_t steps = 0;
  double final_probe_mse = 0.0;
  std::unique_ptr<LamModel> model;
};

void save_lam_checkpoint(LamModel& model, TargetKind kind, std::span<const float> instruction,
                         std::span<const float> target_mean, std::span<const float> target_std,
                         int64_t steps, double final_probe_mse,
                         const std::filesystem::path& dir);
LamCheckpoint load_lam_checkpoint(const std::filesystem::path& dir);

// Transition split helpers shared by the trainer, the probe tools and the
// baseline: a transition is held out when its seed-keyed hash falls below
// holdout_fraction. Both lists are in (trajectory, t) order.
struct TransitionSplit {
  std::vector<std::pair<int64_t, int64_t>> train, holdout;
};
TransitionSplit split_transitions(const TrajectoryDataset& ds, double holdout_fraction,
                                  uint64_t seed);

// Fills the model input buffer for transition (n, t): frame_stack frames
// ending at t (clamped at episode start), then frame t+1.
void fill_stack(const TrajectoryDataset& ds, int64_t n, int64_t t, int frame_stack,
                float* stack_chw);

// Probe MSE of a checkpointed model over given transitions.
double probe_eval(LamCheckpoint& ckpt, const TrajectoryDataset& ds,
                  const std::vector<std::pair<int64_t, int64_t>>& transitions);

// Retrains only the probe on a loaded checkpoint; every other parameter is
// untouched. Returns the refit holdout MSE.
double probe_refit(LamCheckpoint& ckpt, const TrajectoryDataset& ds, int updates,
                   uint64_t seed);

// Quality floor: latents from a freshly initialized inverse model, probed
// with an exact least-squares fit on the training split and scored on the
// holdout split.
double random_probe_baseline(const TrajectoryDataset& ds, const LamConfig& cfg,
                             uint64_t init_seed);

}  // namespace lamkit
