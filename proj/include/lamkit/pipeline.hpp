#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "lamkit/dataset.hpp"
#include "lamkit/lam.hpp"

namespace lamkit {

// Stages downstream of the latent action model: relabel observations with
// latents, clone them into an actor, ground the latent space with a small
// decoder trained on labeled trajectories, then roll the composed policy out
// in the simulator.

// Latents for every transition, [N, T, latent], from the checkpointed
// inverse model.
NdArray label_latents(const TrajectoryDataset& ds, LamCheckpoint& ckpt);

struct BcConfig {
  int frame_stack = 4;
  int encoder_scale = 1;
  int encoder_res_blocks = 1;
  std::vector<int> encoder_channels = {16, 16, 32, 32, 128, 128, 256};
  int num_epochs = 10;
  int batch_size = 64;
  double learning_rate = 1e-4;
  double weight_decay = 0.0;
  double warmup_epochs = 0.0;
  std::optional<double> grad_norm;
  uint64_t seed = 0;
};

// Frame-stack conv actor predicting the latent action for the current
// stack. Trained on (frames, latent) pairs only; ground-truth actions never
// enter this stage.
class BcModel {
 public:
  BcModel(const BcConfig& cfg, int frame_size, int latent_dim, uint64_t init_seed);

  int forward(nn::Tape& t, const float* stack_chw);
  void predict(const float* stack_chw, float* z_out);

  nn::ParamStore& params() { return params_; }
  const BcConfig& config() const { return cfg_; }
  int frame_size() const { return frame_size_; }
  int latent_dim() const { return latent_dim_; }
  int64_t stack_numel() const;

 private:
  BcConfig cfg_;
  int frame_size_;
  int latent_dim_;
  nn::ParamStore params_;
  std::unique_ptr<nn::ConvEncoder> enc_;
  nn::Param* head_w_ = nullptr;
  nn::Param* head_b_ = nullptr;
  nn::Tape predict_tape_;
};

struct BcCheckpoint {
  BcConfig config;
  int frame_size = 0;
  int latent_dim = 0;
  int64_t steps = 0;
  std::unique_ptr<BcModel> model;
};

struct BcTrainResult {
  double final_train_loss = 0.0;
  int64_t steps = 0;
};

BcTrainResult train_bc(const TrajectoryDataset& ds, const NdArray& latents, const BcConfig& cfg,
                       const std::filesystem::path& out_dir);
void save_bc_checkpoint(BcModel& model, int64_t steps, const std::filesystem::path& dir);
BcCheckpoint load_bc_checkpoint(const std::filesystem::path& dir);

enum class LatentSource { idm, actor };
const char* latent_source_name(LatentSource s);
LatentSource parse_latent_source(const std::string& s);

struct DecoderConfig {
  int hidden_dim = 128;
  int num_updates = 100000;
  int batch_size = 64;
  double learning_rate = 1e-3;
  int num_labeled = 16;  // trajectories with action labels
  LatentSource latent_source = LatentSource::idm;
  uint64_t seed = 0;
};

// Small MLP grounding latents in environment actions: two ReLU hidden
// layers, linear output. Outputs are unbounded here; the deployed policy
// clips to the action range.
class MlpDecoder {
 public:
  MlpDecoder(int latent_dim, int hidden_dim, int action_dim, uint64_t init_seed);

  int forward(nn::Tape& t, const float* z);
  void predict(const float* z, float* action);

  nn::ParamStore& params() { return params_; }
  int latent_dim() const { return latent_dim_; }
  int hidden_dim() const { return hidden_dim_; }
  int action_dim() const { return action_dim_; }

 private:
  int latent_dim_, hidden_dim_, action_dim_;
  nn::ParamStore params_;
  nn::Param *w1_, *b1_, *w2_, *b2_, *w3_, *b3_;
  nn::Tape predict_tape_;
};

struct DecoderCheckpoint {
  DecoderConfig config;
  int latent_dim = 0;
  int action_dim = 0;
  int64_t steps = 0;
  std::unique_ptr<MlpDecoder> model;
};

struct DecoderTrainResult {
  double final_train_loss = 0.0;
  int64_t steps = 0;
};

// labeled must carry actions; only its first num_labeled trajectories are
// used. actor is consulted only for latent_source = actor.
DecoderTrainResult train_decoder(const TrajectoryDataset& labeled, LamCheckpoint& lam,
                                 BcCheckpoint* actor, const DecoderConfig& cfg,
                                 const std::filesystem::path& out_dir);
void save_decoder_checkpoint(MlpDecoder& model, const DecoderConfig& cfg, int64_t steps,
                             const std::filesystem::path& dir);
DecoderCheckpoint load_decoder_checkpoint(const std::filesystem::path& dir);

// Closed-loop policies. reset is called once per episode with the episode
// seed; act sees the rendered frame plus, for privileged baselines, the
// simulator state.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual void reset(uint64_t episode_seed) = 0;
  virtual void act(const uint8_t* frame, const EnvState& state, const EnvConfig& cfg,
                   float* action) = 0;
  virtual bool needs_frames() const { return true; }
};

std::unique_ptr<Policy> make_learned_policy(BcCheckpoint bc, DecoderCheckpoint dec);
std::unique_ptr<Policy> make_expert_policy(float noise_scale);
std::unique_ptr<Policy> make_random_policy(uint64_t seed);

struct EvalConfig {
  int num_episodes = 50;
  uint64_t seed = 0;
};

struct EpisodeResult {
  int64_t episode = 0;
  uint64_t env_seed = 0;
  bool success = false;
  int64_t steps_taken = 0;
  double final_dist = 0.0;
};

struct EvalResult {
  std::vector<EpisodeResult> episodes;
  double success_rate = 0.0;
};

// Rolls the policy out for num_episodes fresh episodes of the environment
// described by env. An episode succeeds when the agent is within the goal
// radius at any visited state, the initial one included.
EvalResult evaluate_policy(Policy& pi, const GenConfig& env, const EvalConfig& cfg);

}  // namespace lamkit
