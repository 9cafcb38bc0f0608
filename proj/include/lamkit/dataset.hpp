#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "lamkit/array.hpp"
#include "lamkit/env.hpp"

namespace lamkit {

// Trajectory storage. A dataset is a directory:
//
//   manifest.txt   key-value description (see dataset.cpp)
//   frames.arr     [N, T+1, S, S, 3] uint8
//   actions.arr    [N, T, 2] float32
//   twins.arr      [N, T+1, S, S, 3] uint8, only when twins were saved
//   states.arr     [N, T+1, 4] float32 (agent_xy, goal_xy), synthetic only
//   seeds.arr      [N] uint64 episode seeds
//
// Twins are renders of the same simulator states with the distractor layer
// disabled, aligned frame for frame with frames.arr. Imported datasets have
// no states.arr, which is what rules out state-based targets on them.

struct GenConfig {
  int num_trajectories = 512;
  int horizon = 64;
  int frame_size = 64;
  bool distractors = true;
  bool twins = false;
  bool couple_distractors = false;
  float noise_scale = 0.02f;
  float action_max = 0.1f;
  float goal_radius = 0.05f;
  uint64_t seed = 0;
  std::string task_text = "reach the green marker";
};

struct TrajectoryDataset {
  Manifest manifest;
  NdArray frames;
  NdArray actions;
  std::optional<NdArray> twins;
  std::optional<NdArray> states;
  NdArray episode_seeds;

  int64_t num_trajectories() const { return frames.dims[0]; }
  int64_t horizon() const { return actions.dims[1]; }
  int64_t frame_size() const { return frames.dims[2]; }
  int64_t action_dim() const { return actions.dims[2]; }
  int64_t frame_numel() const { return frames.dims[2] * frames.dims[3] * frames.dims[4]; }
  bool has_twins() const { return twins.has_value(); }
  bool imported() const { return manifest.get_or("source", "synthetic") == "imported"; }

  const uint8_t* frame(int64_t n, int64_t t) const {
    return frames.u8().data() + (n * (horizon() + 1) + t) * frame_numel();
  }
  const uint8_t* twin(int64_t n, int64_t t) const {
    return twins->u8().data() + (n * (horizon() + 1) + t) * frame_numel();
  }
  const float* action(int64_t n, int64_t t) const {
    return actions.f32().data() + (n * horizon() + t) * action_dim();
  }
  // (agent_x, agent_y, goal_x, goal_y) at frame t.
  const float* state(int64_t n, int64_t t) const {
    return states->f32().data() + (n * (horizon() + 1) + t) * 4;
  }

  EnvConfig env_config() const;
};

// Rolls out the scripted expert. Every stored trajectory reaches the goal;
// when a sampled goal is not reached within the horizon the goal (and only
// the goal) is resampled deterministically. Throws ConfigError when
// action_max * horizon cannot cover the unit square diagonal.
TrajectoryDataset generate_dataset(const GenConfig& cfg);

GenConfig gen_config_from_manifest(const Manifest& m);

void write_dataset(const TrajectoryDataset& ds, const std::filesystem::path& dir);
TrajectoryDataset read_dataset(const std::filesystem::path& dir);

// Wraps externally produced arrays in the native layout. Episode seeds are
// zeroed and the manifest marks the data as imported, which disables
// anything that needs the underlying simulator state.
TrajectoryDataset import_dataset(const std::filesystem::path& frames_path,
                                 const std::filesystem::path& actions_path,
                                 const std::optional<std::filesystem::path>& twins_path,
                                 const std::string& env_id, const std::string& task_text);

}  // namespace lamkit
