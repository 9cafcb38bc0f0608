#pragma once

#include <array>
#include <cstdint>
#include <span>

#include "lamkit/array.hpp"

namespace lamkit {

// Synthetic 2D reaching environment. A point agent moves in the unit square
// toward a fixed goal under per-axis action clipping. Observations are
// rendered frames; an animated background of bouncing shapes plus a global
// hue drift can be enabled as a distractor layer. The same simulator state
// can be rendered with or without that layer, which is what makes clean twin
// targets possible.

struct EnvConfig {
  int frame_size = 64;          // square frames, 3 channels
  float action_max = 0.1f;      // per-axis clip
  float goal_radius = 0.05f;    // success distance
  int horizon = 64;
  bool distractors = true;
  // Stress mode: background phase advances faster for larger actions, which
  // correlates background motion with the policy.
  bool couple_distractors_to_actions = false;
};

struct EnvState {
  std::array<float, 2> agent_pos{0.5f, 0.5f};
  std::array<float, 2> goal_pos{0.5f, 0.5f};
  int step_idx = 0;
  int distractor_phase = 0;
  uint64_t episode_seed = 0;
};

// Samples agent and goal positions from the seed. goal_attempt selects an
// alternative goal draw for the same episode (used when a sampled goal is
// not reachable within the horizon).
EnvState env_reset(uint64_t episode_seed, int goal_attempt = 0);

// Applies a clipped action, advances step and background phase. Throws
// InvalidActionError on non-finite input.
EnvState env_step(const EnvState& s, std::span<const float, 2> action, const EnvConfig& cfg);

// Proportional controller toward the goal plus uniform noise in
// [-noise_scale, +noise_scale], re-clipped to the action bound. Noise is a
// pure function of (episode_seed, step_idx).
std::array<float, 2> scripted_expert(const EnvState& s, float noise_scale, const EnvConfig& cfg);

bool goal_reached(const EnvState& s, const EnvConfig& cfg);

// Rasterizes HxWx3 uint8 pixels into out. Bit-deterministic; the foreground
// (goal marker, agent dot) is drawn identically for both values of
// with_distractors, and distractor-free renders do not depend on
// episode_seed or distractor_phase.
void render(const EnvState& s, bool with_distractors, const EnvConfig& cfg, uint8_t* out);

NdArray render_array(const EnvState& s, bool with_distractors, const EnvConfig& cfg);

// 1 where a foreground primitive covers the pixel, else 0. HxW bytes.
void foreground_mask(const EnvState& s, const EnvConfig& cfg, uint8_t* out);

}  // namespace lamkit
