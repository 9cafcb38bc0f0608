#include "lamkit/env.hpp"

#include <algorithm>
#include <cmath>

#include "lamkit/errors.hpp"
#include "lamkit/rng.hpp"

namespace lamkit {

namespace {

constexpr uint64_t kTagAgent = 0x61u;
constexpr uint64_t kTagGoal = 0x67u;
constexpr uint64_t kTagExpert = 0x65u;
constexpr uint64_t kTagShape = 0x73u;
constexpr uint64_t kTagKick = 0x6bu;

constexpr int kNumShapes = 4;
constexpr float kShapeSpeedMax = 0.06f;
constexpr float kShapeKick = 0.02f;
constexpr float kHueDriftPerPhase = 0.021f;

inline float clipf(float v, float lo, float hi) { return std::min(std::max(v, lo), hi); }

// Folds an unbounded coordinate into [0, 1] as if reflecting off the walls.
inline float reflect01(float p) {
  float t = std::fmod(p, 2.0f);
  if (t < 0.0f) t += 2.0f;
  return t <= 1.0f ? t : 2.0f - t;
}

struct Rgb {
  uint8_t r, g, b;
};

Rgb hsv_to_rgb(float h, float s, float v) {
  h = h - std::floor(h);
  float c = v * s;
  float hp = h * 6.0f;
  float x = c * (1.0f - std::fabs(std::fmod(hp, 2.0f) - 1.0f));
  float r = 0, g = 0, b = 0;
  int k = static_cast<int>(hp) % 6;
  switch (k) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  float m = v - c;
  auto q = [](float f) { return static_cast<uint8_t>(std::floor(f * 255.0f + 0.5f)); };
  return {q(r + m), q(g + m), q(b + m)};
}

void blend_px(uint8_t* p, Rgb color, float alpha) {
  p[0] = static_cast<uint8_t>(std::floor(p[0] + (color.r - p[0]) * alpha + 0.5f));
  p[1] = static_cast<uint8_t>(std::floor(p[1] + (color.g - p[1]) * alpha + 0.5f));
  p[2] = static_cast<uint8_t>(std::floor(p[2] + (color.b - p[2]) * alpha + 0.5f));
}

// Shapes are drawn with a wide soft edge so subpixel motion shows up as
// smooth intensity changes instead of whole-pixel jumps.
void fill_disk(uint8_t* img, int size, float cx, float cy, float radius, Rgb color) {
  float w = 2.5f / static_cast<float>(size);
  int x0 = std::max(0, static_cast<int>(std::floor((cx - radius - w) * size)));
  int x1 = std::min(size - 1, static_cast<int>(std::ceil((cx + radius + w) * size)));
  int y0 = std::max(0, static_cast<int>(std::floor((cy - radius - w) * size)));
  int y1 = std::min(size - 1, static_cast<int>(std::ceil((cy + radius + w) * size)));
  for (int y = y0; y <= y1; ++y) {
    float py = (y + 0.5f) / size;
    for (int x = x0; x <= x1; ++x) {
      float px = (x + 0.5f) / size;
      float dx = px - cx, dy = py - cy;
      float d = std::sqrt(dx * dx + dy * dy);
      float a = std::clamp((radius - d) / w + 0.5f, 0.0f, 1.0f);
      if (a > 0.0f) blend_px(img + 3 * (y * size + x), color, a);
    }
  }
}

void fill_square(uint8_t* img, int size, float cx, float cy, float half, Rgb color) {
  float w = 2.5f / static_cast<float>(size);
  int x0 = std::max(0, static_cast<int>(std::floor((cx - half - w) * size)));
  int x1 = std::min(size - 1, static_cast<int>(std::ceil((cx + half + w) * size)));
  int y0 = std::max(0, static_cast<int>(std::floor((cy - half - w) * size)));
  int y1 = std::min(size - 1, static_cast<int>(std::ceil((cy + half + w) * size)));
  for (int y = y0; y <= y1; ++y) {
    float py = (y + 0.5f) / size;
    for (int x = x0; x <= x1; ++x) {
      float px = (x + 0.5f) / size;
      float ax = std::clamp((half - std::fabs(px - cx)) / w + 0.5f, 0.0f, 1.0f);
      float ay = std::clamp((half - std::fabs(py - cy)) / w + 0.5f, 0.0f, 1.0f);
      float a = ax * ay;
      if (a > 0.0f) blend_px(img + 3 * (y * size + x), color, a);
    }
  }
}

struct Shape {
  float x, y, radius, base_hue;
  bool square;
};

// Shape state is simulated forward from phase 0, so it is a pure function of
// (episode_seed, phase): renders of the same phase agree bit for bit no
// matter what trajectory of steps produced it.
Shape shape_at(uint64_t episode_seed, int phase, int k) {
  Rng init({episode_seed, kTagShape, static_cast<uint64_t>(k)});
  Shape s;
  s.x = init.uniform(0.0f, 1.0f);
  s.y = init.uniform(0.0f, 1.0f);
  float vx = init.uniform(-0.04f, 0.04f);
  float vy = init.uniform(-0.04f, 0.04f);
  s.radius = init.uniform(0.14f, 0.22f);
  s.base_hue = init.uniform(0.0f, 1.0f);
  s.square = (k % 2) == 1;
  for (int p = 1; p <= phase; ++p) {
    Rng kick({episode_seed, kTagKick, static_cast<uint64_t>(p), static_cast<uint64_t>(k)});
    vx = clipf(vx + kick.uniform(-kShapeKick, kShapeKick), -kShapeSpeedMax, kShapeSpeedMax);
    vy = clipf(vy + kick.uniform(-kShapeKick, kShapeKick), -kShapeSpeedMax, kShapeSpeedMax);
    s.x += vx;
    s.y += vy;
  }
  s.x = reflect01(s.x);
  s.y = reflect01(s.y);
  return s;
}

constexpr float kGoalRadiusFrac = 0.09f;
constexpr float kAgentRadiusFrac = 0.13f;
constexpr Rgb kGoalColor{40, 200, 70};
constexpr Rgb kAgentColor{235, 30, 30};
constexpr Rgb kCleanBackdrop{110, 110, 110};

}  // namespace

EnvState env_reset(uint64_t episode_seed, int goal_attempt) {
  EnvState s;
  s.episode_seed = episode_seed;
  Rng agent({episode_seed, kTagAgent});
  s.agent_pos = {agent.uniform(0.0f, 1.0f), agent.uniform(0.0f, 1.0f)};
  Rng goal({episode_seed, kTagGoal, static_cast<uint64_t>(goal_attempt)});
  s.goal_pos = {goal.uniform(0.0f, 1.0f), goal.uniform(0.0f, 1.0f)};
  return s;
}

EnvState env_step(const EnvState& s, std::span<const float, 2> action, const EnvConfig& cfg) {
  if (!std::isfinite(action[0]) || !std::isfinite(action[1]))
    throw InvalidActionError("non-finite action");
  EnvState n = s;
  for (int i = 0; i < 2; ++i) {
    float a = clipf(action[i], -cfg.action_max, cfg.action_max);
    n.agent_pos[i] = clipf(s.agent_pos[i] + a, 0.0f, 1.0f);
  }
  n.step_idx = s.step_idx + 1;
  int inc = 1;
  if (cfg.couple_distractors_to_actions) {
    float mag = std::max(std::fabs(clipf(action[0], -cfg.action_max, cfg.action_max)),
                         std::fabs(clipf(action[1], -cfg.action_max, cfg.action_max)));
    inc += static_cast<int>(std::floor(4.0f * mag / cfg.action_max));
  }
  n.distractor_phase = s.distractor_phase + inc;
  return n;
}

std::array<float, 2> scripted_expert(const EnvState& s, float noise_scale, const EnvConfig& cfg) {
  Rng noise({s.episode_seed, kTagExpert, static_cast<uint64_t>(s.step_idx)});
  // The goal-seeking component leaves headroom for the exploration noise, so
  // the noise survives the action bound instead of being clipped away
  // whenever the agent is far from the goal.
  float cap = std::max(cfg.action_max - noise_scale, 0.0f);
  std::array<float, 2> a;
  for (int i = 0; i < 2; ++i) {
    float base = clipf(s.goal_pos[i] - s.agent_pos[i], -cap, cap);
    float n = noise_scale > 0.0f ? noise.uniform(-noise_scale, noise_scale) : 0.0f;
    a[i] = clipf(base + n, -cfg.action_max, cfg.action_max);
  }
  return a;
}

bool goal_reached(const EnvState& s, const EnvConfig& cfg) {
  float dx = s.agent_pos[0] - s.goal_pos[0];
  float dy = s.agent_pos[1] - s.goal_pos[1];
  return dx * dx + dy * dy <= cfg.goal_radius * cfg.goal_radius;
}

void render(const EnvState& s, bool with_distractors, const EnvConfig& cfg, uint8_t* out) {
  int size = cfg.frame_size;
  if (with_distractors) {
    float drift = kHueDriftPerPhase * static_cast<float>(s.distractor_phase);
    Rng bg({s.episode_seed, kTagShape, 0xffu});
    float backdrop_hue = bg.uniform(0.0f, 1.0f) + drift;
    Rgb backdrop = hsv_to_rgb(backdrop_hue, 0.30f, 0.45f);
    for (int i = 0; i < size * size; ++i) {
      uint8_t* p = out + 3 * i;
      p[0] = backdrop.r;
      p[1] = backdrop.g;
      p[2] = backdrop.b;
    }
    for (int k = 0; k < kNumShapes; ++k) {
      Shape sh = shape_at(s.episode_seed, s.distractor_phase, k);
      Rgb c = hsv_to_rgb(sh.base_hue + drift, 0.75f, 0.85f);
      if (sh.square)
        fill_square(out, size, sh.x, sh.y, sh.radius * 0.9f, c);
      else
        fill_disk(out, size, sh.x, sh.y, sh.radius, c);
    }
  } else {
    for (int i = 0; i < size * size; ++i) {
      uint8_t* p = out + 3 * i;
      p[0] = kCleanBackdrop.r;
      p[1] = kCleanBackdrop.g;
      p[2] = kCleanBackdrop.b;
    }
  }
  fill_disk(out, size, s.goal_pos[0], s.goal_pos[1], kGoalRadiusFrac, kGoalColor);
  fill_disk(out, size, s.agent_pos[0], s.agent_pos[1], kAgentRadiusFrac, kAgentColor);
}

NdArray render_array(const EnvState& s, bool with_distractors, const EnvConfig& cfg) {
  NdArray a = make_array(Dtype::u8, {cfg.frame_size, cfg.frame_size, 3});
  render(s, with_distractors, cfg, a.u8().data());
  return a;
}

// Marks only pixels fully inside the goal or agent shape. Soft-edge pixels
// blend with whatever sits underneath, so they are excluded.
void foreground_mask(const EnvState& s, const EnvConfig& cfg, uint8_t* out) {
  int size = cfg.frame_size;
  std::fill(out, out + size * size, uint8_t{0});
  auto mark = [&](float cx, float cy, float outer) {
    float radius = outer - 1.25f / static_cast<float>(size);
    if (radius <= 0.0f) return;
    int x0 = std::max(0, static_cast<int>(std::floor((cx - radius) * size)));
    int x1 = std::min(size - 1, static_cast<int>(std::ceil((cx + radius) * size)));
    int y0 = std::max(0, static_cast<int>(std::floor((cy - radius) * size)));
    int y1 = std::min(size - 1, static_cast<int>(std::ceil((cy + radius) * size)));
    float r2 = radius * radius;
    for (int y = y0; y <= y1; ++y) {
      float py = (y + 0.5f) / size;
      for (int x = x0; x <= x1; ++x) {
        float px = (x + 0.5f) / size;
        float dx = px - cx, dy = py - cy;
        if (dx * dx + dy * dy <= r2) out[y * size + x] = 1;
      }
    }
  };
  mark(s.goal_pos[0], s.goal_pos[1], kGoalRadiusFrac);
  mark(s.agent_pos[0], s.agent_pos[1], kAgentRadiusFrac);
}

}  // namespace lamkit
