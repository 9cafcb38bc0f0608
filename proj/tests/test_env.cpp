#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "lamkit/env.hpp"
#include "lamkit/errors.hpp"

using namespace lamkit;

namespace {

EnvState state_at(std::array<float, 2> agent, std::array<float, 2> goal, uint64_t seed = 11,
                  int phase = 0) {
  EnvState s;
  s.agent_pos = agent;
  s.goal_pos = goal;
  s.episode_seed = seed;
  s.distractor_phase = phase;
  return s;
}

std::vector<uint8_t> frame_of(const EnvState& s, bool dist, const EnvConfig& cfg) {
  std::vector<uint8_t> f(static_cast<size_t>(cfg.frame_size) * cfg.frame_size * 3);
  render(s, dist, cfg, f.data());
  return f;
}

std::vector<uint8_t> mask_of(const EnvState& s, const EnvConfig& cfg) {
  std::vector<uint8_t> m(static_cast<size_t>(cfg.frame_size) * cfg.frame_size);
  foreground_mask(s, cfg, m.data());
  return m;
}

}  // namespace

TEST_CASE("env_step applies the update rule") {
  EnvConfig cfg;
  EnvState s = state_at({0.5f, 0.5f}, {0.9f, 0.9f});

  SUBCASE("plain move") {
    std::array<float, 2> a{0.05f, 0.0f};
    EnvState n = env_step(s, a, cfg);
    CHECK(n.agent_pos[0] == doctest::Approx(0.55f));
    CHECK(n.agent_pos[1] == doctest::Approx(0.5f));
  }
  SUBCASE("position clipped to the unit square") {
    s.agent_pos = {0.98f, 0.5f};
    std::array<float, 2> a{0.1f, 0.0f};
    EnvState n = env_step(s, a, cfg);
    CHECK(n.agent_pos[0] == 1.0f);
    CHECK(n.agent_pos[1] == doctest::Approx(0.5f));
  }
  SUBCASE("action clipped per axis") {
    std::array<float, 2> a{0.5f, 0.5f};
    EnvState n = env_step(s, a, cfg);
    CHECK(n.agent_pos[0] == doctest::Approx(0.6f));
    CHECK(n.agent_pos[1] == doctest::Approx(0.6f));
  }
  SUBCASE("counters advance, goal stays") {
    std::array<float, 2> a{0.01f, -0.02f};
    EnvState n = env_step(s, a, cfg);
    CHECK(n.step_idx == s.step_idx + 1);
    CHECK(n.distractor_phase == s.distractor_phase + 1);
    CHECK(n.goal_pos == s.goal_pos);
    CHECK(n.episode_seed == s.episode_seed);
  }
  SUBCASE("non-finite actions rejected") {
    std::array<float, 2> nan_a{std::numeric_limits<float>::quiet_NaN(), 0.0f};
    std::array<float, 2> inf_a{0.0f, std::numeric_limits<float>::infinity()};
    CHECK_THROWS_AS(env_step(s, nan_a, cfg), InvalidActionError);
    CHECK_THROWS_AS(env_step(s, inf_a, cfg), InvalidActionError);
  }
}

TEST_CASE("coupled distractor phase advances with action magnitude") {
  EnvConfig cfg;
  cfg.couple_distractors_to_actions = true;
  EnvState s = state_at({0.5f, 0.5f}, {0.9f, 0.9f});

  std::array<float, 2> still{0.0f, 0.0f};
  CHECK(env_step(s, still, cfg).distractor_phase == 1);

  std::array<float, 2> full{cfg.action_max, 0.0f};
  int full_phase = env_step(s, full, cfg).distractor_phase;
  CHECK(full_phase > 1);

  std::array<float, 2> oversized{10.0f, 0.0f};
  CHECK(env_step(s, oversized, cfg).distractor_phase == full_phase);

  cfg.couple_distractors_to_actions = false;
  CHECK(env_step(s, full, cfg).distractor_phase == 1);
}

TEST_CASE("env_reset is seed-deterministic and attempt redraws only the goal") {
  EnvState a = env_reset(42);
  EnvState b = env_reset(42);
  CHECK(a.agent_pos == b.agent_pos);
  CHECK(a.goal_pos == b.goal_pos);
  CHECK(a.step_idx == 0);
  CHECK(a.distractor_phase == 0);
  CHECK(a.episode_seed == 42);

  EnvState c = env_reset(42, 1);
  CHECK(c.agent_pos == a.agent_pos);
  CHECK(c.goal_pos != a.goal_pos);

  for (uint64_t seed = 0; seed < 32; ++seed) {
    EnvState s = env_reset(seed);
    for (int i = 0; i < 2; ++i) {
      CHECK(s.agent_pos[i] >= 0.0f);
      CHECK(s.agent_pos[i] <= 1.0f);
      CHECK(s.goal_pos[i] >= 0.0f);
      CHECK(s.goal_pos[i] <= 1.0f);
    }
  }
  CHECK(env_reset(7).agent_pos != env_reset(8).agent_pos);
}

TEST_CASE("scripted_expert is a clipped proportional controller") {
  EnvConfig cfg;
  SUBCASE("far from goal saturates at the bound") {
    EnvState s = state_at({0.0f, 0.0f}, {1.0f, 0.0f});
    std::array<float, 2> a = scripted_expert(s, 0.0f, cfg);
    CHECK(a[0] == doctest::Approx(0.1f));
    CHECK(a[1] == doctest::Approx(0.0f));
  }
  SUBCASE("at the goal it stays put") {
    EnvState s = state_at({0.5f, 0.5f}, {0.5f, 0.5f});
    std::array<float, 2> a = scripted_expert(s, 0.0f, cfg);
    CHECK(a[0] == 0.0f);
    CHECK(a[1] == 0.0f);
  }
  SUBCASE("inside the clip range it moves exactly the gap") {
    EnvState s = state_at({0.5f, 0.5f}, {0.52f, 0.5f});
    std::array<float, 2> a = scripted_expert(s, 0.0f, cfg);
    CHECK(a[0] == doctest::Approx(0.02f));
    CHECK(a[1] == doctest::Approx(0.0f));
  }
  SUBCASE("noise is a pure function of seed and step") {
    EnvState s = state_at({0.2f, 0.8f}, {0.7f, 0.1f}, 123);
    s.step_idx = 5;
    std::array<float, 2> a = scripted_expert(s, 0.02f, cfg);
    CHECK(scripted_expert(s, 0.02f, cfg) == a);
    EnvState other = s;
    other.step_idx = 6;
    CHECK(scripted_expert(other, 0.02f, cfg) != a);
  }
  SUBCASE("noisy actions respect the bound") {
    for (uint64_t seed = 0; seed < 16; ++seed) {
      EnvState s = env_reset(seed);
      for (int t = 0; t < 8; ++t) {
        std::array<float, 2> a = scripted_expert(s, 0.05f, cfg);
        CHECK(std::fabs(a[0]) <= cfg.action_max + 1e-7f);
        CHECK(std::fabs(a[1]) <= cfg.action_max + 1e-7f);
        s = env_step(s, a, cfg);
      }
    }
  }
}

TEST_CASE("goal_reached is an inclusive disk test") {
  EnvConfig cfg;
  cfg.goal_radius = 0.25f;
  CHECK(goal_reached(state_at({0.5f, 0.5f}, {0.5f, 0.5f}), cfg));
  CHECK(goal_reached(state_at({0.5f, 0.5f}, {0.75f, 0.5f}), cfg));
  CHECK_FALSE(goal_reached(state_at({0.5f, 0.5f}, {0.76f, 0.5f}), cfg));
  CHECK_FALSE(goal_reached(state_at({0.25f, 0.25f}, {0.5f, 0.5f}), cfg));
}

TEST_CASE("noiseless expert reaches the goal within the distance bound") {
  EnvConfig cfg;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    EnvState s = env_reset(seed);
    float dx = s.goal_pos[0] - s.agent_pos[0];
    float dy = s.goal_pos[1] - s.agent_pos[1];
    int budget = static_cast<int>(std::ceil(std::sqrt(dx * dx + dy * dy) / cfg.action_max));
    bool reached = goal_reached(s, cfg);
    for (int t = 0; t < budget && !reached; ++t) {
      s = env_step(s, scripted_expert(s, 0.0f, cfg), cfg);
      reached = goal_reached(s, cfg);
    }
    CHECK(reached);
  }
}

TEST_CASE("render is bit-deterministic") {
  EnvConfig cfg;
  EnvState s = state_at({0.3f, 0.7f}, {0.8f, 0.2f}, 99, 3);
  CHECK(frame_of(s, true, cfg) == frame_of(s, true, cfg));
  CHECK(frame_of(s, false, cfg) == frame_of(s, false, cfg));
}

TEST_CASE("clean renders ignore seed and phase") {
  EnvConfig cfg;
  EnvState a = state_at({0.3f, 0.7f}, {0.8f, 0.2f}, 1, 0);
  EnvState b = state_at({0.3f, 0.7f}, {0.8f, 0.2f}, 77, 12);
  CHECK(frame_of(a, false, cfg) == frame_of(b, false, cfg));
}

TEST_CASE("distractor background animates with phase and varies with seed") {
  EnvConfig cfg;
  EnvState p0 = state_at({0.3f, 0.7f}, {0.8f, 0.2f}, 5, 0);
  EnvState p5 = state_at({0.3f, 0.7f}, {0.8f, 0.2f}, 5, 5);
  CHECK(frame_of(p0, true, cfg) != frame_of(p5, true, cfg));

  EnvState other_seed = state_at({0.3f, 0.7f}, {0.8f, 0.2f}, 6, 0);
  CHECK(frame_of(p0, true, cfg) != frame_of(other_seed, true, cfg));
}

TEST_CASE("foreground pixels agree across the distractor flag") {
  EnvConfig cfg;
  for (uint64_t seed : {3u, 14u, 25u}) {
    EnvState s = env_reset(seed);
    s.distractor_phase = 4;
    std::vector<uint8_t> with = frame_of(s, true, cfg);
    std::vector<uint8_t> without = frame_of(s, false, cfg);
    std::vector<uint8_t> mask = mask_of(s, cfg);
    int covered = 0;
    for (int i = 0; i < cfg.frame_size * cfg.frame_size; ++i) {
      if (!mask[static_cast<size_t>(i)]) continue;
      ++covered;
      for (int c = 0; c < 3; ++c)
        REQUIRE(with[static_cast<size_t>(3 * i + c)] == without[static_cast<size_t>(3 * i + c)]);
    }
    CHECK(covered > 0);
  }
}

TEST_CASE("foreground_mask marks sprite interiors") {
  EnvConfig cfg;
  EnvState s = state_at({0.25f, 0.25f}, {0.75f, 0.75f});
  std::vector<uint8_t> mask = mask_of(s, cfg);
  std::vector<uint8_t> clean = frame_of(s, false, cfg);

  auto at = [&](float x, float y) {
    int px = static_cast<int>(x * cfg.frame_size);
    int py = static_cast<int>(y * cfg.frame_size);
    return mask[static_cast<size_t>(py * cfg.frame_size + px)];
  };
  CHECK(at(0.25f, 0.25f) == 1);
  CHECK(at(0.75f, 0.75f) == 1);
  CHECK(at(0.97f, 0.03f) == 0);

  for (int i = 0; i < cfg.frame_size * cfg.frame_size; ++i) {
    CHECK(mask[static_cast<size_t>(i)] <= 1);
    if (!mask[static_cast<size_t>(i)]) continue;
    bool backdrop = clean[static_cast<size_t>(3 * i)] == 110 &&
                    clean[static_cast<size_t>(3 * i + 1)] == 110 &&
                    clean[static_cast<size_t>(3 * i + 2)] == 110;
    CHECK_FALSE(backdrop);
  }
}

TEST_CASE("background pixels do not depend on the action sequence") {
  EnvConfig cfg;
  EnvState a = env_reset(31);
  EnvState b = a;
  std::array<float, 2> left{-0.08f, 0.01f};
  std::array<float, 2> down{0.02f, 0.09f};
  for (int t = 0; t < 6; ++t) {
    a = env_step(a, left, cfg);
    b = env_step(b, down, cfg);
  }
  REQUIRE(a.distractor_phase == b.distractor_phase);

  // A clean-render pixel still showing the flat backdrop was never touched by
  // a sprite, so in the distractor render it is pure background.
  std::vector<uint8_t> clean_a = frame_of(a, false, cfg);
  std::vector<uint8_t> clean_b = frame_of(b, false, cfg);
  std::vector<uint8_t> dist_a = frame_of(a, true, cfg);
  std::vector<uint8_t> dist_b = frame_of(b, true, cfg);
  auto is_backdrop = [](const std::vector<uint8_t>& f, int i) {
    return f[static_cast<size_t>(3 * i)] == 110 && f[static_cast<size_t>(3 * i + 1)] == 110 &&
           f[static_cast<size_t>(3 * i + 2)] == 110;
  };
  int compared = 0;
  for (int i = 0; i < cfg.frame_size * cfg.frame_size; ++i) {
    if (!is_backdrop(clean_a, i) || !is_backdrop(clean_b, i)) continue;
    ++compared;
    for (int c = 0; c < 3; ++c)
      REQUIRE(dist_a[static_cast<size_t>(3 * i + c)] == dist_b[static_cast<size_t>(3 * i + c)]);
  }
  CHECK(compared > 100);
}

TEST_CASE("render_array wraps the raw render") {
  EnvConfig cfg;
  cfg.frame_size = 32;
  EnvState s = state_at({0.4f, 0.6f}, {0.7f, 0.3f}, 8, 2);
  NdArray arr = render_array(s, true, cfg);
  REQUIRE(arr.dtype == Dtype::u8);
  REQUIRE(arr.dims == std::vector<int64_t>{32, 32, 3});
  std::vector<uint8_t> raw = frame_of(s, true, cfg);
  CHECK(std::memcmp(arr.u8().data(), raw.data(), raw.size()) == 0);
}
