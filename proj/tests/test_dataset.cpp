#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "lamkit/dataset.hpp"
#include "lamkit/errors.hpp"

using namespace lamkit;
namespace fs = std::filesystem;

namespace {

GenConfig small_config() {
  GenConfig cfg;
  cfg.num_trajectories = 6;
  cfg.horizon = 16;
  cfg.frame_size = 16;
  cfg.seed = 3;
  return cfg;
}

fs::path fresh_dir(const char* name) {
  fs::path d = fs::temp_directory_path() / "lamkit_dataset_tests" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

bool same_bytes(const NdArray& a, const NdArray& b) {
  return a.dtype == b.dtype && a.dims == b.dims &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size()) == 0;
}

}  // namespace

TEST_CASE("generate_dataset bookkeeping") {
  GenConfig cfg = small_config();
  cfg.num_trajectories = 8;
  TrajectoryDataset ds = generate_dataset(cfg);

  CHECK(ds.num_trajectories() == 8);
  CHECK(ds.horizon() == 16);
  CHECK(ds.frame_size() == 16);
  CHECK(ds.action_dim() == 2);
  CHECK(ds.frames.dims == std::vector<int64_t>{8, 17, 16, 16, 3});
  CHECK(ds.actions.dims == std::vector<int64_t>{8, 16, 2});
  CHECK(ds.episode_seeds.dims == std::vector<int64_t>{8});
  CHECK_FALSE(ds.has_twins());
  CHECK_FALSE(ds.imported());
  REQUIRE(ds.states.has_value());
  CHECK(ds.states->dims == std::vector<int64_t>{8, 17, 4});

  CHECK(ds.manifest.get_int("num_trajectories") == 8);
  CHECK(ds.manifest.get_int("horizon") == 16);
  CHECK(ds.manifest.get_int("format_version") == 1);
  CHECK(ds.manifest.get("env_id") == "reach2d-v1");

  EnvConfig env = ds.env_config();
  CHECK(env.frame_size == 16);
  CHECK(env.horizon == 16);
  CHECK(env.action_max == doctest::Approx(cfg.action_max));
  CHECK(env.goal_radius == doctest::Approx(cfg.goal_radius));
}

TEST_CASE("every stored trajectory reaches the goal") {
  GenConfig cfg = small_config();
  cfg.num_trajectories = 12;
  TrajectoryDataset ds = generate_dataset(cfg);
  for (int64_t n = 0; n < ds.num_trajectories(); ++n) {
    float best = 10.0f;
    for (int64_t t = 0; t <= ds.horizon(); ++t) {
      const float* s = ds.state(n, t);
      float dx = s[0] - s[2], dy = s[1] - s[3];
      best = std::min(best, std::sqrt(dx * dx + dy * dy));
    }
    CHECK(best <= cfg.goal_radius);
  }
}

TEST_CASE("actions stay within the bound and match stored states") {
  GenConfig cfg = small_config();
  TrajectoryDataset ds = generate_dataset(cfg);
  for (int64_t n = 0; n < ds.num_trajectories(); ++n) {
    for (int64_t t = 0; t < ds.horizon(); ++t) {
      const float* a = ds.action(n, t);
      CHECK(std::fabs(a[0]) <= cfg.action_max + 1e-7f);
      CHECK(std::fabs(a[1]) <= cfg.action_max + 1e-7f);
      // Positions move by the clipped action except at the walls.
      const float* s0 = ds.state(n, t);
      const float* s1 = ds.state(n, t + 1);
      for (int i = 0; i < 2; ++i) {
        if (s1[i] > 0.0f && s1[i] < 1.0f) CHECK(s1[i] == doctest::Approx(s0[i] + a[i]));
      }
    }
  }
}

TEST_CASE("generation is bit-deterministic and regenerable from the manifest") {
  GenConfig cfg = small_config();
  cfg.twins = true;
  cfg.distractors = true;
  TrajectoryDataset a = generate_dataset(cfg);
  TrajectoryDataset b = generate_dataset(cfg);
  CHECK(same_bytes(a.frames, b.frames));
  CHECK(same_bytes(a.actions, b.actions));
  CHECK(same_bytes(*a.twins, *b.twins));
  CHECK(same_bytes(*a.states, *b.states));
  CHECK(same_bytes(a.episode_seeds, b.episode_seeds));

  TrajectoryDataset c = generate_dataset(gen_config_from_manifest(a.manifest));
  CHECK(same_bytes(a.frames, c.frames));
  CHECK(same_bytes(a.actions, c.actions));
  CHECK(same_bytes(*a.twins, *c.twins));

  cfg.seed = 4;
  TrajectoryDataset d = generate_dataset(cfg);
  CHECK_FALSE(same_bytes(a.frames, d.frames));
}

TEST_CASE("twins align with frames on every foreground pixel") {
  GenConfig cfg = small_config();
  cfg.twins = true;
  cfg.distractors = true;
  TrajectoryDataset ds = generate_dataset(cfg);
  EnvConfig env = ds.env_config();
  REQUIRE(ds.has_twins());
  CHECK(ds.twins->dims == ds.frames.dims);

  std::vector<uint8_t> mask(static_cast<size_t>(cfg.frame_size) * cfg.frame_size);
  int64_t covered = 0;
  for (int64_t n = 0; n < ds.num_trajectories(); ++n) {
    for (int64_t t = 0; t <= ds.horizon(); ++t) {
      const float* sv = ds.state(n, t);
      EnvState s;
      s.agent_pos = {sv[0], sv[1]};
      s.goal_pos = {sv[2], sv[3]};
      foreground_mask(s, env, mask.data());
      const uint8_t* f = ds.frame(n, t);
      const uint8_t* w = ds.twin(n, t);
      for (int64_t i = 0; i < cfg.frame_size * cfg.frame_size; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        ++covered;
        REQUIRE(std::memcmp(f + 3 * i, w + 3 * i, 3) == 0);
      }
    }
  }
  CHECK(covered > 0);
}

TEST_CASE("unreachable geometry is rejected") {
  GenConfig cfg = small_config();
  cfg.horizon = 5;
  CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);

  cfg = small_config();
  cfg.num_trajectories = 0;
  CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);

  cfg = small_config();
  cfg.frame_size = 4;
  CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
}

TEST_CASE("write and read round-trip bit-exactly") {
  fs::path dir = fresh_dir("roundtrip");
  GenConfig cfg = small_config();
  cfg.twins = true;
  TrajectoryDataset ds = generate_dataset(cfg);
  write_dataset(ds, dir);
  TrajectoryDataset rt = read_dataset(dir);

  CHECK(same_bytes(ds.frames, rt.frames));
  CHECK(same_bytes(ds.actions, rt.actions));
  CHECK(same_bytes(*ds.twins, *rt.twins));
  CHECK(same_bytes(*ds.states, *rt.states));
  CHECK(same_bytes(ds.episode_seeds, rt.episode_seeds));
  CHECK(rt.manifest.get("task_text") == cfg.task_text);
  CHECK(rt.manifest.get_int("seed") == 3);
}

TEST_CASE("corrupt payloads are rejected on read") {
  GenConfig cfg = small_config();
  TrajectoryDataset ds = generate_dataset(cfg);

  SUBCASE("truncated array file") {
    fs::path dir = fresh_dir("truncated");
    write_dataset(ds, dir);
    fs::resize_file(dir / "frames.arr", fs::file_size(dir / "frames.arr") - 64);
    CHECK_THROWS_AS(read_dataset(dir), CorruptionError);
  }
  SUBCASE("manifest count disagrees with the payload") {
    fs::path dir = fresh_dir("count_mismatch");
    write_dataset(ds, dir);
    Manifest m = read_manifest(dir / "manifest.txt");
    m.set_int("num_trajectories", ds.num_trajectories() + 1);
    write_manifest(dir / "manifest.txt", m);
    CHECK_THROWS_AS(read_dataset(dir), CorruptionError);
  }
  SUBCASE("declared twins missing on disk") {
    fs::path dir = fresh_dir("missing_twins");
    GenConfig tw = small_config();
    tw.twins = true;
    write_dataset(generate_dataset(tw), dir);
    fs::remove(dir / "twins.arr");
    CHECK_THROWS_AS(read_dataset(dir), CorruptionError);
  }
  SUBCASE("unknown format version") {
    fs::path dir = fresh_dir("bad_version");
    write_dataset(ds, dir);
    Manifest m = read_manifest(dir / "manifest.txt");
    m.set_int("format_version", 999);
    write_manifest(dir / "manifest.txt", m);
    CHECK_THROWS_AS(read_dataset(dir), VersionError);
  }
}

TEST_CASE("import adapter wraps external arrays") {
  fs::path dir = fresh_dir("import");
  GenConfig cfg = small_config();
  cfg.twins = true;
  TrajectoryDataset ds = generate_dataset(cfg);
  write_array(dir / "f.arr", ds.frames);
  write_array(dir / "a.arr", ds.actions);
  write_array(dir / "w.arr", *ds.twins);

  TrajectoryDataset imp =
      import_dataset(dir / "f.arr", dir / "a.arr", dir / "w.arr", "external-env", "push the lever");
  CHECK(imp.imported());
  CHECK(imp.num_trajectories() == ds.num_trajectories());
  CHECK(imp.horizon() == ds.horizon());
  CHECK(imp.has_twins());
  CHECK_FALSE(imp.states.has_value());
  CHECK(imp.manifest.get("env_id") == "external-env");
  CHECK(imp.manifest.get("task_text") == "push the lever");
  for (int64_t n = 0; n < imp.num_trajectories(); ++n)
    CHECK(imp.episode_seeds.u64()[n] == 0);
  CHECK(same_bytes(imp.frames, ds.frames));

  CHECK_THROWS_AS(gen_config_from_manifest(imp.manifest), UnsupportedError);

  SUBCASE("imported dataset round-trips but never regenerates") {
    fs::path out = fresh_dir("import_rt");
    write_dataset(imp, out);
    TrajectoryDataset rt = read_dataset(out);
    CHECK(rt.imported());
    CHECK_FALSE(rt.states.has_value());
    CHECK(same_bytes(rt.frames, imp.frames));
  }
}

TEST_CASE("import adapter validates shapes") {
  fs::path dir = fresh_dir("import_bad");
  GenConfig cfg = small_config();
  TrajectoryDataset ds = generate_dataset(cfg);
  write_array(dir / "f.arr", ds.frames);
  write_array(dir / "a.arr", ds.actions);

  NdArray short_actions = make_array(Dtype::f32, {ds.num_trajectories(), ds.horizon() + 1, 2});
  write_array(dir / "bad_a.arr", short_actions);
  CHECK_THROWS_AS(import_dataset(dir / "f.arr", dir / "bad_a.arr", std::nullopt, "e", "t"),
                  ConfigError);

  NdArray flat = make_array(Dtype::u8, {ds.num_trajectories(), ds.horizon() + 1, 16, 16});
  write_array(dir / "bad_f.arr", flat);
  CHECK_THROWS_AS(import_dataset(dir / "bad_f.arr", dir / "a.arr", std::nullopt, "e", "t"),
                  ConfigError);

  NdArray bad_twins = make_array(Dtype::u8, {ds.num_trajectories(), ds.horizon() + 1, 8, 8, 3});
  write_array(dir / "bad_w.arr", bad_twins);
  CHECK_THROWS_AS(import_dataset(dir / "f.arr", dir / "a.arr", dir / "bad_w.arr", "e", "t"),
                  ConfigError);
}
