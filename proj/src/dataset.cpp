#include "lamkit/dataset.hpp"

#include <cmath>
#include <cstring>
#include <vector>

#include "lamkit/errors.hpp"
#include "lamkit/rng.hpp"

namespace lamkit {

namespace {

constexpr int64_t kFormatVersion = 1;
constexpr int kMaxGoalAttempts = 1000;

std::string bool_str(bool b) { return b ? "true" : "false"; }

bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ParseError("manifest key '" + key + "' is not a boolean: " + s);
}

}  // namespace

EnvConfig TrajectoryDataset::env_config() const {
  EnvConfig e;
  e.frame_size = static_cast<int>(frame_size());
  e.action_max = static_cast<float>(manifest.get_real("action_max"));
  e.goal_radius = static_cast<float>(manifest.get_real("goal_radius"));
  e.horizon = static_cast<int>(horizon());
  e.distractors = parse_bool(manifest.get("distractors"), "distractors");
  e.couple_distractors_to_actions =
      parse_bool(manifest.get_or("couple_distractors", "false"), "couple_distractors");
  return e;
}

TrajectoryDataset generate_dataset(const GenConfig& cfg) {
  float reach = cfg.action_max * static_cast<float>(cfg.horizon);
  if (reach < std::sqrt(2.0f))
    throw ConfigError("horizon too short: action_max * horizon = " + std::to_string(reach) +
                      " cannot cover the unit square diagonal");
  if (cfg.num_trajectories <= 0 || cfg.horizon <= 0 || cfg.frame_size < 8)
    throw ConfigError("invalid dataset geometry");

  EnvConfig env;
  env.frame_size = cfg.frame_size;
  env.action_max = cfg.action_max;
  env.goal_radius = cfg.goal_radius;
  env.horizon = cfg.horizon;
  env.distractors = cfg.distractors;
  env.couple_distractors_to_actions = cfg.couple_distractors;

  int64_t n_traj = cfg.num_trajectories;
  int64_t horizon = cfg.horizon;
  int64_t size = cfg.frame_size;

  TrajectoryDataset ds;
  ds.frames = make_array(Dtype::u8, {n_traj, horizon + 1, size, size, 3});
  ds.actions = make_array(Dtype::f32, {n_traj, horizon, 2});
  ds.states = make_array(Dtype::f32, {n_traj, horizon + 1, 4});
  ds.episode_seeds = make_array(Dtype::u64, {n_traj});
  if (cfg.twins) ds.twins = make_array(Dtype::u8, {n_traj, horizon + 1, size, size, 3});

  int64_t frame_bytes = size * size * 3;
  std::vector<EnvState> states(static_cast<size_t>(horizon) + 1);

  for (int64_t n = 0; n < n_traj; ++n) {
    uint64_t episode_seed = seed_mix({cfg.seed, static_cast<uint64_t>(n)});
    bool success = false;
    for (int attempt = 0; attempt < kMaxGoalAttempts && !success; ++attempt) {
      states[0] = env_reset(episode_seed, attempt);
      success = goal_reached(states[0], env);
      for (int64_t t = 0; t < horizon; ++t) {
        std::array<float, 2> a = scripted_expert(states[t], cfg.noise_scale, env);
        std::memcpy(ds.actions.f32().data() + (n * horizon + t) * 2, a.data(), 2 * sizeof(float));
        states[t + 1] = env_step(states[t], a, env);
        if (goal_reached(states[t + 1], env)) success = true;
      }
    }
    if (!success)
      throw Error("failed to sample a reachable goal for trajectory " + std::to_string(n));

    ds.episode_seeds.u64()[n] = episode_seed;
    for (int64_t t = 0; t <= horizon; ++t) {
      render(states[t], cfg.distractors, env,
             ds.frames.u8().data() + (n * (horizon + 1) + t) * frame_bytes);
      if (ds.twins)
        render(states[t], false, env,
               ds.twins->u8().data() + (n * (horizon + 1) + t) * frame_bytes);
      float* sv = ds.states->f32().data() + (n * (horizon + 1) + t) * 4;
      sv[0] = states[t].agent_pos[0];
      sv[1] = states[t].agent_pos[1];
      sv[2] = states[t].goal_pos[0];
      sv[3] = states[t].goal_pos[1];
    }
  }

  Manifest& m = ds.manifest;
  m.set_int("format_version", kFormatVersion);
  m.set("env_id", "reach2d-v1");
  m.set("source", "synthetic");
  m.set_int("num_trajectories", n_traj);
  m.set_int("horizon", horizon);
  m.set_int("frame_size", size);
  m.set_int("channels", 3);
  m.set_int("action_dim", 2);
  m.set("distractors", bool_str(cfg.distractors));
  m.set("twins", bool_str(cfg.twins));
  m.set("couple_distractors", bool_str(cfg.couple_distractors));
  m.set_real("noise_scale", cfg.noise_scale);
  m.set_real("action_max", cfg.action_max);
  m.set_real("goal_radius", cfg.goal_radius);
  m.set_int("seed", static_cast<int64_t>(cfg.seed));
  m.set("task_text", cfg.task_text);
  return ds;
}

GenConfig gen_config_from_manifest(const Manifest& m) {
  if (m.get_or("source", "synthetic") != "synthetic")
    throw UnsupportedError("cannot regenerate an imported dataset");
  GenConfig cfg;
  cfg.num_trajectories = static_cast<int>(m.get_int("num_trajectories"));
  cfg.horizon = static_cast<int>(m.get_int("horizon"));
  cfg.frame_size = static_cast<int>(m.get_int("frame_size"));
  cfg.distractors = parse_bool(m.get("distractors"), "distractors");
  cfg.twins = parse_bool(m.get("twins"), "twins");
  cfg.couple_distractors = parse_bool(m.get_or("couple_distractors", "false"), "couple_distractors");
  cfg.noise_scale = static_cast<float>(m.get_real("noise_scale"));
  cfg.action_max = static_cast<float>(m.get_real("action_max"));
  cfg.goal_radius = static_cast<float>(m.get_real("goal_radius"));
  cfg.seed = static_cast<uint64_t>(m.get_int("seed"));
  cfg.task_text = m.get("task_text");
  return cfg;
}

void write_dataset(const TrajectoryDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_array(dir / "frames.arr", ds.frames);
  write_array(dir / "actions.arr", ds.actions);
  write_array(dir / "seeds.arr", ds.episode_seeds);
  if (ds.twins) write_array(dir / "twins.arr", *ds.twins);
  if (ds.states) write_array(dir / "states.arr", *ds.states);
  write_manifest(dir / "manifest.txt", ds.manifest);
}

TrajectoryDataset read_dataset(const std::filesystem::path& dir) {
  Manifest m = read_manifest(dir / "manifest.txt");
  int64_t version = m.get_int("format_version");
  if (version != kFormatVersion)
    throw VersionError("dataset format_version " + std::to_string(version) +
                       " is not supported (expected " + std::to_string(kFormatVersion) + ")");

  TrajectoryDataset ds;
  ds.manifest = m;
  ds.frames = read_array(dir / "frames.arr");
  ds.actions = read_array(dir / "actions.arr");
  ds.episode_seeds = read_array(dir / "seeds.arr");

  int64_t n = m.get_int("num_trajectories");
  int64_t horizon = m.get_int("horizon");
  int64_t size = m.get_int("frame_size");
  auto expect = [&](const NdArray& a, std::vector<int64_t> dims, const char* name) {
    if (a.dims != dims)
      throw CorruptionError(std::string(name) + " dims do not match manifest in " + dir.string());
  };
  expect(ds.frames, {n, horizon + 1, size, size, 3}, "frames.arr");
  expect(ds.actions, {n, horizon, m.get_int("action_dim")}, "actions.arr");
  expect(ds.episode_seeds, {n}, "seeds.arr");
  if (ds.frames.dtype != Dtype::u8 || ds.actions.dtype != Dtype::f32)
    throw CorruptionError("unexpected dtypes in " + dir.string());

  if (parse_bool(m.get("twins"), "twins")) {
    if (!std::filesystem::exists(dir / "twins.arr"))
      throw CorruptionError("manifest declares twins but twins.arr is missing in " + dir.string());
    ds.twins = read_array(dir / "twins.arr");
    expect(*ds.twins, ds.frames.dims, "twins.arr");
  }
  if (m.get_or("source", "synthetic") == "synthetic") {
    if (!std::filesystem::exists(dir / "states.arr"))
      throw CorruptionError("synthetic dataset is missing states.arr in " + dir.string());
    ds.states = read_array(dir / "states.arr");
    expect(*ds.states, {n, horizon + 1, 4}, "states.arr");
  }
  return ds;
}

TrajectoryDataset import_dataset(const std::filesystem::path& frames_path,
                                 const std::filesystem::path& actions_path,
                                 const std::optional<std::filesystem::path>& twins_path,
                                 const std::string& env_id, const std::string& task_text) {
  TrajectoryDataset ds;
  ds.frames = read_array(frames_path);
  ds.actions = read_array(actions_path);

  if (ds.frames.dims.size() != 5 || ds.frames.dtype != Dtype::u8)
    throw ConfigError("imported frames must be a rank-5 uint8 array [N, T+1, H, W, C]");
  if (ds.frames.dims[2] != ds.frames.dims[3] || ds.frames.dims[4] != 3)
    throw ConfigError("imported frames must be square with 3 channels");
  if (ds.actions.dims.size() != 3 || ds.actions.dtype != Dtype::f32)
    throw ConfigError("imported actions must be a rank-3 float32 array [N, T, A]");
  if (ds.actions.dims[0] != ds.frames.dims[0] || ds.actions.dims[1] + 1 != ds.frames.dims[1])
    throw ConfigError("imported frames/actions shapes disagree: need one more frame than actions");

  if (twins_path) {
    ds.twins = read_array(*twins_path);
    if (ds.twins->dims != ds.frames.dims || ds.twins->dtype != Dtype::u8)
      throw ConfigError("imported twins must match frames shape and dtype");
  }
  ds.episode_seeds = make_array(Dtype::u64, {ds.frames.dims[0]});

  Manifest& m = ds.manifest;
  m.set_int("format_version", kFormatVersion);
  m.set("env_id", env_id);
  m.set("source", "imported");
  m.set_int("num_trajectories", ds.frames.dims[0]);
  m.set_int("horizon", ds.actions.dims[1]);
  m.set_int("frame_size", ds.frames.dims[2]);
  m.set_int("channels", 3);
  m.set_int("action_dim", ds.actions.dims[2]);
  m.set("distractors", "true");
  m.set("twins", bool_str(ds.twins.has_value()));
  m.set_real("noise_scale", 0.0);
  m.set_real("action_max", 0.1);
  m.set_real("goal_radius", 0.05);
  m.set_int("seed", 0);
  m.set("task_text", task_text);
  return ds;
}

}  // namespace lamkit
