#include <cctype>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lamkit/config.hpp"
#include "lamkit/errors.hpp"
#include "lamkit/records.hpp"

namespace fs = std::filesystem;
using namespace lamkit;

namespace {

RunConfig load_run_config(const std::string& file, const std::vector<std::string>& overrides) {
  RunConfig rc = RunConfig::defaults();
  if (!file.empty()) rc.apply_file(file);
  for (const std::string& kv : overrides) rc.apply_override(kv);
  return rc;
}

// Relative output paths land under $LAMKIT_OUT_ROOT when it is set.
fs::path resolve_out(const std::string& out) {
  const fs::path p(out);
  const char* root = std::getenv("LAMKIT_OUT_ROOT");
  if (root != nullptr && *root != '\0' && p.is_relative()) return fs::path(root) / p;
  return p;
}

std::string sanitize_token(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (std::isalnum(static_cast<unsigned char>(c)))
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    else if (!out.empty() && out.back() != '-')
      out += '-';
  }
  while (!out.empty() && out.back() == '-') out.pop_back();
  return out;
}

std::string dist_suffix(const TrajectoryDataset& ds) {
  return ds.manifest.get_or("distractors", "true") == "true" ? "-dist" : "-clean";
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::stringstream ss(s);
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<int> split_csv_ints(const std::string& s, const char* what) {
  std::vector<int> out;
  for (const std::string& item : split_csv(s)) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError(std::string("bad ") + what + " value: " + item);
    }
  }
  return out;
}

struct CommonArgs {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool out_required = true) {
  cmd->add_option("--config", a.config_file, "config file (INI)");
  auto* out = cmd->add_option("--out,-o", a.out, "output directory");
  if (out_required) out->required();
  cmd->add_option("overrides", a.overrides, "key=value config overrides");
}

void cmd_gen_data(const CommonArgs& a) {
  const RunConfig rc = load_run_config(a.config_file, a.overrides);
  const GenConfig g = gen_config_from(rc);
  const TrajectoryDataset ds = generate_dataset(g);
  const fs::path dir = resolve_out(a.out);
  write_dataset(ds, dir);
  rc.write_snapshot(dir / "resolved_config.ini");
  std::cout << "wrote " << ds.num_trajectories() << " trajectories of horizon " << ds.horizon()
            << " to " << dir.string() << "\n";
}

void cmd_extract(const CommonArgs& a, const std::string& dataset, const std::string& vlm,
                 const std::string& cell, const std::string& endpoint) {
  RunConfig rc = load_run_config(a.config_file, a.overrides);
  rc.apply_override("vlm.type=" + vlm);
  const TrajectoryDataset ds = read_dataset(dataset);
  const std::vector<ExtractionConfig> grid = enumerate_extraction_configs(vlm);
  std::vector<ExtractionConfig> selected;
  if (cell == "all") {
    selected = grid;
  } else {
    for (const ExtractionConfig& c : grid)
      if (c.cell_name() == cell) selected.push_back(c);
    if (selected.empty()) {
      try {
        const int idx = std::stoi(cell);
        if (idx >= 1 && idx <= static_cast<int>(grid.size()))
          selected.push_back(grid[static_cast<size_t>(idx - 1)]);
      } catch (const std::exception&) {
      }
    }
    if (selected.empty())
      throw ConfigError("unknown extraction cell: " + cell +
                        " (use a cell name like p1_last_prompt_mean, an index 1.." +
                        std::to_string(grid.size()) + ", or all)");
  }
  const std::unique_ptr<VLMClient> client = make_vlm_client(endpoint);
  const ExtractOptions opts = extract_options_from(rc);
  const fs::path root =
      resolve_out(a.out.empty() ? (fs::path(dataset) / "embeddings").string() : a.out);
  for (const ExtractionConfig& c : selected) {
    const fs::path store_dir = root / sanitize_token(vlm) / c.cell_name();
    const ExtractReport rep = extract_embeddings(ds, c, *client, store_dir, opts);
    std::cout << c.cell_name() << ": wrote " << rep.frames_written << ", skipped "
              << rep.frames_skipped << " -> " << store_dir.string() << "\n";
  }
  rc.write_snapshot(root / "resolved_config.ini");
}

std::vector<RunRecord> probe_records(const std::string& method, const std::string& task,
                                     int64_t seed, const TrainLamResult& tr) {
  std::vector<RunRecord> recs;
  for (const ProbePoint& p : tr.probe.points)
    recs.push_back({method, task, seed, "probe_mse", p.probe_mse, p.step});
  recs.push_back({method, task, seed, "probe_mse_final", tr.probe.final_probe_mse, -1});
  recs.push_back({method, task, seed, "train_loss_final", tr.final_train_loss, -1});
  return recs;
}

void cmd_train_lam(const CommonArgs& a, const std::string& dataset, const std::string& target,
                   std::string method) {
  const RunConfig rc = load_run_config(a.config_file, a.overrides);
  const TrajectoryDataset ds = read_dataset(dataset);
  const TargetSpec spec = parse_target_spec(target);
  const std::unique_ptr<TargetProvider> provider = make_target_provider(spec, ds);
  const LamConfig cfg = lam_config_from(rc, provider->is_image());
  const fs::path dir = resolve_out(a.out);
  const TrainLamResult tr = train_lam(ds, cfg, *provider, dir);
  if (method.empty())
    method = std::string("lapo-") + target_kind_name(spec.kind) + dist_suffix(ds);
  const std::string task = ds.manifest.get_or("task_text", "");
  write_records(dir / "records.jsonl",
                probe_records(method, task, static_cast<int64_t>(cfg.seed), tr));
  rc.write_snapshot(dir / "resolved_config.ini");
  std::cout << "final probe mse " << tr.probe.final_probe_mse << " after " << tr.steps
            << " steps (" << method << ")\n";
}

void cmd_train_bc(const CommonArgs& a, const std::string& dataset, const std::string& lam_dir) {
  const RunConfig rc = load_run_config(a.config_file, a.overrides);
  const TrajectoryDataset ds = read_dataset(dataset);
  LamCheckpoint lam = load_lam_checkpoint(lam_dir);
  const NdArray latents = label_latents(ds, lam);
  const BcConfig cfg = bc_config_from(rc);
  const fs::path dir = resolve_out(a.out);
  const BcTrainResult tr = train_bc(ds, latents, cfg, dir);
  const std::string method = "latent-bc" + dist_suffix(ds);
  const std::string task = ds.manifest.get_or("task_text", "");
  write_records(dir / "records.jsonl", {{method, task, static_cast<int64_t>(cfg.seed),
                                         "train_loss_final", tr.final_train_loss, -1}});
  rc.write_snapshot(dir / "resolved_config.ini");
  std::cout << "cloning loss " << tr.final_train_loss << " after " << tr.steps << " steps\n";
}

void cmd_train_decoder(const CommonArgs& a, const std::string& dataset, const std::string& lam_dir,
                       const std::string& actor_dir, int labels) {
  RunConfig rc = load_run_config(a.config_file, a.overrides);
  if (labels > 0)
    rc.apply_override("latent_actions_decoding.num_labeled_trajectories=" +
                      std::to_string(labels));
  const TrajectoryDataset ds = read_dataset(dataset);
  LamCheckpoint lam = load_lam_checkpoint(lam_dir);
  std::optional<BcCheckpoint> actor;
  if (!actor_dir.empty()) actor = load_bc_checkpoint(actor_dir);
  const DecoderConfig cfg = decoder_config_from(rc);
  const fs::path dir = resolve_out(a.out);
  const DecoderTrainResult tr =
      train_decoder(ds, lam, actor ? &*actor : nullptr, cfg, dir);
  const std::string task = ds.manifest.get_or("task_text", "");
  write_records(dir / "records.jsonl",
                {{"decoder" + dist_suffix(ds), task, static_cast<int64_t>(cfg.seed),
                  "train_loss_final", tr.final_train_loss, -1}});
  rc.write_snapshot(dir / "resolved_config.ini");
  std::cout << "decoding loss " << tr.final_train_loss << " on " << cfg.num_labeled
            << " labeled trajectories\n";
}

void cmd_evaluate(const CommonArgs& a, const std::string& dataset, const std::string& actor_dir,
                  const std::string& decoder_dir, const std::string& policy_name,
                  std::optional<int> episodes, std::optional<int64_t> eval_seed,
                  std::string method) {
  RunConfig rc = load_run_config(a.config_file, a.overrides);
  if (episodes) rc.apply_override("general.eval_episodes=" + std::to_string(*episodes));
  if (eval_seed) rc.apply_override("general.eval_seed=" + std::to_string(*eval_seed));
  const TrajectoryDataset ds = read_dataset(dataset);
  const GenConfig env = gen_config_from_manifest(ds.manifest);

  std::unique_ptr<Policy> pi;
  if (policy_name == "learned") {
    if (actor_dir.empty() || decoder_dir.empty())
      throw ConfigError("the learned policy needs --actor and --decoder");
    pi = make_learned_policy(load_bc_checkpoint(actor_dir), load_decoder_checkpoint(decoder_dir));
    if (method.empty()) method = "latent-bc" + dist_suffix(ds);
  } else if (policy_name == "expert") {
    pi = make_expert_policy(env.noise_scale);
    if (method.empty()) method = "expert" + dist_suffix(ds);
  } else if (policy_name == "random") {
    pi = make_random_policy(static_cast<uint64_t>(rc.get_int("general", "eval_seed")));
    if (method.empty()) method = "random" + dist_suffix(ds);
  } else {
    throw ConfigError("unknown policy: " + policy_name + " (learned, expert, random)");
  }

  EvalConfig ec;
  ec.num_episodes = static_cast<int>(rc.get_int("general", "eval_episodes"));
  ec.seed = static_cast<uint64_t>(rc.get_int("general", "eval_seed"));
  const EvalResult er = evaluate_policy(*pi, env, ec);

  const std::string task = ds.manifest.get_or("task_text", "");
  const int64_t seed = rc.get_int("general", "eval_seed");
  std::vector<RunRecord> recs;
  for (const EpisodeResult& ep : er.episodes)
    recs.push_back({method, task, seed, "success", ep.success ? 1.0 : 0.0, ep.episode});
  recs.push_back({method, task, seed, "success_rate", er.success_rate, -1});
  const fs::path dir = resolve_out(a.out);
  fs::create_directories(dir);
  write_records(dir / "records.jsonl", recs);
  rc.write_snapshot(dir / "resolved_config.ini");
  std::cout << "success rate " << er.success_rate << " over " << ec.num_episodes
            << " episodes (" << method << ")\n";
}

void cmd_sweep(const CommonArgs& a, const std::string& targets_csv, const std::string& seeds_csv,
               const std::string& dims_csv) {
  const RunConfig base = load_run_config(a.config_file, a.overrides);
  const std::vector<std::string> targets = split_csv(targets_csv);
  if (targets.empty()) throw ConfigError("sweep needs at least one target spec");
  const std::vector<int> seeds = split_csv_ints(seeds_csv, "seed");
  std::vector<int> dims = dims_csv.empty()
      ? std::vector<int>{static_cast<int>(
            base.get_int("latent_action_learning", "latent_action_dim"))}
      : split_csv_ints(dims_csv, "latent dim");

  const fs::path root = resolve_out(a.out);
  fs::create_directories(root / "records");
  int done = 0, skipped = 0, failed = 0;
  for (const std::string& target : targets) {
    for (const int dim : dims) {
      for (const int seed : seeds) {
        const std::string cell =
            sanitize_token(target) + "-d" + std::to_string(dim) + "-s" + std::to_string(seed);
        const fs::path rec_path = root / "records" / (cell + ".jsonl");
        if (fs::exists(rec_path)) {
          std::cout << cell << ": records exist, skipping\n";
          ++skipped;
          continue;
        }
        try {
          RunConfig rc = base;
          rc.apply_override("general.seed=" + std::to_string(seed));
          rc.apply_override("latent_action_learning.latent_action_dim=" + std::to_string(dim));

          const GenConfig g = gen_config_from(rc);
          const fs::path data_dir =
              root / "data" /
              ("s" + std::to_string(seed) + (g.distractors ? "-dist" : "-clean") +
               (g.twins ? "-tw" : ""));
          TrajectoryDataset ds;
          if (fs::exists(data_dir / "manifest.txt")) {
            ds = read_dataset(data_dir);
          } else {
            ds = generate_dataset(g);
            write_dataset(ds, data_dir);
          }

          const TargetSpec spec = parse_target_spec(target);
          const std::unique_ptr<TargetProvider> provider = make_target_provider(spec, ds);
          const LamConfig lc = lam_config_from(rc, provider->is_image());
          const fs::path cell_dir = root / "cells" / cell;
          const TrainLamResult tr = train_lam(ds, lc, *provider, cell_dir / "lam");
          LamCheckpoint lam = load_lam_checkpoint(cell_dir / "lam");

          const NdArray latents = label_latents(ds, lam);
          const BcConfig bc = bc_config_from(rc);
          train_bc(ds, latents, bc, cell_dir / "bc");
          BcCheckpoint bck = load_bc_checkpoint(cell_dir / "bc");

          const DecoderConfig dc = decoder_config_from(rc);
          train_decoder(ds, lam, &bck, dc, cell_dir / "dec");
          DecoderCheckpoint dck = load_decoder_checkpoint(cell_dir / "dec");

          const std::unique_ptr<Policy> pi =
              make_learned_policy(std::move(bck), std::move(dck));
          EvalConfig ec;
          ec.num_episodes = static_cast<int>(rc.get_int("general", "eval_episodes"));
          ec.seed = static_cast<uint64_t>(rc.get_int("general", "eval_seed"));
          const EvalResult er = evaluate_policy(*pi, gen_config_from_manifest(ds.manifest), ec);

          const std::string method = std::string("lapo-") + target_kind_name(spec.kind) + "-d" +
                                     std::to_string(dim) + dist_suffix(ds);
          const std::string task = ds.manifest.get_or("task_text", "");
          std::vector<RunRecord> recs = probe_records(method, task, seed, tr);
          for (const EpisodeResult& ep : er.episodes)
            recs.push_back({method, task, seed, "success", ep.success ? 1.0 : 0.0, ep.episode});
          recs.push_back({method, task, seed, "success_rate", er.success_rate, -1});
          rc.write_snapshot(cell_dir / "resolved_config.ini");
          write_records(rec_path, recs);
          std::cout << cell << ": probe " << tr.probe.final_probe_mse << ", success "
                    << er.success_rate << "\n";
          ++done;
        } catch (const std::exception& e) {
          atomic_write_text(root / "records" / (cell + ".error.txt"), std::string(e.what()) + "\n");
          write_records(rec_path, {{cell, "", seed, "failed", 1.0, -1}});
          std::cout << cell << ": failed (" << e.what() << ")\n";
          ++failed;
        }
      }
    }
  }
  std::cout << done << " cells run, " << skipped << " skipped, " << failed << " failed\n";
}

void cmd_report(const std::string& in_glob, const std::string& out) {
  const std::vector<RunRecord> records = read_record_glob(in_glob);
  const fs::path dir = resolve_out(out);
  write_report(records, dir);
  std::cout << "report over " << records.size() << " records -> " << dir.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent action model pipeline"};
  app.require_subcommand(1);

  CommonArgs gen_a;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic trajectory dataset");
  add_common(gen, gen_a);

  CommonArgs ext_a;
  std::string ext_dataset, ext_vlm, ext_cell = "1", ext_client = "mock";
  auto* ext = app.add_subcommand("extract-embeddings", "extract pooled embeddings for a dataset");
  ext->add_option("--dataset", ext_dataset, "dataset directory")->required();
  ext->add_option("--vlm", ext_vlm, "model id")->required();
  ext->add_option("--cell,--config", ext_cell, "extraction cell name, index, or all");
  ext->add_option("--client", ext_client, "client endpoint (mock, mock:<dim>, batch:<dir>)");
  ext->add_option("--run-config", ext_a.config_file, "config file (INI)");
  ext->add_option("--out,-o", ext_a.out, "store root (default <dataset>/embeddings)");
  ext->add_option("overrides", ext_a.overrides, "key=value config overrides");

  CommonArgs lam_a;
  std::string lam_dataset, lam_target, lam_method;
  auto* lam = app.add_subcommand("train-lam", "train a latent action model");
  lam->add_option("--dataset", lam_dataset, "dataset directory")->required();
  lam->add_option("--target", lam_target,
                  "target spec: pixel | twin | oracle[:dims] | embedding:<store> | "
                  "otter:<store>:<text.arr> | univla[:instruction.arr]")
      ->required();
  lam->add_option("--method", lam_method, "method label for records");
  add_common(lam, lam_a);

  CommonArgs bc_a;
  std::string bc_dataset, bc_lam;
  auto* bc = app.add_subcommand("train-bc", "clone latents into an actor");
  bc->add_option("--dataset", bc_dataset, "dataset directory")->required();
  bc->add_option("--lam", bc_lam, "latent action model checkpoint")->required();
  add_common(bc, bc_a);

  CommonArgs dec_a;
  std::string dec_dataset, dec_lam, dec_actor;
  int dec_labels = 0;
  auto* dec = app.add_subcommand("train-decoder", "train the action decoder");
  dec->add_option("--dataset", dec_dataset, "labeled dataset directory")->required();
  dec->add_option("--lam", dec_lam, "latent action model checkpoint")->required();
  dec->add_option("--actor", dec_actor, "actor checkpoint (for latent_source=actor)");
  dec->add_option("--labels", dec_labels, "labeled trajectory count");
  add_common(dec, dec_a);

  CommonArgs ev_a;
  std::string ev_dataset, ev_actor, ev_decoder, ev_policy = "learned", ev_method;
  std::optional<int> ev_episodes;
  std::optional<int64_t> ev_seed;
  auto* ev = app.add_subcommand("evaluate", "roll a policy out in the environment");
  ev->add_option("--dataset", ev_dataset, "dataset directory fixing the environment")->required();
  ev->add_option("--actor", ev_actor, "actor checkpoint");
  ev->add_option("--decoder", ev_decoder, "decoder checkpoint");
  ev->add_option("--policy", ev_policy, "learned | expert | random");
  ev->add_option("--episodes", ev_episodes, "episode count");
  ev->add_option("--seed", ev_seed, "evaluation seed");
  ev->add_option("--method", ev_method, "method label for records");
  add_common(ev, ev_a);

  CommonArgs sw_a;
  std::string sw_targets, sw_seeds = "0", sw_dims;
  auto* sw = app.add_subcommand("sweep", "run the full pipeline over a grid");
  sw->add_option("--targets", sw_targets, "comma-separated target specs")->required();
  sw->add_option("--seeds", sw_seeds, "comma-separated seeds");
  sw->add_option("--latent-dims", sw_dims, "comma-separated latent dims");
  add_common(sw, sw_a);

  std::string rep_in, rep_out;
  auto* rep = app.add_subcommand("report", "aggregate run records into tables and plots");
  rep->add_option("--in", rep_in, "record file or glob")->required();
  rep->add_option("--out,-o", rep_out, "report directory")->required();

  try {
    app.parse(argc, argv);
    if (gen->parsed()) cmd_gen_data(gen_a);
    if (ext->parsed()) cmd_extract(ext_a, ext_dataset, ext_vlm, ext_cell, ext_client);
    if (lam->parsed()) cmd_train_lam(lam_a, lam_dataset, lam_target, lam_method);
    if (bc->parsed()) cmd_train_bc(bc_a, bc_dataset, bc_lam);
    if (dec->parsed()) cmd_train_decoder(dec_a, dec_dataset, dec_lam, dec_actor, dec_labels);
    if (ev->parsed())
      cmd_evaluate(ev_a, ev_dataset, ev_actor, ev_decoder, ev_policy, ev_episodes, ev_seed,
                   ev_method);
    if (sw->parsed()) cmd_sweep(sw_a, sw_targets, sw_seeds, sw_dims);
    if (rep->parsed()) cmd_report(rep_in, rep_out);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::RequiredError&) {
    std::cerr << app.help();
    return 2;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
