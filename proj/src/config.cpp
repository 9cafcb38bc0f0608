#include "lamkit/config.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include "lamkit/errors.hpp"

namespace lamkit {

namespace {

struct SchemaKey {
  const char* section;
  const char* key;
  const char* dflt;
};

// Key names follow the hyperparameter tables shipped with the original
// training code verbatim; [data] and the few keys marked here as plumbing
// cover what those tables left to the surrounding scripts.
const SchemaKey kSchema[] = {
    {"general", "frame_stack", "4"},
    {"general", "probe_learning_rate", "0.0003"},
    {"general", "disable_distractors", "True"},
    {"general", "seed", "0"},
    {"general", "eval_seed", "0"},
    {"general", "eval_episodes", "50"},

    {"data", "num_trajectories", "512"},
    {"data", "horizon", "64"},
    {"data", "frame_size", "64"},
    {"data", "noise_scale", "0.02"},
    {"data", "action_max", "0.1"},
    {"data", "goal_radius", "0.05"},
    {"data", "save_twins", "False"},
    {"data", "couple_distractors", "False"},
    {"data", "task_text", "reach the green marker"},

    {"latent_action_learning", "latent_action_dim", "128"},
    {"latent_action_learning", "backbone", "conv_residual"},
    {"latent_action_learning", "idm_encoder_scale", "5"},
    {"latent_action_learning", "idm_encoder_num_res_blocks", "1"},
    {"latent_action_learning", "idm_encoder_channels", "[16, 16, 32, 32, 128, 128, 256]"},
    {"latent_action_learning", "fdm_encoder_scale", "1"},
    {"latent_action_learning", "fdm_encoder_num_res_blocks", "1"},
    {"latent_action_learning", "fdm_encoder_channels", "[16, 16, 32, 32, 128, 128, 256]"},
    {"latent_action_learning", "patch_size", "32"},
    {"latent_action_learning", "fdm_use_cross_attn", "False"},
    {"latent_action_learning", "idm_hidden_dim", "896"},
    {"latent_action_learning", "idm_num_layers", "4"},
    {"latent_action_learning", "idm_num_heads", "16"},
    {"latent_action_learning", "fdm_hidden_dim", "1024"},
    {"latent_action_learning", "fdm_num_layers", "4"},
    {"latent_action_learning", "fdm_num_heads", "8"},
    {"latent_action_learning", "fdm_expand", "4"},
    {"latent_action_learning", "normalize_qk", "False"},
    {"latent_action_learning", "pre_norm", "True"},
    {"latent_action_learning", "num_epochs", "-"},
    {"latent_action_learning", "batch_size", "64"},
    {"latent_action_learning", "learning_rate", "0.0001"},
    {"latent_action_learning", "weight_decay", "0.0"},
    {"latent_action_learning", "warmup_epochs", "1"},
    {"latent_action_learning", "grad_norm", "-"},
    {"latent_action_learning", "probe_holdout_fraction", "0.05"},
    {"latent_action_learning", "probe_eval_every", "100"},

    {"latent_behavior_cloning", "num_epochs", "10"},
    {"latent_behavior_cloning", "batch_size", "64"},
    {"latent_behavior_cloning", "learning_rate", "0.0001"},
    {"latent_behavior_cloning", "weight_decay", "0.0"},
    {"latent_behavior_cloning", "warmup_epochs", "0"},
    {"latent_behavior_cloning", "encoder_scale", "5"},
    {"latent_behavior_cloning", "encoder_num_res_blocks", "1"},
    {"latent_behavior_cloning", "encoder_channels", "[16, 16, 32, 32, 128, 128, 256]"},

    {"latent_actions_decoding", "total_updates", "100000"},
    {"latent_actions_decoding", "batch_size", "64"},
    {"latent_actions_decoding", "learning_rate", "0.001"},
    {"latent_actions_decoding", "hidden_dim", "128"},
    {"latent_actions_decoding", "num_labeled_trajectories", "16"},
    {"latent_actions_decoding", "latent_source", "idm"},

    {"vlm", "type", "mock"},
    {"vlm", "prompt", "1"},
    {"vlm", "layer", "last"},
    {"vlm", "target", "prompt"},
    {"vlm", "reduce_strategy", "mean"},
    {"vlm", "max_new_tokens", "32"},
    {"vlm", "batch_size", "16"},
    {"vlm", "retries", "3"},
    {"vlm", "backoff_ms", "100"},
};

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

[[noreturn]] void bad_value(const std::string& section, const std::string& key,
                            const char* want, const std::string& got) {
  throw ConfigError("config key " + section + "." + key + ": expected " + want + ", got \"" +
                    got + "\"");
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig rc;
  for (const SchemaKey& k : kSchema) rc.entries_.push_back({k.section, k.key, k.dflt});
  return rc;
}

RunConfig::Entry* RunConfig::find(const std::string& section, const std::string& key) {
  for (Entry& e : entries_)
    if (e.section == section && e.key == key) return &e;
  return nullptr;
}

const RunConfig::Entry* RunConfig::find(const std::string& section, const std::string& key) const {
  for (const Entry& e : entries_)
    if (e.section == section && e.key == key) return &e;
  return nullptr;
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  std::stringstream ss(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ParseError(path.string() + ":" + std::to_string(lineno) + ": malformed section header");
      section = trim(t.substr(1, t.size() - 2));
      bool known = false;
      for (const SchemaKey& k : kSchema)
        if (section == k.section) known = true;
      if (!known) throw ConfigError("unknown config section: [" + section + "]");
      continue;
    }
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (section.empty()) throw ConfigError("config key " + key + " appears before any section");
    Entry* e = find(section, key);
    if (e == nullptr) throw ConfigError("unknown config key: " + key + " (in [" + section + "])");
    e->value = value;
  }
}

void RunConfig::apply_override(const std::string& kv) {
  const size_t eq = kv.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must look like key=value: " + kv);
  std::string key = trim(kv.substr(0, eq));
  const std::string value = trim(kv.substr(eq + 1));
  const size_t dot = key.find('.');
  if (dot != std::string::npos) {
    const std::string section = key.substr(0, dot);
    key = key.substr(dot + 1);
    Entry* e = find(section, key);
    if (e == nullptr) throw ConfigError("unknown config key: " + section + "." + key);
    e->value = value;
    return;
  }
  std::vector<Entry*> hits;
  for (Entry& e : entries_)
    if (e.key == key) hits.push_back(&e);
  if (hits.empty()) throw ConfigError("unknown config key: " + key);
  if (hits.size() > 1) {
    std::string msg = "ambiguous config key: " + key + " (use one of";
    for (Entry* e : hits) msg += " " + e->section + "." + key;
    throw ConfigError(msg + ")");
  }
  hits[0]->value = value;
}

const std::string& RunConfig::get(const std::string& section, const std::string& key) const {
  const Entry* e = find(section, key);
  if (e == nullptr) throw ConfigError("unknown config key: " + section + "." + key);
  return e->value;
}

int64_t RunConfig::get_int(const std::string& section, const std::string& key) const {
  const std::string& v = get(section, key);
  try {
    size_t pos = 0;
    const int64_t n = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    bad_value(section, key, "integer", v);
  }
}

double RunConfig::get_real(const std::string& section, const std::string& key) const {
  const std::string& v = get(section, key);
  try {
    size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    bad_value(section, key, "number", v);
  }
}

bool RunConfig::get_bool(const std::string& section, const std::string& key) const {
  const std::string& v = get(section, key);
  if (v == "True" || v == "true") return true;
  if (v == "False" || v == "false") return false;
  bad_value(section, key, "True or False", v);
}

std::vector<int> RunConfig::get_int_list(const std::string& section, const std::string& key) const {
  std::string v = get(section, key);
  if (!v.empty() && v.front() == '[' && v.back() == ']') v = v.substr(1, v.size() - 2);
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string t = trim(item);
    if (t.empty()) continue;
    try {
      size_t pos = 0;
      out.push_back(std::stoi(t, &pos));
      if (pos != t.size()) throw std::invalid_argument(t);
    } catch (const std::exception&) {
      bad_value(section, key, "integer list like [16, 32]", get(section, key));
    }
  }
  if (out.empty()) bad_value(section, key, "integer list like [16, 32]", get(section, key));
  return out;
}

std::optional<double> RunConfig::get_opt_real(const std::string& section,
                                              const std::string& key) const {
  if (get(section, key) == "-") return std::nullopt;
  return get_real(section, key);
}

std::optional<int64_t> RunConfig::get_opt_int(const std::string& section,
                                              const std::string& key) const {
  if (get(section, key) == "-") return std::nullopt;
  return get_int(section, key);
}

std::string RunConfig::serialized() const {
  std::string out;
  std::string section;
  for (const Entry& e : entries_) {
    if (e.section != section) {
      if (!out.empty()) out += "\n";
      out += "[" + e.section + "]\n";
      section = e.section;
    }
    out += e.key + " = " + e.value + "\n";
  }
  return out;
}

void RunConfig::write_snapshot(const std::filesystem::path& path) const {
  atomic_write_text(path, serialized());
}

GenConfig gen_config_from(const RunConfig& rc) {
  GenConfig g;
  g.num_trajectories = static_cast<int>(rc.get_int("data", "num_trajectories"));
  g.horizon = static_cast<int>(rc.get_int("data", "horizon"));
  g.frame_size = static_cast<int>(rc.get_int("data", "frame_size"));
  g.distractors = !rc.get_bool("general", "disable_distractors");
  g.twins = rc.get_bool("data", "save_twins");
  g.couple_distractors = rc.get_bool("data", "couple_distractors");
  g.noise_scale = static_cast<float>(rc.get_real("data", "noise_scale"));
  g.action_max = static_cast<float>(rc.get_real("data", "action_max"));
  g.goal_radius = static_cast<float>(rc.get_real("data", "goal_radius"));
  g.seed = static_cast<uint64_t>(rc.get_int("general", "seed"));
  g.task_text = rc.get("data", "task_text");
  return g;
}

LamConfig lam_config_from(const RunConfig& rc, bool image_target) {
  const std::string s = "latent_action_learning";
  LamConfig c;
  c.latent_action_dim = static_cast<int>(rc.get_int(s, "latent_action_dim"));
  c.frame_stack = static_cast<int>(rc.get_int("general", "frame_stack"));
  c.backbone = parse_backbone(rc.get(s, "backbone"));
  c.idm_encoder_scale = static_cast<int>(rc.get_int(s, "idm_encoder_scale"));
  c.idm_encoder_res_blocks = static_cast<int>(rc.get_int(s, "idm_encoder_num_res_blocks"));
  c.idm_encoder_channels = rc.get_int_list(s, "idm_encoder_channels");
  c.fdm_encoder_scale = static_cast<int>(rc.get_int(s, "fdm_encoder_scale"));
  c.fdm_encoder_res_blocks = static_cast<int>(rc.get_int(s, "fdm_encoder_num_res_blocks"));
  c.fdm_encoder_channels = rc.get_int_list(s, "fdm_encoder_channels");
  c.patch_size = static_cast<int>(rc.get_int(s, "patch_size"));
  c.fdm_use_cross_attn = rc.get_bool(s, "fdm_use_cross_attn");
  c.idm_hidden_dim = static_cast<int>(rc.get_int(s, "idm_hidden_dim"));
  c.idm_num_layers = static_cast<int>(rc.get_int(s, "idm_num_layers"));
  c.idm_num_heads = static_cast<int>(rc.get_int(s, "idm_num_heads"));
  c.normalize_qk = rc.get_bool(s, "normalize_qk");
  c.pre_norm = rc.get_bool(s, "pre_norm");
  c.fdm_hidden_dim = static_cast<int>(rc.get_int(s, "fdm_hidden_dim"));
  c.fdm_num_layers = static_cast<int>(rc.get_int(s, "fdm_num_layers"));
  c.fdm_expand = static_cast<int>(rc.get_int(s, "fdm_expand"));
  const std::optional<int64_t> epochs = rc.get_opt_int(s, "num_epochs");
  c.num_epochs = epochs ? static_cast<int>(*epochs) : (image_target ? 10 : 200);
  c.batch_size = static_cast<int>(rc.get_int(s, "batch_size"));
  c.learning_rate = rc.get_real(s, "learning_rate");
  c.weight_decay = rc.get_real(s, "weight_decay");
  c.warmup_epochs = rc.get_real(s, "warmup_epochs");
  c.grad_norm = rc.get_opt_real(s, "grad_norm");
  c.probe_learning_rate = rc.get_real("general", "probe_learning_rate");
  c.holdout_fraction = rc.get_real(s, "probe_holdout_fraction");
  c.probe_eval_every = static_cast<int>(rc.get_int(s, "probe_eval_every"));
  c.seed = static_cast<uint64_t>(rc.get_int("general", "seed"));
  return c;
}

BcConfig bc_config_from(const RunConfig& rc) {
  const std::string s = "latent_behavior_cloning";
  BcConfig c;
  c.frame_stack = static_cast<int>(rc.get_int("general", "frame_stack"));
  c.encoder_scale = static_cast<int>(rc.get_int(s, "encoder_scale"));
  c.encoder_res_blocks = static_cast<int>(rc.get_int(s, "encoder_num_res_blocks"));
  c.encoder_channels = rc.get_int_list(s, "encoder_channels");
  c.num_epochs = static_cast<int>(rc.get_int(s, "num_epochs"));
  c.batch_size = static_cast<int>(rc.get_int(s, "batch_size"));
  c.learning_rate = rc.get_real(s, "learning_rate");
  c.weight_decay = rc.get_real(s, "weight_decay");
  c.warmup_epochs = rc.get_real(s, "warmup_epochs");
  c.seed = static_cast<uint64_t>(rc.get_int("general", "seed"));
  return c;
}

DecoderConfig decoder_config_from(const RunConfig& rc) {
  const std::string s = "latent_actions_decoding";
  DecoderConfig c;
  c.hidden_dim = static_cast<int>(rc.get_int(s, "hidden_dim"));
  c.num_updates = static_cast<int>(rc.get_int(s, "total_updates"));
  c.batch_size = static_cast<int>(rc.get_int(s, "batch_size"));
  c.learning_rate = rc.get_real(s, "learning_rate");
  c.num_labeled = static_cast<int>(rc.get_int(s, "num_labeled_trajectories"));
  c.latent_source = parse_latent_source(rc.get(s, "latent_source"));
  c.seed = static_cast<uint64_t>(rc.get_int("general", "seed"));
  return c;
}

ExtractionConfig extraction_config_from(const RunConfig& rc) {
  ExtractionConfig c;
  c.vlm_id = rc.get("vlm", "type");
  c.prompt_id = static_cast<int>(rc.get_int("vlm", "prompt"));
  if (c.prompt_id < 1 || c.prompt_id > num_prompt_templates())
    throw ConfigError("config key vlm.prompt: expected 1.." +
                      std::to_string(num_prompt_templates()) + ", got " +
                      std::to_string(c.prompt_id));
  c.layer = parse_layer(rc.get("vlm", "layer"));
  c.source = parse_source(rc.get("vlm", "target"));
  c.pooling = parse_pooling(rc.get("vlm", "reduce_strategy"));
  return c;
}

ExtractOptions extract_options_from(const RunConfig& rc) {
  ExtractOptions o;
  o.batch_size = static_cast<int>(rc.get_int("vlm", "batch_size"));
  o.max_new_tokens = static_cast<int>(rc.get_int("vlm", "max_new_tokens"));
  o.retries = static_cast<int>(rc.get_int("vlm", "retries"));
  o.backoff_ms = static_cast<int>(rc.get_int("vlm", "backoff_ms"));
  return o;
}

}  // namespace lamkit
