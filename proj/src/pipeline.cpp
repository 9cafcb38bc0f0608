#include "lamkit/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "lamkit/errors.hpp"

namespace lamkit {

namespace fs = std::filesystem;

namespace {

constexpr uint64_t kInitTag = 0x696e6974;    // "init"
constexpr uint64_t kOrderTag = 0x6f72646572; // "order"
constexpr uint64_t kEvalTag = 0x6576616c;    // "eval"
constexpr uint64_t kRandTag = 0x726e64;      // "rnd"

std::vector<int> scaled(const std::vector<int>& ch, int scale) {
  std::vector<int> out;
  out.reserve(ch.size());
  for (int c : ch) out.push_back(c * scale);
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ParseError("bad integer list entry: " + item);
    }
  }
  return out;
}

std::string sanitize_param_name(const std::string& name) {
  std::string out = name;
  size_t pos = 0;
  while ((pos = out.find('/', pos)) != std::string::npos) out.replace(pos, 1, "__");
  return out;
}

void write_params(const nn::ParamStore& ps, const fs::path& dir) {
  fs::create_directories(dir / "params");
  for (const nn::Param& p : ps.all()) {
    NdArray a = make_array(Dtype::f32, p.shape);
    std::memcpy(a.data.data(), p.value.data(), p.value.size() * sizeof(float));
    write_array(dir / "params" / (sanitize_param_name(p.name) + ".arr"), a);
  }
}

void read_params(nn::ParamStore& ps, const fs::path& dir) {
  for (nn::Param& p : ps.all()) {
    const NdArray a = read_array(dir / "params" / (sanitize_param_name(p.name) + ".arr"));
    if (a.dims != p.shape)
      throw CorruptionError("checkpoint parameter " + p.name + " has the wrong shape");
    std::memcpy(p.value.data(), a.data.data(), p.value.size() * sizeof(float));
  }
}

// Frame stack ending at t, without the next frame; episodes pad by
// repeating their first frame, exactly as during training.
void fill_policy_stack(const TrajectoryDataset& ds, int64_t n, int64_t t, int frame_stack,
                       float* stack_chw) {
  const int size = static_cast<int>(ds.frame_size());
  const int64_t fnum = 3LL * size * size;
  for (int i = 0; i < frame_stack; ++i) {
    int64_t idx = t - frame_stack + 1 + i;
    if (idx < 0) idx = 0;
    normalize_frame_chw(ds.frame(n, idx), size, stack_chw + i * fnum);
  }
}

}  // namespace

NdArray label_latents(const TrajectoryDataset& ds, LamCheckpoint& ckpt) {
  LamModel& model = *ckpt.model;
  if (model.frame_size() != static_cast<int>(ds.frame_size()))
    throw ConfigError("checkpoint frame size does not match the dataset");
  const int64_t n_traj = ds.num_trajectories();
  const int64_t horizon = ds.horizon();
  const int latent = model.config().latent_action_dim;
  const float* instr = ckpt.instr_dim > 0 ? ckpt.instruction.data() : nullptr;

  NdArray out = make_array(Dtype::f32, {n_traj, horizon, latent});
  float* dst = reinterpret_cast<float*>(out.data.data());
  std::vector<float> stack(static_cast<size_t>(model.stack_numel()));
  for (int64_t n = 0; n < n_traj; ++n) {
    for (int64_t t = 0; t < horizon; ++t) {
      fill_stack(ds, n, t, model.config().frame_stack, stack.data());
      model.encode(stack.data(), instr, dst + (n * horizon + t) * latent);
    }
  }
  return out;
}

BcModel::BcModel(const BcConfig& cfg, int frame_size, int latent_dim, uint64_t init_seed)
    : cfg_(cfg), frame_size_(frame_size), latent_dim_(latent_dim) {
  if (cfg.frame_stack < 1) throw ConfigError("frame_stack must be at least 1");
  if (latent_dim < 1) throw ConfigError("latent dim must be positive");
  if (cfg.encoder_scale < 1) throw ConfigError("encoder scale must be at least 1");
  if (cfg.encoder_channels.empty()) throw ConfigError("encoder channel list must not be empty");
  Rng init{init_seed, kInitTag};
  enc_ = std::make_unique<nn::ConvEncoder>(params_, "bc/enc", cfg.frame_stack * 3, frame_size,
                                           scaled(cfg.encoder_channels, cfg.encoder_scale),
                                           cfg.encoder_res_blocks, init);
  head_w_ = &params_.add("bc/head_w", {latent_dim, enc_->flat_dim()});
  nn::init_kaiming(*head_w_, enc_->flat_dim(), init);
  head_b_ = &params_.add("bc/head_b", {latent_dim});
  nn::init_zeros(*head_b_);
}

int64_t BcModel::stack_numel() const {
  return static_cast<int64_t>(cfg_.frame_stack) * 3 * frame_size_ * frame_size_;
}

int BcModel::forward(nn::Tape& t, const float* stack_chw) {
  const int x = t.constant(stack_chw, stack_numel());
  const nn::ConvEncoder::Result r = enc_->forward(t, x);
  return t.linear(r.flat, *head_w_, head_b_, 1, enc_->flat_dim(), latent_dim_);
}

void BcModel::predict(const float* stack_chw, float* z_out) {
  predict_tape_.reset();
  const int z = forward(predict_tape_, stack_chw);
  std::memcpy(z_out, predict_tape_.val(z), sizeof(float) * static_cast<size_t>(latent_dim_));
}

BcTrainResult train_bc(const TrajectoryDataset& ds, const NdArray& latents, const BcConfig& cfg,
                       const fs::path& out_dir) {
  if (cfg.num_epochs < 1) throw ConfigError("num_epochs must be at least 1");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  const int64_t n_traj = ds.num_trajectories();
  const int64_t horizon = ds.horizon();
  if (latents.dtype != Dtype::f32 || latents.dims.size() != 3 || latents.dims[0] != n_traj ||
      latents.dims[1] != horizon || latents.dims[2] < 1)
    throw ConfigError("latents shape does not match the dataset");
  const int latent = static_cast<int>(latents.dims[2]);
  const int size = static_cast<int>(ds.frame_size());
  const float* lat = latents.f32().data();

  BcModel model(cfg, size, latent, cfg.seed);

  std::vector<nn::Param*> all;
  for (nn::Param& p : model.params().all()) all.push_back(&p);
  const int64_t count = n_traj * horizon;
  const int64_t steps_per_epoch = (count + cfg.batch_size - 1) / cfg.batch_size;
  nn::AdamConfig ac;
  ac.lr = cfg.learning_rate;
  ac.weight_decay = cfg.weight_decay;
  ac.grad_clip = cfg.grad_norm;
  ac.warmup_steps = std::llround(cfg.warmup_epochs * static_cast<double>(steps_per_epoch));
  nn::Adam opt(all, ac);

  std::vector<float> stack(static_cast<size_t>(model.stack_numel()));
  std::vector<int64_t> order(static_cast<size_t>(count));
  nn::Tape tape;
  BcTrainResult result;
  double epoch_loss = 0.0;
  int64_t epoch_count = 0;
  int64_t step = 0;

  for (int64_t epoch = 0; epoch < cfg.num_epochs; ++epoch) {
    for (int64_t i = 0; i < count; ++i) order[static_cast<size_t>(i)] = i;
    Rng shuffle{cfg.seed, kOrderTag, static_cast<uint64_t>(epoch)};
    for (int64_t i = count - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(shuffle.below(static_cast<uint64_t>(i + 1)))]);
    epoch_loss = 0.0;
    epoch_count = 0;
    for (int64_t start = 0; start < count; start += cfg.batch_size) {
      const int bs = static_cast<int>(std::min<int64_t>(cfg.batch_size, count - start));
      for (int k = 0; k < bs; ++k) {
        const int64_t idx = order[static_cast<size_t>(start + k)];
        const int64_t n = idx / horizon;
        const int64_t t = idx % horizon;
        fill_policy_stack(ds, n, t, cfg.frame_stack, stack.data());
        tape.reset();
        const int pred = model.forward(tape, stack.data());
        const int loss = tape.mse(pred, lat + (n * horizon + t) * latent, latent);
        const double lv = tape.val(loss)[0];
        if (!std::isfinite(lv)) {
          save_bc_checkpoint(model, step, out_dir / "diagnostic");
          throw DivergenceError("cloning loss became non-finite at step " + std::to_string(step) +
                                "; diagnostic checkpoint written");
        }
        tape.backward(loss, 1.0f / static_cast<float>(bs));
        epoch_loss += lv;
        ++epoch_count;
      }
      opt.step();
      ++step;
    }
  }
  result.final_train_loss = epoch_count > 0 ? epoch_loss / static_cast<double>(epoch_count) : 0.0;
  result.steps = step;
  save_bc_checkpoint(model, step, out_dir);
  return result;
}

void save_bc_checkpoint(BcModel& model, int64_t steps, const fs::path& dir) {
  fs::create_directories(dir);
  const BcConfig& c = model.config();
  Manifest m;
  m.set_int("format_version", 1);
  m.set("kind", "bc");
  m.set_int("frame_stack", c.frame_stack);
  m.set_int("encoder_scale", c.encoder_scale);
  m.set_int("encoder_res_blocks", c.encoder_res_blocks);
  m.set("encoder_channels", join_ints(c.encoder_channels));
  m.set_int("num_epochs", c.num_epochs);
  m.set_int("batch_size", c.batch_size);
  m.set_real("learning_rate", c.learning_rate);
  m.set_real("weight_decay", c.weight_decay);
  m.set_real("warmup_epochs", c.warmup_epochs);
  if (c.grad_norm)
    m.set_real("grad_norm", *c.grad_norm);
  else
    m.set("grad_norm", "-");
  m.set_int("seed", static_cast<int64_t>(c.seed));
  m.set_int("frame_size", model.frame_size());
  m.set_int("latent_dim", model.latent_dim());
  m.set_int("steps", steps);
  write_params(model.params(), dir);
  write_manifest(dir / "ckpt_manifest.txt", m);
}

BcCheckpoint load_bc_checkpoint(const fs::path& dir) {
  const Manifest m = read_manifest(dir / "ckpt_manifest.txt");
  if (m.get_int("format_version") != 1)
    throw VersionError("unsupported checkpoint format_version " + m.get("format_version"));
  if (m.get("kind") != "bc") throw CorruptionError("not a behavior cloning checkpoint");
  BcCheckpoint ck;
  BcConfig c;
  c.frame_stack = static_cast<int>(m.get_int("frame_stack"));
  c.encoder_scale = static_cast<int>(m.get_int("encoder_scale"));
  c.encoder_res_blocks = static_cast<int>(m.get_int("encoder_res_blocks"));
  c.encoder_channels = split_ints(m.get("encoder_channels"));
  c.num_epochs = static_cast<int>(m.get_int("num_epochs"));
  c.batch_size = static_cast<int>(m.get_int("batch_size"));
  c.learning_rate = m.get_real("learning_rate");
  c.weight_decay = m.get_real("weight_decay");
  c.warmup_epochs = m.get_real("warmup_epochs");
  if (m.get("grad_norm") != "-") c.grad_norm = m.get_real("grad_norm");
  c.seed = static_cast<uint64_t>(m.get_int("seed"));
  ck.config = c;
  ck.frame_size = static_cast<int>(m.get_int("frame_size"));
  ck.latent_dim = static_cast<int>(m.get_int("latent_dim"));
  ck.steps = m.get_int("steps");
  ck.model = std::make_unique<BcModel>(c, ck.frame_size, ck.latent_dim, c.seed);
  read_params(ck.model->params(), dir);
  return ck;
}

const char* latent_source_name(LatentSource s) {
  return s == LatentSource::idm ? "idm" : "actor";
}

LatentSource parse_latent_source(const std::string& s) {
  if (s == "idm") return LatentSource::idm;
  if (s == "actor") return LatentSource::actor;
  throw ConfigError("unknown latent source: " + s);
}

MlpDecoder::MlpDecoder(int latent_dim, int hidden_dim, int action_dim, uint64_t init_seed)
    : latent_dim_(latent_dim), hidden_dim_(hidden_dim), action_dim_(action_dim) {
  if (latent_dim < 1 || hidden_dim < 1 || action_dim < 1)
    throw ConfigError("decoder dims must be positive");
  Rng init{init_seed, kInitTag};
  w1_ = &params_.add("dec/w1", {hidden_dim, latent_dim});
  nn::init_kaiming(*w1_, latent_dim, init);
  b1_ = &params_.add("dec/b1", {hidden_dim});
  nn::init_zeros(*b1_);
  w2_ = &params_.add("dec/w2", {hidden_dim, hidden_dim});
  nn::init_kaiming(*w2_, hidden_dim, init);
  b2_ = &params_.add("dec/b2", {hidden_dim});
  nn::init_zeros(*b2_);
  w3_ = &params_.add("dec/w3", {action_dim, hidden_dim});
  nn::init_kaiming(*w3_, hidden_dim, init);
  b3_ = &params_.add("dec/b3", {action_dim});
  nn::init_zeros(*b3_);
}

int MlpDecoder::forward(nn::Tape& t, const float* z) {
  int h = t.constant(z, latent_dim_);
  h = t.relu(t.linear(h, *w1_, b1_, 1, latent_dim_, hidden_dim_));
  h = t.relu(t.linear(h, *w2_, b2_, 1, hidden_dim_, hidden_dim_));
  return t.linear(h, *w3_, b3_, 1, hidden_dim_, action_dim_);
}

void MlpDecoder::predict(const float* z, float* action) {
  predict_tape_.reset();
  const int a = forward(predict_tape_, z);
  std::memcpy(action, predict_tape_.val(a), sizeof(float) * static_cast<size_t>(action_dim_));
}

DecoderTrainResult train_decoder(const TrajectoryDataset& labeled, LamCheckpoint& lam,
                                 BcCheckpoint* actor, const DecoderConfig& cfg,
                                 const fs::path& out_dir) {
  if (cfg.num_updates < 1) throw ConfigError("num_updates must be at least 1");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (cfg.num_labeled < 1) throw ConfigError("num_labeled must be at least 1");
  if (cfg.num_labeled > labeled.num_trajectories())
    throw ConfigError("num_labeled is " + std::to_string(cfg.num_labeled) +
                      " but the labeled dataset has only " +
                      std::to_string(labeled.num_trajectories()) + " trajectories");
  if (cfg.latent_source == LatentSource::actor && actor == nullptr)
    throw ConfigError("latent_source actor needs a behavior cloning checkpoint");
  const int size = static_cast<int>(labeled.frame_size());
  if (lam.model->frame_size() != size)
    throw ConfigError("checkpoint frame size does not match the labeled dataset");
  if (cfg.latent_source == LatentSource::actor && actor->frame_size != size)
    throw ConfigError("actor frame size does not match the labeled dataset");

  const int latent = cfg.latent_source == LatentSource::idm ? lam.config.latent_action_dim
                                                            : actor->latent_dim;
  const int action_dim = static_cast<int>(labeled.action_dim());
  const int64_t horizon = labeled.horizon();
  const int64_t count = static_cast<int64_t>(cfg.num_labeled) * horizon;

  // Latents for every labeled transition, computed once up front.
  std::vector<float> zs(static_cast<size_t>(count) * latent);
  if (cfg.latent_source == LatentSource::idm) {
    LamModel& model = *lam.model;
    const float* instr = lam.instr_dim > 0 ? lam.instruction.data() : nullptr;
    std::vector<float> stack(static_cast<size_t>(model.stack_numel()));
    for (int64_t n = 0; n < cfg.num_labeled; ++n)
      for (int64_t t = 0; t < horizon; ++t) {
        fill_stack(labeled, n, t, model.config().frame_stack, stack.data());
        model.encode(stack.data(), instr, zs.data() + (n * horizon + t) * latent);
      }
  } else {
    BcModel& model = *actor->model;
    std::vector<float> stack(static_cast<size_t>(model.stack_numel()));
    for (int64_t n = 0; n < cfg.num_labeled; ++n)
      for (int64_t t = 0; t < horizon; ++t) {
        fill_policy_stack(labeled, n, t, model.config().frame_stack, stack.data());
        model.predict(stack.data(), zs.data() + (n * horizon + t) * latent);
      }
  }

  MlpDecoder model(latent, cfg.hidden_dim, action_dim, cfg.seed);
  std::vector<nn::Param*> all;
  for (nn::Param& p : model.params().all()) all.push_back(&p);
  nn::AdamConfig ac;
  ac.lr = cfg.learning_rate;
  nn::Adam opt(all, ac);

  nn::Tape tape;
  Rng pick{cfg.seed, kOrderTag};
  const size_t window = static_cast<size_t>(std::min<int64_t>(100, cfg.num_updates));
  std::vector<double> recent(window, 0.0);
  int64_t step = 0;
  for (int u = 0; u < cfg.num_updates; ++u) {
    double batch_loss = 0.0;
    for (int k = 0; k < cfg.batch_size; ++k) {
      const int64_t idx = static_cast<int64_t>(pick.below(static_cast<uint64_t>(count)));
      const int64_t n = idx / horizon;
      const int64_t t = idx % horizon;
      tape.reset();
      const int pred = model.forward(tape, zs.data() + idx * latent);
      const int loss = tape.mse(pred, labeled.action(n, t), action_dim);
      const double lv = tape.val(loss)[0];
      if (!std::isfinite(lv)) {
        save_decoder_checkpoint(model, cfg, step, out_dir / "diagnostic");
        throw DivergenceError("decoder loss became non-finite at update " + std::to_string(u) +
                              "; diagnostic checkpoint written");
      }
      tape.backward(loss, 1.0f / static_cast<float>(cfg.batch_size));
      batch_loss += lv;
    }
    opt.step();
    ++step;
    recent[static_cast<size_t>(u) % window] = batch_loss / cfg.batch_size;
  }
  DecoderTrainResult result;
  result.steps = step;
  double acc = 0.0;
  for (double v : recent) acc += v;
  result.final_train_loss = acc / static_cast<double>(window);
  save_decoder_checkpoint(model, cfg, step, out_dir);
  return result;
}

void save_decoder_checkpoint(MlpDecoder& model, const DecoderConfig& cfg, int64_t steps,
                             const fs::path& dir) {
  fs::create_directories(dir);
  Manifest m;
  m.set_int("format_version", 1);
  m.set("kind", "decoder");
  m.set_int("hidden_dim", cfg.hidden_dim);
  m.set_int("num_updates", cfg.num_updates);
  m.set_int("batch_size", cfg.batch_size);
  m.set_real("learning_rate", cfg.learning_rate);
  m.set_int("num_labeled", cfg.num_labeled);
  m.set("latent_source", latent_source_name(cfg.latent_source));
  m.set_int("seed", static_cast<int64_t>(cfg.seed));
  m.set_int("latent_dim", model.latent_dim());
  m.set_int("action_dim", model.action_dim());
  m.set_int("steps", steps);
  write_params(model.params(), dir);
  write_manifest(dir / "ckpt_manifest.txt", m);
}

DecoderCheckpoint load_decoder_checkpoint(const fs::path& dir) {
  const Manifest m = read_manifest(dir / "ckpt_manifest.txt");
  if (m.get_int("format_version") != 1)
    throw VersionError("unsupported checkpoint format_version " + m.get("format_version"));
  if (m.get("kind") != "decoder") throw CorruptionError("not an action decoder checkpoint");
  DecoderCheckpoint ck;
  DecoderConfig c;
  c.hidden_dim = static_cast<int>(m.get_int("hidden_dim"));
  c.num_updates = static_cast<int>(m.get_int("num_updates"));
  c.batch_size = static_cast<int>(m.get_int("batch_size"));
  c.learning_rate = m.get_real("learning_rate");
  c.num_labeled = static_cast<int>(m.get_int("num_labeled"));
  c.latent_source = parse_latent_source(m.get("latent_source"));
  c.seed = static_cast<uint64_t>(m.get_int("seed"));
  ck.config = c;
  ck.latent_dim = static_cast<int>(m.get_int("latent_dim"));
  ck.action_dim = static_cast<int>(m.get_int("action_dim"));
  ck.steps = m.get_int("steps");
  ck.model = std::make_unique<MlpDecoder>(ck.latent_dim, c.hidden_dim, ck.action_dim, c.seed);
  read_params(ck.model->params(), dir);
  return ck;
}

namespace {

class LearnedPolicy final : public Policy {
 public:
  LearnedPolicy(BcCheckpoint bc, DecoderCheckpoint dec)
      : bc_(std::move(bc)), dec_(std::move(dec)) {
    if (bc_.latent_dim != dec_.latent_dim)
      throw ConfigError("actor latent dim " + std::to_string(bc_.latent_dim) +
                        " does not match decoder latent dim " + std::to_string(dec_.latent_dim));
    const int k = bc_.config.frame_stack;
    const int64_t fnum = 3LL * bc_.frame_size * bc_.frame_size;
    stack_.resize(static_cast<size_t>(k) * fnum);
    z_.resize(static_cast<size_t>(bc_.latent_dim));
    raw_.resize(static_cast<size_t>(dec_.action_dim));
  }

  void reset(uint64_t) override { history_.clear(); }

  void act(const uint8_t* frame, const EnvState&, const EnvConfig& cfg, float* action) override {
    const int size = bc_.frame_size;
    const int64_t fnum = 3LL * size * size;
    history_.emplace_back(static_cast<size_t>(fnum));
    normalize_frame_chw(frame, size, history_.back().data());
    const int k = bc_.config.frame_stack;
    const int64_t have = static_cast<int64_t>(history_.size());
    for (int i = 0; i < k; ++i) {
      int64_t idx = have - k + i;
      if (idx < 0) idx = 0;
      std::memcpy(stack_.data() + i * fnum, history_[static_cast<size_t>(idx)].data(),
                  sizeof(float) * static_cast<size_t>(fnum));
    }
    bc_.model->predict(stack_.data(), z_.data());
    dec_.model->predict(z_.data(), raw_.data());
    for (int d = 0; d < dec_.action_dim; ++d)
      action[d] = std::clamp(raw_[static_cast<size_t>(d)], -cfg.action_max, cfg.action_max);
  }

 private:
  BcCheckpoint bc_;
  DecoderCheckpoint dec_;
  std::vector<std::vector<float>> history_;
  std::vector<float> stack_, z_, raw_;
};

class ExpertPolicy final : public Policy {
 public:
  explicit ExpertPolicy(float noise_scale) : noise_scale_(noise_scale) {}
  void reset(uint64_t) override {}
  bool needs_frames() const override { return false; }
  void act(const uint8_t*, const EnvState& s, const EnvConfig& cfg, float* action) override {
    const std::array<float, 2> a = scripted_expert(s, noise_scale_, cfg);
    action[0] = a[0];
    action[1] = a[1];
  }

 private:
  float noise_scale_;
};

class RandomPolicy final : public Policy {
 public:
  explicit RandomPolicy(uint64_t seed) : seed_(seed), rng_(seed) {}
  void reset(uint64_t episode_seed) override { rng_ = Rng{seed_, kRandTag, episode_seed}; }
  bool needs_frames() const override { return false; }
  void act(const uint8_t*, const EnvState&, const EnvConfig& cfg, float* action) override {
    action[0] = static_cast<float>(rng_.uniform(-cfg.action_max, cfg.action_max));
    action[1] = static_cast<float>(rng_.uniform(-cfg.action_max, cfg.action_max));
  }

 private:
  uint64_t seed_;
  Rng rng_;
};

}  // namespace

std::unique_ptr<Policy> make_learned_policy(BcCheckpoint bc, DecoderCheckpoint dec) {
  return std::make_unique<LearnedPolicy>(std::move(bc), std::move(dec));
}

std::unique_ptr<Policy> make_expert_policy(float noise_scale) {
  return std::make_unique<ExpertPolicy>(noise_scale);
}

std::unique_ptr<Policy> make_random_policy(uint64_t seed) {
  return std::make_unique<RandomPolicy>(seed);
}

EvalResult evaluate_policy(Policy& pi, const GenConfig& env, const EvalConfig& cfg) {
  if (cfg.num_episodes < 1) throw ConfigError("num_episodes must be at least 1");
  EnvConfig ecfg;
  ecfg.frame_size = env.frame_size;
  ecfg.action_max = env.action_max;
  ecfg.goal_radius = env.goal_radius;
  ecfg.horizon = env.horizon;
  ecfg.distractors = env.distractors;
  ecfg.couple_distractors_to_actions = env.couple_distractors;

  EvalResult result;
  std::vector<uint8_t> frame(3ULL * env.frame_size * env.frame_size);
  float action[2];
  int successes = 0;
  for (int ep = 0; ep < cfg.num_episodes; ++ep) {
    const uint64_t es = seed_mix({cfg.seed, kEvalTag, static_cast<uint64_t>(ep)});
    EnvState st = env_reset(es);
    pi.reset(es);
    EpisodeResult r;
    r.episode = ep;
    r.env_seed = es;
    r.success = goal_reached(st, ecfg);
    for (int t = 0; t < env.horizon && !r.success; ++t) {
      if (pi.needs_frames()) render(st, ecfg.distractors, ecfg, frame.data());
      pi.act(frame.data(), st, ecfg, action);
      st = env_step(st, std::span<const float, 2>{action, 2}, ecfg);
      r.steps_taken = t + 1;
      r.success = goal_reached(st, ecfg);
    }
    const double dx = static_cast<double>(st.agent_pos[0]) - st.goal_pos[0];
    const double dy = static_cast<double>(st.agent_pos[1]) - st.goal_pos[1];
    r.final_dist = std::sqrt(dx * dx + dy * dy);
    if (r.success) ++successes;
    result.episodes.push_back(r);
  }
  result.success_rate = static_cast<double>(successes) / cfg.num_episodes;
  return result;
}

}  // namespace lamkit
