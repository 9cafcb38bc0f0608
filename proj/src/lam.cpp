#include "lamkit/lam.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "lamkit/errors.hpp"

namespace lamkit {

namespace fs = std::filesystem;

const char* backbone_name(Backbone b) {
  return b == Backbone::conv_residual ? "conv_residual" : "patch_transformer";
}

Backbone parse_backbone(const std::string& s) {
  if (s == "conv_residual") return Backbone::conv_residual;
  if (s == "patch_transformer") return Backbone::patch_transformer;
  throw ConfigError("unknown backbone: " + s);
}

namespace {

constexpr uint64_t kInitTag = 0x696e6974;    // "init"
constexpr uint64_t kSplitTag = 0x73706c6974; // "split"
constexpr uint64_t kOrderTag = 0x6f72646572; // "order"
constexpr uint64_t kRefitTag = 0x7265666974; // "refit"

std::vector<int> scaled(const std::vector<int>& ch, int scale) {
  std::vector<int> out;
  out.reserve(ch.size());
  for (int c : ch) out.push_back(c * scale);
  return out;
}

std::string join_ints(const std::vector<int>& v, char sep) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += sep;
    s += std::to_string(v[i]);
  }
  return s;
}

std::string join_dims(const std::vector<int64_t>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<int> split_ints(const std::string& s, char sep) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
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

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

LamModel::LamModel(const LamConfig& cfg, int frame_size, int action_dim, bool image_target,
                   std::vector<int64_t> target_shape, int64_t instr_dim, uint64_t init_seed)
    : cfg_(cfg),
      frame_size_(frame_size),
      action_dim_(action_dim),
      image_target_(image_target),
      target_shape_(std::move(target_shape)),
      instr_dim_(instr_dim) {
  if (cfg.latent_action_dim <= 0) throw ConfigError("latent_action_dim must be positive");
  if (cfg.frame_stack < 1) throw ConfigError("frame_stack must be at least 1");
  if (cfg.fdm_use_cross_attn)
    throw ConfigError(
        "fdm_use_cross_attn is not supported: the forward model conditions on the "
        "latent only through its input bottleneck");
  if (cfg.idm_encoder_scale < 1 || cfg.fdm_encoder_scale < 1)
    throw ConfigError("encoder scale must be at least 1");
  if (cfg.idm_encoder_channels.empty() || cfg.fdm_encoder_channels.empty())
    throw ConfigError("encoder channel lists must not be empty");
  if (action_dim <= 0) throw ConfigError("action dim must be positive");

  Rng init{init_seed, kInitTag};
  const int latent = cfg.latent_action_dim;

  if (cfg.backbone == Backbone::conv_residual) {
    // One stem shared across the stacked frames. Per-frame features keep each
    // frame's geometry separate all the way to the head, which then only has
    // to compare them; a stem over the stacked channels would fuse the frames
    // in its very first layer. The head reads the coordinate channels alone:
    // that keeps the latent a smooth function of scene geometry instead of a
    // codebook over raw activations, which a linear probe could never invert.
    idm_enc_ = std::make_unique<nn::ConvEncoder>(
        params_, "idm/enc", 3, frame_size, scaled(cfg.idm_encoder_channels, cfg.idm_encoder_scale),
        cfg.idm_encoder_res_blocks, init);
    const int64_t head_in = (cfg.frame_stack + 1) * idm_enc_->coord_dim() + instr_dim_;
    idm_head_w_ = &params_.add("idm/head_w", {latent, head_in});
    nn::init_kaiming(*idm_head_w_, head_in, init);
    idm_head_b_ = &params_.add("idm/head_b", {latent});
    nn::init_zeros(*idm_head_b_);
  } else {
    if (cfg.patch_size < 1 || frame_size % cfg.patch_size != 0)
      throw ConfigError("frame size " + std::to_string(frame_size) +
                        " is not divisible by patch size " + std::to_string(cfg.patch_size));
    if (cfg.idm_num_heads < 1 || cfg.idm_hidden_dim % cfg.idm_num_heads != 0)
      throw ConfigError("idm_hidden_dim must be divisible by idm_num_heads");
    const int per = frame_size / cfg.patch_size;
    const int n_tokens = (cfg.frame_stack + 1) * per * per;
    const int64_t token_dim = static_cast<int64_t>(cfg.patch_size) * cfg.patch_size * 3;
    idm_trans_ = std::make_unique<nn::TransformerEncoder>(
        params_, "idm/trans", n_tokens, token_dim, cfg.idm_hidden_dim, cfg.idm_num_layers,
        cfg.idm_num_heads, cfg.pre_norm, cfg.normalize_qk, instr_dim_, latent, init);
    patch_scratch_.assign(static_cast<int64_t>(n_tokens) * token_dim, 0.0f);
  }

  fdm_enc_ = std::make_unique<nn::ConvEncoder>(
      params_, "fdm/enc", 3, frame_size, scaled(cfg.fdm_encoder_channels, cfg.fdm_encoder_scale),
      cfg.fdm_encoder_res_blocks, init);
  if (image_target_) {
    const int stages = static_cast<int>(cfg.fdm_encoder_channels.size());
    if (frame_size % (1 << stages) != 0)
      throw ConfigError("frame size " + std::to_string(frame_size) + " is not divisible by 2^" +
                        std::to_string(stages) + ", which the upsampling decoder requires");
    fdm_dec_ = std::make_unique<nn::ImageDecoder>(params_, "fdm/dec", *fdm_enc_,
                                                  latent + instr_dim_, init);
  } else {
    if (target_dim() <= 0) throw ConfigError("vector target dim must be positive");
    const int64_t in_dim = fdm_enc_->flat_dim() + latent + instr_dim_;
    fdm_mlp_ = std::make_unique<nn::MlpStack>(params_, "fdm/mlp", in_dim, cfg.fdm_hidden_dim,
                                              cfg.fdm_num_layers, cfg.fdm_expand, target_dim(), init);
  }

  nn::Param& pw = params_.add("probe/w", {action_dim, latent});
  nn::init_zeros(pw);
  nn::Param& pb = params_.add("probe/b", {action_dim});
  nn::init_zeros(pb);
}

int64_t LamModel::target_dim() const {
  int64_t n = 1;
  for (int64_t d : target_shape_) n *= d;
  return n;
}

int64_t LamModel::stack_numel() const {
  return static_cast<int64_t>(cfg_.frame_stack + 1) * 3 * frame_size_ * frame_size_;
}

int LamModel::idm(nn::Tape& t, const float* stack_chw, const float* instr) {
  if (instr_dim_ > 0 && instr == nullptr)
    throw ConfigError("model is instruction conditioned but no instruction was given");
  if (cfg_.backbone == Backbone::conv_residual) {
    const int64_t per_frame = 3LL * frame_size_ * frame_size_;
    int h = -1;
    for (int f = 0; f < cfg_.frame_stack + 1; ++f) {
      const int x = t.constant(stack_chw + f * per_frame, per_frame);
      const nn::ConvEncoder::Result r = idm_enc_->forward(t, x);
      h = f == 0 ? r.coords : t.concat({h, r.coords});
    }
    if (instr_dim_ > 0) h = t.concat({h, t.constant(instr, instr_dim_)});
    return t.linear(h, *idm_head_w_, idm_head_b_, 1, idm_head_w_->shape[1],
                    cfg_.latent_action_dim);
  }
  const int S = frame_size_;
  const int P = cfg_.patch_size;
  const int64_t per = S / P;
  const int64_t token_dim = static_cast<int64_t>(P) * P * 3;
  const int64_t per_frame = per * per * token_dim;
  for (int f = 0; f < cfg_.frame_stack + 1; ++f)
    nn::patchify_chw(stack_chw + static_cast<int64_t>(f) * 3 * S * S, 3, S, P,
                     patch_scratch_.data() + f * per_frame);
  const int tokens = t.constant(patch_scratch_.data(), static_cast<int64_t>(patch_scratch_.size()));
  const int extra = instr_dim_ > 0 ? t.constant(instr, instr_dim_) : -1;
  return idm_trans_->forward(t, tokens, extra);
}

int LamModel::fdm(nn::Tape& t, const float* cur_chw, int z, const float* instr) {
  if (instr_dim_ > 0 && instr == nullptr)
    throw ConfigError("model is instruction conditioned but no instruction was given");
  const int x = t.constant(cur_chw, 3LL * frame_size_ * frame_size_);
  const nn::ConvEncoder::Result r = fdm_enc_->forward(t, x);
  if (image_target_) {
    const int cond = instr_dim_ > 0 ? t.concat({z, t.constant(instr, instr_dim_)}) : z;
    return fdm_dec_->forward(t, r, cond);
  }
  const int in = instr_dim_ > 0 ? t.concat({r.flat, z, t.constant(instr, instr_dim_)})
                                : t.concat({r.flat, z});
  return fdm_mlp_->forward(t, in);
}

void LamModel::encode(const float* stack_chw, const float* instr, float* z_out) {
  encode_tape_.reset();
  const int z = idm(encode_tape_, stack_chw, instr);
  std::memcpy(z_out, encode_tape_.val(z), sizeof(float) * cfg_.latent_action_dim);
}

TransitionSplit split_transitions(const TrajectoryDataset& ds, double holdout_fraction,
                                  uint64_t seed) {
  if (holdout_fraction < 0.0 || holdout_fraction >= 1.0)
    throw ConfigError("holdout fraction must be in [0, 1)");
  TransitionSplit sp;
  const int64_t n_traj = ds.num_trajectories();
  const int64_t horizon = ds.horizon();
  uint64_t min_hash = ~0ULL;
  std::pair<int64_t, int64_t> min_key{0, 0};
  for (int64_t n = 0; n < n_traj; ++n) {
    for (int64_t t = 0; t < horizon; ++t) {
      const uint64_t h = seed_mix({seed, kSplitTag, static_cast<uint64_t>(n),
                                   static_cast<uint64_t>(t)});
      if (h < min_hash) {
        min_hash = h;
        min_key = {n, t};
      }
      const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
      (u < holdout_fraction ? sp.holdout : sp.train).emplace_back(n, t);
    }
  }
  if (holdout_fraction > 0.0 && sp.holdout.empty() && !sp.train.empty()) {
    sp.train.erase(std::find(sp.train.begin(), sp.train.end(), min_key));
    sp.holdout.push_back(min_key);
  }
  if (sp.train.empty()) throw ConfigError("holdout fraction leaves no training transitions");
  return sp;
}

void fill_stack(const TrajectoryDataset& ds, int64_t n, int64_t t, int frame_stack,
                float* stack_chw) {
  const int size = static_cast<int>(ds.frame_size());
  const int64_t fnum = 3LL * size * size;
  for (int i = 0; i < frame_stack; ++i) {
    int64_t idx = t - frame_stack + 1 + i;
    if (idx < 0) idx = 0;
    normalize_frame_chw(ds.frame(n, idx), size, stack_chw + i * fnum);
  }
  normalize_frame_chw(ds.frame(n, t + 1), size, stack_chw + static_cast<int64_t>(frame_stack) * fnum);
}

namespace {

// y = W z + b for the linear probe.
void probe_forward(const nn::Param& pw, const nn::Param& pb, const float* z, double* y,
                   int action_dim, int latent) {
  for (int d = 0; d < action_dim; ++d) {
    double acc = pb.value[static_cast<size_t>(d)];
    const float* row = pw.value.data() + static_cast<int64_t>(d) * latent;
    for (int j = 0; j < latent; ++j) acc += static_cast<double>(row[j]) * z[j];
    y[d] = acc;
  }
}

void accumulate_probe_grads(nn::Param& pw, nn::Param& pb, const std::vector<float>& zb,
                            const std::vector<const float*>& za, int batch, int action_dim,
                            int latent) {
  const double scale = 2.0 / (static_cast<double>(batch) * action_dim);
  std::vector<double> y(static_cast<size_t>(action_dim));
  for (int k = 0; k < batch; ++k) {
    const float* z = zb.data() + static_cast<int64_t>(k) * latent;
    probe_forward(pw, pb, z, y.data(), action_dim, latent);
    for (int d = 0; d < action_dim; ++d) {
      const double e = scale * (y[static_cast<size_t>(d)] - za[static_cast<size_t>(k)][d]);
      pb.grad[static_cast<size_t>(d)] += static_cast<float>(e);
      float* grow = pw.grad.data() + static_cast<int64_t>(d) * latent;
      for (int j = 0; j < latent; ++j) grow[j] += static_cast<float>(e * z[j]);
    }
  }
}

double probe_eval_impl(LamModel& model, const TrajectoryDataset& ds,
                       const std::vector<std::pair<int64_t, int64_t>>& transitions,
                       const float* instr) {
  if (transitions.empty()) throw Error("probe evaluation needs at least one transition");
  const int action_dim = model.action_dim();
  const int latent = model.config().latent_action_dim;
  std::vector<float> stack(static_cast<size_t>(model.stack_numel()));
  std::vector<float> z(static_cast<size_t>(latent));
  std::vector<double> y(static_cast<size_t>(action_dim));
  const nn::Param& pw = model.probe_w();
  const nn::Param& pb = model.probe_b();
  double acc = 0.0;
  for (const auto& [n, t] : transitions) {
    fill_stack(ds, n, t, model.config().frame_stack, stack.data());
    model.encode(stack.data(), instr, z.data());
    probe_forward(pw, pb, z.data(), y.data(), action_dim, latent);
    const float* a = ds.action(n, t);
    for (int d = 0; d < action_dim; ++d) {
      const double e = y[static_cast<size_t>(d)] - a[d];
      acc += e * e;
    }
  }
  return acc / (static_cast<double>(transitions.size()) * action_dim);
}

}  // namespace

TrainLamResult train_lam(const TrajectoryDataset& ds, const LamConfig& cfg,
                         TargetProvider& target, const fs::path& out_dir) {
  if (cfg.num_epochs < 1) throw ConfigError("num_epochs must be at least 1");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (cfg.holdout_fraction <= 0.0) throw ConfigError("holdout_fraction must be positive");

  const int size = static_cast<int>(ds.frame_size());
  const int action_dim = static_cast<int>(ds.action_dim());
  const int latent = cfg.latent_action_dim;
  const bool image = target.is_image();
  const std::span<const float> instr_span = target.instruction();
  const int64_t instr_dim = static_cast<int64_t>(instr_span.size());
  const int64_t tdim = target.dim();

  LamModel model(cfg, size, action_dim, image, target.shape(), instr_dim, cfg.seed);
  TransitionSplit split = split_transitions(ds, cfg.holdout_fraction, cfg.seed);

  std::vector<float> tgt(static_cast<size_t>(tdim));
  std::vector<float> mean, stdv;
  if (!image) {
    std::vector<double> s1(static_cast<size_t>(tdim), 0.0), s2(static_cast<size_t>(tdim), 0.0);
    for (const auto& [n, t] : split.train) {
      target.target(n, t, tgt.data());
      for (int64_t d = 0; d < tdim; ++d) {
        s1[static_cast<size_t>(d)] += tgt[static_cast<size_t>(d)];
        s2[static_cast<size_t>(d)] += static_cast<double>(tgt[static_cast<size_t>(d)]) *
                                      tgt[static_cast<size_t>(d)];
      }
    }
    const double inv_n = 1.0 / static_cast<double>(split.train.size());
    mean.resize(static_cast<size_t>(tdim));
    stdv.resize(static_cast<size_t>(tdim));
    for (int64_t d = 0; d < tdim; ++d) {
      const double m = s1[static_cast<size_t>(d)] * inv_n;
      const double var = std::max(0.0, s2[static_cast<size_t>(d)] * inv_n - m * m);
      mean[static_cast<size_t>(d)] = static_cast<float>(m);
      stdv[static_cast<size_t>(d)] = static_cast<float>(std::max(std::sqrt(var), 1e-6));
    }
  }

  std::vector<nn::Param*> model_params, probe_params;
  for (nn::Param& p : model.params().all()) {
    if (p.name.rfind("probe/", 0) == 0)
      probe_params.push_back(&p);
    else
      model_params.push_back(&p);
  }
  const int64_t train_count = static_cast<int64_t>(split.train.size());
  const int64_t steps_per_epoch = (train_count + cfg.batch_size - 1) / cfg.batch_size;
  nn::AdamConfig mac;
  mac.lr = cfg.learning_rate;
  mac.weight_decay = cfg.weight_decay;
  mac.grad_clip = cfg.grad_norm;
  mac.warmup_steps = std::llround(cfg.warmup_epochs * static_cast<double>(steps_per_epoch));
  nn::Adam opt(model_params, mac);
  nn::AdamConfig pac;
  pac.lr = cfg.probe_learning_rate;
  nn::Adam popt(probe_params, pac);

  std::vector<float> stack_buf(static_cast<size_t>(model.stack_numel()));
  std::vector<float> cur_buf(3ULL * size * size);
  std::vector<float> zero_instr(static_cast<size_t>(instr_dim), 0.0f);
  std::vector<float> zb;
  zb.reserve(static_cast<size_t>(cfg.batch_size) * latent);
  std::vector<const float*> za;
  za.reserve(static_cast<size_t>(cfg.batch_size));

  nn::Tape tape;
  TrainLamResult result;
  result.probe.holdout_count = static_cast<int64_t>(split.holdout.size());
  double window_loss = 0.0, last_window_mean = 0.0;
  int64_t window_count = 0;
  double epoch_loss = 0.0;
  int64_t epoch_count = 0;
  int64_t step = 0;
  const float* cur_instr = nullptr;

  auto eval_probe = [&]() {
    const double pm = probe_eval_impl(model, ds, split.holdout, cur_instr);
    if (window_count > 0) last_window_mean = window_loss / static_cast<double>(window_count);
    result.probe.points.push_back({step, pm, last_window_mean});
    window_loss = 0.0;
    window_count = 0;
  };

  std::vector<int64_t> order(split.train.size());
  for (int64_t epoch = 0; epoch < cfg.num_epochs; ++epoch) {
    if (instr_dim > 0)
      cur_instr = epoch < cfg.num_epochs / 2 ? zero_instr.data() : instr_span.data();
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    Rng shuffle{cfg.seed, kOrderTag, static_cast<uint64_t>(epoch)};
    for (int64_t i = static_cast<int64_t>(order.size()) - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(shuffle.below(static_cast<uint64_t>(i + 1)))]);

    epoch_loss = 0.0;
    epoch_count = 0;
    for (int64_t start = 0; start < train_count; start += cfg.batch_size) {
      const int bs = static_cast<int>(std::min<int64_t>(cfg.batch_size, train_count - start));
      zb.clear();
      za.clear();
      for (int k = 0; k < bs; ++k) {
        const auto [n, t] = split.train[static_cast<size_t>(order[static_cast<size_t>(start + k)])];
        fill_stack(ds, n, t, cfg.frame_stack, stack_buf.data());
        normalize_frame_chw(ds.frame(n, t), size, cur_buf.data());
        target.target(n, t, tgt.data());
        if (!image)
          for (int64_t d = 0; d < tdim; ++d)
            tgt[static_cast<size_t>(d)] =
                (tgt[static_cast<size_t>(d)] - mean[static_cast<size_t>(d)]) /
                stdv[static_cast<size_t>(d)];
        tape.reset();
        const int z = model.idm(tape, stack_buf.data(), cur_instr);
        const int pred = model.fdm(tape, cur_buf.data(), z, cur_instr);
        const int loss = tape.mse(pred, tgt.data(), tdim);
        const double lv = tape.val(loss)[0];
        if (!std::isfinite(lv)) {
          save_lam_checkpoint(model, target.kind(), instr_span, mean, stdv, step, 0.0,
                              out_dir / "diagnostic");
          throw DivergenceError("training loss became non-finite at step " +
                                std::to_string(step) + " (epoch " + std::to_string(epoch) +
                                "); diagnostic checkpoint written");
        }
        tape.backward(loss, 1.0f / static_cast<float>(bs));
        const float* zv = tape.val(z);
        zb.insert(zb.end(), zv, zv + latent);
        za.push_back(ds.action(n, t));
        window_loss += lv;
        ++window_count;
        epoch_loss += lv;
        ++epoch_count;
      }
      accumulate_probe_grads(model.probe_w(), model.probe_b(), zb, za, bs, action_dim, latent);
      popt.step();
      opt.step();
      ++step;
      if (cfg.probe_eval_every > 0 && step % cfg.probe_eval_every == 0) eval_probe();
    }
  }
  eval_probe();

  const size_t n_points = result.probe.points.size();
  const size_t tail = std::min<size_t>(3, n_points);
  double acc = 0.0;
  for (size_t i = n_points - tail; i < n_points; ++i) acc += result.probe.points[i].probe_mse;
  result.probe.final_probe_mse = acc / static_cast<double>(tail);
  result.final_train_loss = epoch_count > 0 ? epoch_loss / static_cast<double>(epoch_count) : 0.0;
  result.steps = step;

  save_lam_checkpoint(model, target.kind(), instr_span, mean, stdv, step,
                      result.probe.final_probe_mse, out_dir);
  std::string csv = "step,probe_mse,train_loss\n";
  for (const ProbePoint& p : result.probe.points)
    csv += std::to_string(p.step) + "," + format_real(p.probe_mse) + "," +
           format_real(p.train_loss) + "\n";
  atomic_write_text(out_dir / "probe_points.csv", csv);
  return result;
}

void save_lam_checkpoint(LamModel& model, TargetKind kind, std::span<const float> instruction,
                         std::span<const float> target_mean, std::span<const float> target_std,
                         int64_t steps, double final_probe_mse, const fs::path& dir) {
  fs::create_directories(dir / "params");
  const LamConfig& c = model.config();
  Manifest m;
  m.set_int("format_version", 1);
  m.set("kind", "lam");
  m.set_int("latent_action_dim", c.latent_action_dim);
  m.set_int("frame_stack", c.frame_stack);
  m.set("backbone", backbone_name(c.backbone));
  m.set_int("idm_encoder_scale", c.idm_encoder_scale);
  m.set_int("idm_encoder_res_blocks", c.idm_encoder_res_blocks);
  m.set("idm_encoder_channels", join_ints(c.idm_encoder_channels, ','));
  m.set_int("patch_size", c.patch_size);
  m.set_int("idm_hidden_dim", c.idm_hidden_dim);
  m.set_int("idm_num_layers", c.idm_num_layers);
  m.set_int("idm_num_heads", c.idm_num_heads);
  m.set("normalize_qk", c.normalize_qk ? "true" : "false");
  m.set("pre_norm", c.pre_norm ? "true" : "false");
  m.set_int("fdm_encoder_scale", c.fdm_encoder_scale);
  m.set_int("fdm_encoder_res_blocks", c.fdm_encoder_res_blocks);
  m.set("fdm_encoder_channels", join_ints(c.fdm_encoder_channels, ','));
  m.set_int("fdm_hidden_dim", c.fdm_hidden_dim);
  m.set_int("fdm_num_layers", c.fdm_num_layers);
  m.set_int("fdm_expand", c.fdm_expand);
  m.set_int("num_epochs", c.num_epochs);
  m.set_int("batch_size", c.batch_size);
  m.set_real("learning_rate", c.learning_rate);
  m.set_real("weight_decay", c.weight_decay);
  m.set_real("warmup_epochs", c.warmup_epochs);
  m.set("grad_norm", c.grad_norm ? format_real(*c.grad_norm) : "-");
  m.set_real("probe_learning_rate", c.probe_learning_rate);
  m.set_real("holdout_fraction", c.holdout_fraction);
  m.set_int("probe_eval_every", c.probe_eval_every);
  m.set_int("seed", static_cast<int64_t>(c.seed));
  m.set_int("frame_size", model.frame_size());
  m.set_int("action_dim", model.action_dim());
  m.set("image_target", model.image_target() ? "true" : "false");
  m.set("target_kind", target_kind_name(kind));
  m.set("target_shape", join_dims(model.target_shape()));
  m.set_int("instr_dim", model.instr_dim());
  m.set_int("steps", steps);
  m.set_real("final_probe_mse", final_probe_mse);

  for (const nn::Param& p : model.params().all()) {
    NdArray a = make_array(Dtype::f32, p.shape);
    std::memcpy(a.data.data(), p.value.data(), p.value.size() * sizeof(float));
    write_array(dir / "params" / (sanitize_param_name(p.name) + ".arr"), a);
  }
  auto write_vec = [&](const char* name, std::span<const float> v) {
    NdArray a = make_array(Dtype::f32, {static_cast<int64_t>(v.size())});
    std::memcpy(a.data.data(), v.data(), v.size() * sizeof(float));
    write_array(dir / name, a);
  };
  if (!instruction.empty()) write_vec("instruction.arr", instruction);
  if (!target_mean.empty()) {
    write_vec("target_mean.arr", target_mean);
    write_vec("target_std.arr", target_std);
  }
  write_manifest(dir / "ckpt_manifest.txt", m);
}

LamCheckpoint load_lam_checkpoint(const fs::path& dir) {
  const Manifest m = read_manifest(dir / "ckpt_manifest.txt");
  if (m.get_int("format_version") != 1)
    throw VersionError("unsupported checkpoint format_version " + m.get("format_version"));
  if (m.get("kind") != "lam") throw CorruptionError("not a latent action model checkpoint");

  LamCheckpoint ck;
  LamConfig c;
  c.latent_action_dim = static_cast<int>(m.get_int("latent_action_dim"));
  c.frame_stack = static_cast<int>(m.get_int("frame_stack"));
  c.backbone = parse_backbone(m.get("backbone"));
  c.idm_encoder_scale = static_cast<int>(m.get_int("idm_encoder_scale"));
  c.idm_encoder_res_blocks = static_cast<int>(m.get_int("idm_encoder_res_blocks"));
  c.idm_encoder_channels = split_ints(m.get("idm_encoder_channels"), ',');
  c.patch_size = static_cast<int>(m.get_int("patch_size"));
  c.idm_hidden_dim = static_cast<int>(m.get_int("idm_hidden_dim"));
  c.idm_num_layers = static_cast<int>(m.get_int("idm_num_layers"));
  c.idm_num_heads = static_cast<int>(m.get_int("idm_num_heads"));
  c.normalize_qk = m.get("normalize_qk") == "true";
  c.pre_norm = m.get("pre_norm") == "true";
  c.fdm_encoder_scale = static_cast<int>(m.get_int("fdm_encoder_scale"));
  c.fdm_encoder_res_blocks = static_cast<int>(m.get_int("fdm_encoder_res_blocks"));
  c.fdm_encoder_channels = split_ints(m.get("fdm_encoder_channels"), ',');
  c.fdm_hidden_dim = static_cast<int>(m.get_int("fdm_hidden_dim"));
  c.fdm_num_layers = static_cast<int>(m.get_int("fdm_num_layers"));
  c.fdm_expand = static_cast<int>(m.get_int("fdm_expand"));
  c.num_epochs = static_cast<int>(m.get_int("num_epochs"));
  c.batch_size = static_cast<int>(m.get_int("batch_size"));
  c.learning_rate = m.get_real("learning_rate");
  c.weight_decay = m.get_real("weight_decay");
  c.warmup_epochs = m.get_real("warmup_epochs");
  if (m.get("grad_norm") != "-") c.grad_norm = m.get_real("grad_norm");
  c.probe_learning_rate = m.get_real("probe_learning_rate");
  c.holdout_fraction = m.get_real("holdout_fraction");
  c.probe_eval_every = static_cast<int>(m.get_int("probe_eval_every"));
  c.seed = static_cast<uint64_t>(m.get_int("seed"));
  ck.config = c;

  ck.frame_size = static_cast<int>(m.get_int("frame_size"));
  ck.action_dim = static_cast<int>(m.get_int("action_dim"));
  ck.target_kind = parse_target_kind(m.get("target_kind"));
  for (int v : split_ints(m.get("target_shape"), 'x')) ck.target_shape.push_back(v);
  ck.instr_dim = m.get_int("instr_dim");
  ck.steps = m.get_int("steps");
  ck.final_probe_mse = m.get_real("final_probe_mse");
  const bool image = m.get("image_target") == "true";

  ck.model = std::make_unique<LamModel>(c, ck.frame_size, ck.action_dim, image, ck.target_shape,
                                        ck.instr_dim, c.seed);
  for (nn::Param& p : ck.model->params().all()) {
    const fs::path path = dir / "params" / (sanitize_param_name(p.name) + ".arr");
    const NdArray a = read_array(path);
    if (a.dims != p.shape)
      throw CorruptionError("checkpoint parameter " + p.name + " has the wrong shape");
    std::memcpy(p.value.data(), a.data.data(), p.value.size() * sizeof(float));
  }
  auto read_vec = [&](const char* name, int64_t want) {
    const NdArray a = read_array(dir / name);
    if (a.dims.size() != 1 || (want >= 0 && a.dims[0] != want))
      throw CorruptionError(std::string("checkpoint array ") + name + " has the wrong shape");
    const std::span<const float> f = a.f32();
    return std::vector<float>(f.begin(), f.end());
  };
  if (ck.instr_dim > 0) ck.instruction = read_vec("instruction.arr", ck.instr_dim);
  if (fs::exists(dir / "target_mean.arr")) {
    ck.target_mean = read_vec("target_mean.arr", -1);
    ck.target_std = read_vec("target_std.arr", static_cast<int64_t>(ck.target_mean.size()));
  }
  return ck;
}

double probe_eval(LamCheckpoint& ckpt, const TrajectoryDataset& ds,
                  const std::vector<std::pair<int64_t, int64_t>>& transitions) {
  const float* instr = ckpt.instr_dim > 0 ? ckpt.instruction.data() : nullptr;
  return probe_eval_impl(*ckpt.model, ds, transitions, instr);
}

double probe_refit(LamCheckpoint& ckpt, const TrajectoryDataset& ds, int updates, uint64_t seed) {
  if (updates < 1) throw ConfigError("probe refit needs at least one update");
  LamModel& model = *ckpt.model;
  const LamConfig& c = model.config();
  const TransitionSplit split = split_transitions(ds, c.holdout_fraction, c.seed);
  const int action_dim = model.action_dim();
  const int latent = c.latent_action_dim;
  const float* instr = ckpt.instr_dim > 0 ? ckpt.instruction.data() : nullptr;

  nn::Param& pw = model.probe_w();
  nn::Param& pb = model.probe_b();
  std::fill(pw.value.begin(), pw.value.end(), 0.0f);
  std::fill(pb.value.begin(), pb.value.end(), 0.0f);
  std::fill(pw.m.begin(), pw.m.end(), 0.0f);
  std::fill(pw.v.begin(), pw.v.end(), 0.0f);
  std::fill(pb.m.begin(), pb.m.end(), 0.0f);
  std::fill(pb.v.begin(), pb.v.end(), 0.0f);
  nn::AdamConfig pac;
  pac.lr = c.probe_learning_rate;
  nn::Adam popt({&pw, &pb}, pac);

  // The encoder is frozen here, so each transition's latent is a constant;
  // encode the training split once and run the updates against the cache.
  const int64_t n_train = static_cast<int64_t>(split.train.size());
  std::vector<float> zcache(static_cast<size_t>(n_train) * latent);
  std::vector<float> stack(static_cast<size_t>(model.stack_numel()));
  for (int64_t i = 0; i < n_train; ++i) {
    const auto& [n, t] = split.train[static_cast<size_t>(i)];
    fill_stack(ds, n, t, c.frame_stack, stack.data());
    model.encode(stack.data(), instr, zcache.data() + i * latent);
  }

  std::vector<float> zb(static_cast<size_t>(c.batch_size) * latent);
  std::vector<const float*> za(static_cast<size_t>(c.batch_size));
  Rng r{seed, kRefitTag};
  for (int u = 0; u < updates; ++u) {
    for (int k = 0; k < c.batch_size; ++k) {
      const int64_t i = static_cast<int64_t>(r.below(static_cast<uint64_t>(n_train)));
      std::copy_n(zcache.data() + i * latent, latent, zb.data() + static_cast<int64_t>(k) * latent);
      const auto& [n, t] = split.train[static_cast<size_t>(i)];
      za[static_cast<size_t>(k)] = ds.action(n, t);
    }
    accumulate_probe_grads(pw, pb, zb, za, c.batch_size, action_dim, latent);
    popt.step();
  }
  return probe_eval_impl(model, ds, split.holdout, instr);
}

double random_probe_baseline(const TrajectoryDataset& ds, const LamConfig& cfg,
                             uint64_t init_seed) {
  if (cfg.holdout_fraction <= 0.0) throw ConfigError("holdout_fraction must be positive");
  const int size = static_cast<int>(ds.frame_size());
  const int action_dim = static_cast<int>(ds.action_dim());
  const int latent = cfg.latent_action_dim;
  LamModel model(cfg, size, action_dim, /*image_target=*/false, {1}, 0, init_seed);
  const TransitionSplit split = split_transitions(ds, cfg.holdout_fraction, cfg.seed);

  const int64_t n_train = static_cast<int64_t>(split.train.size());
  Eigen::MatrixXd x(n_train, latent + 1);
  Eigen::MatrixXd y(n_train, action_dim);
  std::vector<float> stack(static_cast<size_t>(model.stack_numel()));
  std::vector<float> z(static_cast<size_t>(latent));
  for (int64_t i = 0; i < n_train; ++i) {
    const auto& [n, t] = split.train[static_cast<size_t>(i)];
    fill_stack(ds, n, t, cfg.frame_stack, stack.data());
    model.encode(stack.data(), nullptr, z.data());
    for (int j = 0; j < latent; ++j) x(i, j) = z[static_cast<size_t>(j)];
    x(i, latent) = 1.0;
    const float* a = ds.action(n, t);
    for (int d = 0; d < action_dim; ++d) y(i, d) = a[d];
  }
  const Eigen::MatrixXd w = x.colPivHouseholderQr().solve(y);

  double acc = 0.0;
  for (const auto& [n, t] : split.holdout) {
    fill_stack(ds, n, t, cfg.frame_stack, stack.data());
    model.encode(stack.data(), nullptr, z.data());
    const float* a = ds.action(n, t);
    for (int d = 0; d < action_dim; ++d) {
      double pred = w(latent, d);
      for (int j = 0; j < latent; ++j) pred += w(j, d) * z[static_cast<size_t>(j)];
      const double e = pred - a[d];
      acc += e * e;
    }
  }
  return acc / (static_cast<double>(split.holdout.size()) * action_dim);
}

}  // namespace lamkit
