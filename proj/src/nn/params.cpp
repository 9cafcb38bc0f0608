#include "lamkit/nn/params.hpp"

#include <cmath>

#include "lamkit/errors.hpp"

namespace lamkit::nn {

Param& ParamStore::add(const std::string& name, std::vector<int64_t> shape) {
  if (by_name_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  Param p;
  p.name = name;
  p.shape = std::move(shape);
  p.value.assign(static_cast<size_t>(n), 0.0f);
  p.grad.assign(static_cast<size_t>(n), 0.0f);
  p.m.assign(static_cast<size_t>(n), 0.0f);
  p.v.assign(static_cast<size_t>(n), 0.0f);
  params_.push_back(std::move(p));
  by_name_[name] = &params_.back();
  return params_.back();
}

Param& ParamStore::at(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw LookupError("no parameter named " + name);
  return *it->second;
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw LookupError("no parameter named " + name);
  return *it->second;
}

bool ParamStore::has(const std::string& name) const { return by_name_.contains(name); }

void ParamStore::zero_grads() {
  for (Param& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0f);
}

int64_t ParamStore::total_params() const {
  int64_t n = 0;
  for (const Param& p : params_) n += p.numel();
  return n;
}

uint64_t ParamStore::value_hash(const std::string& name_prefix_skip) const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const Param& p : params_) {
    if (!name_prefix_skip.empty() && p.name.rfind(name_prefix_skip, 0) == 0) continue;
    h = fnv1a64(p.name.data(), p.name.size(), h);
    h = fnv1a64(p.value.data(), p.value.size() * sizeof(float), h);
  }
  return h;
}

void init_kaiming(Param& p, int64_t fan_in, Rng& rng) {
  float std = std::sqrt(2.0f / static_cast<float>(fan_in));
  for (float& v : p.value) v = rng.normal() * std;
}

void init_normal(Param& p, float std, Rng& rng) {
  for (float& v : p.value) v = rng.normal() * std;
}

void init_zeros(Param& p) { std::fill(p.value.begin(), p.value.end(), 0.0f); }

void init_ones(Param& p) { std::fill(p.value.begin(), p.value.end(), 1.0f); }

Adam::Adam(std::vector<Param*> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {}

double Adam::current_lr() const {
  int64_t next = t_ + 1;
  if (cfg_.warmup_steps > 0 && next < cfg_.warmup_steps)
    return cfg_.lr * static_cast<double>(next) / static_cast<double>(cfg_.warmup_steps);
  return cfg_.lr;
}

void Adam::step() {
  double lr = current_lr();
  ++t_;

  if (cfg_.grad_clip) {
    double sq = 0.0;
    for (Param* p : params_)
      for (float g : p->grad) sq += static_cast<double>(g) * g;
    double norm = std::sqrt(sq);
    if (norm > *cfg_.grad_clip) {
      float scale = static_cast<float>(*cfg_.grad_clip / norm);
      for (Param* p : params_)
        for (float& g : p->grad) g *= scale;
    }
  }

  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Param* p : params_) {
    for (size_t i = 0; i < p->value.size(); ++i) {
      float g = p->grad[i];
      p->m[i] = static_cast<float>(cfg_.beta1 * p->m[i] + (1.0 - cfg_.beta1) * g);
      p->v[i] = static_cast<float>(cfg_.beta2 * p->v[i] + (1.0 - cfg_.beta2) * g * g);
      double mhat = p->m[i] / bc1;
      double vhat = p->v[i] / bc2;
      double upd = lr * (mhat / (std::sqrt(vhat) + cfg_.eps));
      if (cfg_.weight_decay > 0.0) upd += lr * cfg_.weight_decay * p->value[i];
      p->value[i] = static_cast<float>(p->value[i] - upd);
    }
    std::fill(p->grad.begin(), p->grad.end(), 0.0f);
  }
}

}  // namespace lamkit::nn
