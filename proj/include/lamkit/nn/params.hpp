#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "lamkit/rng.hpp"

namespace lamkit::nn {

struct Param {
  std::string name;
  std::vector<int64_t> shape;
  std::vector<float> value;
  std::vector<float> grad;
  std::vector<float> m, v;  // Adam moments

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
};

// Named parameter registry. Storage is a deque so references handed to
// modules stay valid as more parameters are added.
class ParamStore {
 public:
  Param& add(const std::string& name, std::vector<int64_t> shape);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool has(const std::string& name) const;

  void zero_grads();
  int64_t total_params() const;

  // FNV over parameter values in registration order; name_prefix_skip
  // excludes a parameter family (used to show probe updates leave the model
  // untouched).
  uint64_t value_hash(const std::string& name_prefix_skip = "") const;

  std::deque<Param>& all() { return params_; }
  const std::deque<Param>& all() const { return params_; }

 private:
  std::deque<Param> params_;
  std::unordered_map<std::string, Param*> by_name_;
};

// Common initializers.
void init_kaiming(Param& p, int64_t fan_in, Rng& rng);
void init_normal(Param& p, float std, Rng& rng);
void init_zeros(Param& p);
void init_ones(Param& p);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;             // decoupled
  std::optional<double> grad_clip;       // global L2 norm
  int64_t warmup_steps = 0;              // linear ramp from 0
};

class Adam {
 public:
  Adam(std::vector<Param*> params, AdamConfig cfg);

  // Applies one update from the accumulated grads, then clears them.
  void step();
  int64_t t() const { return t_; }
  double current_lr() const;  // lr after warmup scaling for the NEXT step

 private:
  std::vector<Param*> params_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

}  // namespace lamkit::nn
