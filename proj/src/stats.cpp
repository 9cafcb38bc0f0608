#include "lamkit/stats.hpp"

#include <algorithm>
#include <cmath>

#include "lamkit/errors.hpp"
#include "lamkit/rng.hpp"

namespace lamkit {

double iqm(std::vector<double> values) {
  if (values.empty()) throw Error("iqm of empty sample");
  std::sort(values.begin(), values.end());
  size_t n = values.size();
  double lo = static_cast<double>(n) * 0.25;
  double hi = static_cast<double>(n) * 0.75;
  double wsum = 0.0, vsum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double a = std::max(lo, static_cast<double>(i));
    double b = std::min(hi, static_cast<double>(i + 1));
    double w = b - a;
    if (w <= 0.0) continue;
    wsum += w;
    vsum += w * values[i];
  }
  return vsum / wsum;
}

double quantile_sorted(const std::vector<double>& values, double q) {
  if (values.empty()) throw Error("quantile of empty sample");
  double n = static_cast<double>(values.size());
  // The epsilon keeps exact multiples of 1/n from rounding up a rank.
  auto k = static_cast<int64_t>(std::ceil(q * n - 1e-9));
  k = std::clamp<int64_t>(k, 1, static_cast<int64_t>(values.size()));
  return values[static_cast<size_t>(k - 1)];
}

AggregateReport stratified_bootstrap_ci(const ScoreMatrix& m, int n_boot, double level,
                                        uint64_t seed) {
  if (m.tasks.size() != m.values.size())
    throw Error("score matrix has " + std::to_string(m.tasks.size()) + " labels for " +
                std::to_string(m.values.size()) + " rows");
  if (m.values.empty()) throw Error("bootstrap over empty score matrix");
  for (const auto& row : m.values)
    if (row.empty()) throw Error("bootstrap task row with no seeds");
  if (n_boot < 1) throw Error("n_boot must be positive");
  if (!(level > 0.0 && level < 1.0)) throw Error("confidence level must be in (0, 1)");

  std::vector<double> pooled;
  for (const auto& row : m.values) pooled.insert(pooled.end(), row.begin(), row.end());
  double point = iqm(pooled);

  size_t n_tasks = m.values.size();
  std::vector<uint64_t> task_keys(n_tasks);
  for (size_t i = 0; i < n_tasks; ++i) task_keys[i] = fnv1a64(m.tasks[i]);

  std::vector<double> replicates(static_cast<size_t>(n_boot));
  std::vector<double> sample;
  sample.reserve(pooled.size());
  for (int b = 0; b < n_boot; ++b) {
    sample.clear();
    for (size_t i = 0; i < n_tasks; ++i) {
      const auto& row = m.values[i];
      Rng rng({seed, 0x626f6f74ULL, static_cast<uint64_t>(b), task_keys[i]});
      for (size_t j = 0; j < row.size(); ++j)
        sample.push_back(row[rng.below(row.size())]);
    }
    replicates[static_cast<size_t>(b)] = iqm(sample);
  }
  std::sort(replicates.begin(), replicates.end());

  double alpha = (1.0 - level) / 2.0;
  AggregateReport r;
  r.point = point;
  r.lo = std::min(quantile_sorted(replicates, alpha), point);
  r.hi = std::max(quantile_sorted(replicates, 1.0 - alpha), point);
  r.n_boot = n_boot;
  r.level = level;
  return r;
}

double probe_ratio(double probe_mse_with, double probe_mse_without) {
  if (!(probe_mse_without > 0.0))
    throw Error("probe ratio denominator must be positive, got " +
                std::to_string(probe_mse_without));
  if (probe_mse_with < 0.0)
    throw Error("probe mse cannot be negative");
  return probe_mse_with / probe_mse_without;
}

}  // namespace lamkit
