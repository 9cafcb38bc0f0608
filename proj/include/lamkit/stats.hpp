#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lamkit {

// Interquartile mean with fractional trimming: sorted value i covers the
// unit position interval (i, i+1); weights are the overlap of that interval
// with [n/4, 3n/4]. Matches the plain middle-half mean when n is divisible
// by 4. Throws on empty input.
double iqm(std::vector<double> values);

// Order statistic quantile: smallest sample value whose empirical CDF
// reaches q. values must be sorted ascending.
double quantile_sorted(const std::vector<double>& values, double q);

struct ScoreMatrix {
  std::vector<std::string> tasks;             // task labels, one per row
  std::vector<std::vector<double>> values;    // values[i] = per-seed scores of task i
};

struct AggregateReport {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  int n_boot = 0;
  double level = 0.0;
};

// Percentile bootstrap over seeds, stratified by task: each replicate
// resamples seeds with replacement independently within every task and pools
// the result with iqm. Resampling streams are keyed by task label, so task
// row order does not affect the interval. Deterministic in seed.
AggregateReport stratified_bootstrap_ci(const ScoreMatrix& m, int n_boot = 2000,
                                        double level = 0.95, uint64_t seed = 0);

// Probe error with distractors over probe error without, the degradation
// measure used to compare representation targets.
double probe_ratio(double probe_mse_with, double probe_mse_without);

}  // namespace lamkit
