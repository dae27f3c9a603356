#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "hloba/dynamics.hpp"
#include "hloba/observations.hpp"

namespace hloba::harness {

/// sqrt(sum w (x - truth)^2 / sum w). Weights must be nonnegative with a positive sum.
double weighted_rmse(const StateVector& x, const StateVector& truth, const Eigen::VectorXd& weights);
/// Uniform weights.
double weighted_rmse(const StateVector& x, const StateVector& truth);

/// RMSE of H(x) against the active observations. No active point raises UndefinedMetric.
double obs_rmse(const StateVector& x, const ObservationSet& obs);

/// Sample Pearson correlation. Needs at least 3 points and nonzero variance in both.
double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b);
double pearson(const std::vector<double>& a, const std::vector<double>& b);

/// Per-coordinate mean |x(t) - x(t - lag)| over a run of at least lag + 100 states.
Eigen::VectorXd build_qc_thresholds(const std::vector<StateVector>& run, int lag);

struct ConfidenceInterval {
  double mean = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

/// Percentile interval for the mean of paired differences pooled over independent series.
/// Each series is resampled with circular moving blocks to respect serial correlation.
ConfidenceInterval paired_block_bootstrap(const std::vector<std::vector<double>>& differences, int block_length,
                                          int resamples, double confidence, std::uint64_t seed);

}  // namespace hloba::harness
