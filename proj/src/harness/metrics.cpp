#include "hloba/harness/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "hloba/error.hpp"

namespace hloba::harness {

double weighted_rmse(const StateVector& x, const StateVector& truth, const Eigen::VectorXd& weights) {
  if (x.size() != truth.size() || weights.size() != x.size()) throw ContractError("weighted_rmse: length mismatch");
  if ((weights.array() < 0.0).any() || !(weights.sum() > 0.0)) {
    throw ContractError("weighted_rmse: weights must be nonnegative with a positive sum");
  }
  return std::sqrt((weights.array() * (x - truth).array().square()).sum() / weights.sum());
}

double weighted_rmse(const StateVector& x, const StateVector& truth) {
  return weighted_rmse(x, truth, Eigen::VectorXd::Ones(x.size()));
}

double obs_rmse(const StateVector& x, const ObservationSet& obs) {
  if (x.size() != obs.network.n_x) throw ContractError("obs_rmse: state length does not match the network");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < obs.network.size(); ++k) {
    if (!obs.active(k)) continue;
    const double d = x[obs.network.observed_indices[k]] - obs.values[static_cast<Eigen::Index>(k)];
    sum += d * d;
    ++n;
  }
  if (n == 0) throw UndefinedMetric("obs_rmse: no active observations");
  return std::sqrt(sum / static_cast<double>(n));
}

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw ContractError("pearson: length mismatch");
  if (a.size() < 3) throw UndefinedMetric("pearson: needs at least 3 points");
  const Eigen::ArrayXd da = a.array() - a.mean();
  const Eigen::ArrayXd db = b.array() - b.mean();
  const double saa = da.square().sum(), sbb = db.square().sum();
  if (!(saa > 0.0) || !(sbb > 0.0)) throw UndefinedMetric("pearson: zero variance");
  return std::clamp((da * db).sum() / std::sqrt(saa * sbb), -1.0, 1.0);
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(Eigen::Map<const Eigen::VectorXd>(a.data(), static_cast<Eigen::Index>(a.size())),
                 Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size())));
}

Eigen::VectorXd build_qc_thresholds(const std::vector<StateVector>& run, int lag) {
  if (lag < 0) throw ContractError("build_qc_thresholds: lag must be >= 0");
  if (run.size() < static_cast<std::size_t>(lag) + 100) {
    throw InsufficientSample("build_qc_thresholds: need at least lag + 100 states, got " + std::to_string(run.size()));
  }
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(run.front().size());
  for (std::size_t t = static_cast<std::size_t>(lag); t < run.size(); ++t) {
    sum += (run[t] - run[t - static_cast<std::size_t>(lag)]).cwiseAbs();
  }
  return sum / static_cast<double>(run.size() - static_cast<std::size_t>(lag));
}

ConfidenceInterval paired_block_bootstrap(const std::vector<std::vector<double>>& differences, int block_length,
                                          int resamples, double confidence, std::uint64_t seed) {
  if (differences.empty() || block_length < 1 || resamples < 1 || !(confidence > 0.0 && confidence < 1.0)) {
    throw ContractError("paired_block_bootstrap: invalid arguments");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : differences) {
    if (s.empty()) throw ContractError("paired_block_bootstrap: empty series");
    for (double d : s) total += d;
    count += s.size();
  }

  Rng rng(seed);
  std::vector<double> means;
  means.reserve(static_cast<std::size_t>(resamples));
  for (int r = 0; r < resamples; ++r) {
    double sum = 0.0;
    for (const auto& s : differences) {
      std::uniform_int_distribution<std::size_t> start(0, s.size() - 1);
      std::size_t filled = 0;
      while (filled < s.size()) {
        const std::size_t b = start(rng);
        for (int k = 0; k < block_length && filled < s.size(); ++k, ++filled) sum += s[(b + static_cast<std::size_t>(k)) % s.size()];
      }
    }
    means.push_back(sum / static_cast<double>(count));
  }
  std::sort(means.begin(), means.end());
  const double tail = 0.5 * (1.0 - confidence);
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(means.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, means.size() - 1);
    return means[lo] + (pos - static_cast<double>(lo)) * (means[hi] - means[lo]);
  };
  return {total / static_cast<double>(count), quantile(tail), quantile(1.0 - tail)};
}

}  // namespace hloba::harness
