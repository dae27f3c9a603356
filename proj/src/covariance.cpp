#include "hloba/covariance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "hloba/error.hpp"
#include "hloba/json_io.hpp"

namespace hloba {

void HybridWeights::validate() const {
  if (!(alpha_ens >= 0.0 && alpha_ens <= 1.0)) throw ConfigurationError("alpha_ens must lie in [0, 1]");
  if (!(beta_ens >= 0.0 && beta_ens <= 1.0)) throw ConfigurationError("beta_ens must lie in [0, 1]");
  if (!(inflation_b > 0.0) || !(inflation_r > 0.0)) throw ConfigurationError("inflation factors must be positive");
}

namespace covariance {

namespace {

DiagonalCovariance maybe_floor(DiagonalCovariance cov, const Eigen::VectorXd& min_var) {
  return min_var.size() == 0 ? cov : floor(cov, min_var);
}

/// Observations of `x` at the positive-mask points of `network`, as a dense image.
Eigen::VectorXd perturbed_image(const StateVector& x, const ObservationNetwork& network, const Eigen::VectorXd& mask,
                                Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd image = Eigen::VectorXd::Zero(network.n_x);
  for (std::size_t k = 0; k < network.size(); ++k) {
    const int i = network.observed_indices[k];
    const double e = normal(rng);
    if (mask[i] > 0.0) image[i] = x[i] + network.noise_std[k] * e;
  }
  return image;
}

Eigen::VectorXd network_mask(const ObservationNetwork& network) {
  Eigen::VectorXd mask = Eigen::VectorXd::Zero(network.n_x);
  for (int i : network.observed_indices) mask[i] = 1.0;
  return mask;
}

}  // namespace

DiagonalCovariance nmc_latent_b(const latent::AutoencoderModel& ae, const std::vector<ForecastPair>& pairs,
                                const Eigen::VectorXd& min_var) {
  if (pairs.size() < 10) throw InsufficientSample("NMC estimate needs at least 10 forecast pairs");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(ae.n_z);
  for (const auto& [short_lead, long_lead] : pairs) sum += (ae.encode(long_lead) - ae.encode(short_lead)).cwiseAbs2();
  return maybe_floor({0.5 * sum / static_cast<double>(pairs.size())}, min_var);
}

DiagonalCovariance ensemble_cov_diag(const std::vector<LatentVector>& members) {
  if (members.size() < 2) throw ContractError("ensemble variance needs at least two members");
  const Eigen::Index n = members.front().size();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(n);
  for (const LatentVector& z : members) {
    if (z.size() != n) throw ContractError("ensemble members have inconsistent lengths");
    mean += z;
  }
  mean /= static_cast<double>(members.size());
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(n);
  for (const LatentVector& z : members) sum += (z - mean).cwiseAbs2();
  return {sum / static_cast<double>(members.size() - 1)};
}

DiagonalCovariance clim_latent_r(const latent::O2LModel& o2l, const latent::AutoencoderModel& ae,
                                 const std::vector<StateVector>& archive, const ObservationNetwork& network, Rng& rng,
                                 const Eigen::VectorXd& min_var) {
  if (archive.size() < 500) throw InsufficientSample("climatological R_z needs at least 500 archive states");
  const Eigen::VectorXd mask = network_mask(network);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(ae.n_z);
  for (const StateVector& x : archive) {
    const LatentVector zo = latent::forward(o2l.layers, latent::o2l_input(o2l, perturbed_image(x, network, mask, rng), mask));
    sum += (zo - ae.encode(x)).cwiseAbs2();
  }
  return maybe_floor({0.5 * sum / static_cast<double>(archive.size())}, min_var);
}

DiagonalCovariance ensemble_latent_r(const latent::O2LModel& o2l, const latent::AutoencoderModel& ae,
                                     const EnsembleSet& ensemble, const ObservationNetwork& network,
                                     const Eigen::VectorXd& mask, Rng& rng, bool centered) {
  const std::size_t n = ensemble.members.size();
  if (n < 2) throw ContractError("ensemble R_z needs at least two members");
  if (mask.size() != network.n_x) throw ContractError("mask must span the grid");
  std::vector<LatentVector> discrepancy;
  for (const StateVector& x : ensemble.members) {
    const LatentVector zo = latent::forward(o2l.layers, latent::o2l_input(o2l, perturbed_image(x, network, mask, rng), mask));
    discrepancy.push_back(zo - ae.encode(x));
  }
  Eigen::VectorXd center = Eigen::VectorXd::Zero(ae.n_z);
  if (centered) {
    for (const LatentVector& d : discrepancy) center += d;
    center /= static_cast<double>(n);
  }
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(ae.n_z);
  for (const LatentVector& d : discrepancy) sum += (d - center).cwiseAbs2();
  return {sum / static_cast<double>(n - 1)};
}

DiagonalCovariance hybrid_blend(const DiagonalCovariance& clim, const DiagonalCovariance& ens, double weight) {
  if (!(weight >= 0.0 && weight <= 1.0)) throw ContractError("hybrid weight must lie in [0, 1]");
  if (clim.size() != ens.size()) throw ContractError("blended covariances differ in length");
  if (weight == 0.0) return clim;
  if (weight == 1.0) return ens;
  return {weight * ens.variances + (1.0 - weight) * clim.variances};
}

DiagonalCovariance inflate(const DiagonalCovariance& cov, double factor) {
  if (!(factor > 0.0)) throw ContractError("inflation factor must be positive");
  return {factor * cov.variances};
}

DiagonalCovariance floor(const DiagonalCovariance& cov, double min_var) {
  if (!(min_var > 0.0)) throw ContractError("variance floor must be positive");
  return {cov.variances.cwiseMax(min_var)};
}

DiagonalCovariance floor(const DiagonalCovariance& cov, const Eigen::VectorXd& min_var) {
  if (min_var.size() != cov.size()) throw ContractError("variance floor length mismatch");
  if (!(min_var.array() > 0.0).all()) throw ContractError("variance floor must be positive");
  return {cov.variances.cwiseMax(min_var)};
}

EnsembleSet assemble_time_lagged_ensemble(const AnalysisArchive& archive, const ModelConfig& model, long valid_time,
                                          int size) {
  if (size < 1) throw ContractError("ensemble size must be positive");
  EnsembleSet ens;
  ens.valid_time = valid_time;
  for (int k = 1; k <= size; ++k) {
    const auto it = archive.find(valid_time - k);
    if (it == archive.end()) continue;
    const auto steps = static_cast<std::size_t>(k) * static_cast<std::size_t>(model.steps_per_da_interval);
    ens.members.push_back(dynamics::forecast_state(it->second, steps, model));
    ens.lead_times.push_back(k);
  }
  if (ens.members.size() < 2) {
    throw SpinUpRequired("time-lagged ensemble at interval " + std::to_string(valid_time) + " has " +
                         std::to_string(ens.members.size()) + " members");
  }
  return ens;
}

double gaspari_cohn(double distance, double support) {
  distance = std::abs(distance);
  if (distance == 0.0 || std::isinf(support)) return 1.0;
  if (distance >= support) return 0.0;
  const double r = 2.0 * distance / support;
  if (r <= 1.0) {
    return (((-0.25 * r + 0.5) * r + 0.625) * r - 5.0 / 3.0) * r * r + 1.0;
  }
  return ((((r / 12.0 - 0.5) * r + 0.625) * r + 5.0 / 3.0) * r - 5.0) * r + 4.0 - 2.0 / (3.0 * r);
}

int cyclic_distance(int i, int j, int n) {
  const int d = std::abs(i - j) % n;
  return std::min(d, n - d);
}

FullCovariance localize_and_regularize(const Eigen::MatrixXd& sample, double localization_radius,
                                       const RidgeSettings& ridge) {
  if (sample.rows() != sample.cols() || sample.rows() == 0) throw ContractError("covariance must be square");
  if (!(localization_radius >= 0.0)) throw ContractError("localization radius must be non-negative");
  const auto n = static_cast<int>(sample.rows());
  Eigen::MatrixXd c(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) c(i, j) = sample(i, j) * gaspari_cohn(cyclic_distance(i, j, n), localization_radius);
  c = 0.5 * (c + c.transpose());
  // The Schur product of PSD matrices is PSD, so a negative eigenvalue here is rounding error.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(c, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (lo < -1e-10 * std::max(hi, 0.0)) {
    throw EstimationError("localized covariance has eigenvalue " + std::to_string(lo) + " (max " +
                          std::to_string(hi) + ")");
  }
  const double mean_var = c.diagonal().mean();
  if (!(mean_var > 0.0)) throw EstimationError("sample covariance has no variance");
  c.diagonal().array() += std::max(0.0, -lo) + ridge.relative_ridge * mean_var;
  Eigen::LLT<Eigen::MatrixXd> llt(c);
  if (llt.info() != Eigen::Success) throw EstimationError("covariance is not positive definite after the ridge");
  return {std::move(c)};
}

FullCovariance model_space_b_nmc(const std::vector<ForecastPair>& pairs, double localization_radius,
                                 const RidgeSettings& ridge) {
  if (pairs.size() < 10) throw InsufficientSample("NMC estimate needs at least 10 forecast pairs");
  const Eigen::Index n = pairs.front().first.size();
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(n, n);
  for (const auto& [a, b] : pairs) {
    const Eigen::VectorXd d = b - a;
    sum.noalias() += d * d.transpose();
  }
  return localize_and_regularize(0.5 * sum / static_cast<double>(pairs.size()), localization_radius, ridge);
}

FullCovariance model_space_b_ensemble(const std::vector<StateVector>& members, double localization_radius,
                                      const RidgeSettings& ridge) {
  if (members.size() < 2) throw ContractError("ensemble covariance needs at least two members");
  const Eigen::Index n = members.front().size();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(n);
  for (const StateVector& x : members) mean += x;
  mean /= static_cast<double>(members.size());
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(n, n);
  for (const StateVector& x : members) sum.noalias() += (x - mean) * (x - mean).transpose();
  return localize_and_regularize(sum / static_cast<double>(members.size() - 1), localization_radius, ridge);
}

double latent_decorrelation_report(const std::vector<Eigen::VectorXd>& error_samples) {
  if (error_samples.size() < 100) throw InsufficientSample("decorrelation diagnostic needs at least 100 samples");
  const Eigen::Index dim = error_samples.front().size();
  if (dim < 2) throw ContractError("decorrelation diagnostic needs at least two dimensions");
  Eigen::MatrixXd data(static_cast<Eigen::Index>(error_samples.size()), dim);
  for (std::size_t s = 0; s < error_samples.size(); ++s) data.row(static_cast<Eigen::Index>(s)) = error_samples[s].transpose();
  data.rowwise() -= data.colwise().mean();
  const Eigen::MatrixXd cov = data.transpose() * data;
  const Eigen::VectorXd sd = cov.diagonal().cwiseSqrt();
  double total = 0.0;
  long count = 0;
  for (Eigen::Index i = 0; i < dim; ++i) {
    for (Eigen::Index j = i + 1; j < dim; ++j) {
      if (sd[i] == 0.0 || sd[j] == 0.0) throw UndefinedMetric("a dimension has zero error variance");
      total += std::abs(cov(i, j) / (sd[i] * sd[j]));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

nlohmann::json to_json(const DiagonalCovariance& cov, const std::string& kind) {
  return {{"kind", kind}, {"length", cov.size()}, {"variances", json_io::to_json(cov.variances)}};
}

nlohmann::json to_json(const FullCovariance& cov, const std::string& kind) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < cov.matrix.rows(); ++i) rows.push_back(json_io::to_json(cov.matrix.row(i).transpose()));
  return {{"kind", kind}, {"length", cov.matrix.rows()}, {"matrix", std::move(rows)}};
}

std::string covariance_from_json(const nlohmann::json& doc, DiagonalCovariance* diagonal, FullCovariance* full) {
  try {
    const auto length = doc.at("length").get<Eigen::Index>();
    if (doc.contains("variances")) {
      if (diagonal == nullptr) throw ConfigurationError("expected a full covariance");
      diagonal->variances = json_io::vector_from_json(doc.at("variances"));
      if (diagonal->size() != length) throw ConfigurationError("variances length mismatch");
    } else {
      if (full == nullptr) throw ConfigurationError("expected a diagonal covariance");
      const auto& rows = doc.at("matrix");
      if (static_cast<Eigen::Index>(rows.size()) != length) throw ConfigurationError("matrix row count mismatch");
      full->matrix.resize(length, length);
      for (Eigen::Index i = 0; i < length; ++i) {
        const Eigen::VectorXd row = json_io::vector_from_json(rows[static_cast<std::size_t>(i)]);
        if (row.size() != length) throw ConfigurationError("matrix row length mismatch");
        full->matrix.row(i) = row.transpose();
      }
    }
    return doc.at("kind").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError(std::string("malformed covariance document: ") + e.what());
  }
}

}  // namespace covariance
}  // namespace hloba
