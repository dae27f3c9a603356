#pragma once

#include <map>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "hloba/dynamics.hpp"
#include "hloba/latent/autoencoder.hpp"
#include "hloba/latent/o2l.hpp"
#include "hloba/observations.hpp"

namespace hloba {

struct DiagonalCovariance {
  Eigen::VectorXd variances;
  Eigen::Index size() const { return variances.size(); }
};

struct FullCovariance {
  Eigen::MatrixXd matrix;
};

/// Members valid at one time. lead_times are in DA intervals.
struct EnsembleSet {
  std::vector<StateVector> members;
  std::vector<int> lead_times;
  long valid_time = 0;
};

struct HybridWeights {
  double alpha_ens = 0.5;
  double beta_ens = 1.0;
  double inflation_b = 1.0;
  double inflation_r = 1.0;
  void validate() const;
};

/// Analyses keyed by DA interval index.
using AnalysisArchive = std::map<long, StateVector>;

/// Two forecasts valid at the same time: the shorter lead first.
using ForecastPair = std::pair<StateVector, StateVector>;

namespace covariance {

/// Half the mean squared latent difference of each pair. Floored at min_var when it is non-empty.
DiagonalCovariance nmc_latent_b(const latent::AutoencoderModel& ae, const std::vector<ForecastPair>& pairs,
                                const Eigen::VectorXd& min_var = {});

/// Unbiased per-dimension variance about the ensemble mean.
DiagonalCovariance ensemble_cov_diag(const std::vector<LatentVector>& members);

/// Half the mean squared O2L-minus-encoder discrepancy over an archive, with observations
/// perturbed by the network's noise standard deviations.
DiagonalCovariance clim_latent_r(const latent::O2LModel& o2l, const latent::AutoencoderModel& ae,
                                 const std::vector<StateVector>& archive, const ObservationNetwork& network, Rng& rng,
                                 const Eigen::VectorXd& min_var = {});

/// Sum over members of the squared O2L-minus-encoder discrepancy divided by N_e - 1, with no
/// mean subtraction. `centered` subtracts the member-mean discrepancy first. Observations are
/// simulated only where `mask` is positive.
DiagonalCovariance ensemble_latent_r(const latent::O2LModel& o2l, const latent::AutoencoderModel& ae,
                                     const EnsembleSet& ensemble, const ObservationNetwork& network,
                                     const Eigen::VectorXd& mask, Rng& rng, bool centered = false);

/// weight * ens + (1 - weight) * clim.
DiagonalCovariance hybrid_blend(const DiagonalCovariance& clim, const DiagonalCovariance& ens, double weight);
DiagonalCovariance inflate(const DiagonalCovariance& cov, double factor);
DiagonalCovariance floor(const DiagonalCovariance& cov, double min_var);
DiagonalCovariance floor(const DiagonalCovariance& cov, const Eigen::VectorXd& min_var);

/// Member k forecasts the analysis from k intervals before valid_time up to valid_time.
/// With fewer than `size` analyses available the ensemble shrinks; below two members it throws
/// SpinUpRequired.
EnsembleSet assemble_time_lagged_ensemble(const AnalysisArchive& archive, const ModelConfig& model, long valid_time,
                                          int size);

/// Gaspari-Cohn fifth-order taper, 1 at distance 0 and exactly 0 from `support` on.
double gaspari_cohn(double distance, double support);
/// Shortest distance between two points on a ring of n.
int cyclic_distance(int i, int j, int n);

struct RidgeSettings {
  /// Added to the diagonal as a fraction of the mean variance.
  double relative_ridge = 1e-6;
};

/// Half the mean outer product of pair differences, tapered and ridge-regularized.
FullCovariance model_space_b_nmc(const std::vector<ForecastPair>& pairs, double localization_radius,
                                 const RidgeSettings& ridge = {});
/// Centered sample covariance of the members, tapered and ridge-regularized.
FullCovariance model_space_b_ensemble(const std::vector<StateVector>& members, double localization_radius,
                                      const RidgeSettings& ridge = {});
/// Applies the taper and ridge to a raw sample covariance.
FullCovariance localize_and_regularize(const Eigen::MatrixXd& sample, double localization_radius,
                                       const RidgeSettings& ridge = {});

/// Mean absolute off-diagonal Pearson correlation between the columns of the samples.
double latent_decorrelation_report(const std::vector<Eigen::VectorXd>& error_samples);

nlohmann::json to_json(const DiagonalCovariance& cov, const std::string& kind);
nlohmann::json to_json(const FullCovariance& cov, const std::string& kind);
/// Returns the kind string and fills exactly one of the two outputs.
std::string covariance_from_json(const nlohmann::json& doc, DiagonalCovariance* diagonal, FullCovariance* full);

}  // namespace covariance
}  // namespace hloba
