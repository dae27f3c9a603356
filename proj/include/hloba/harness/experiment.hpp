#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "hloba/covariance.hpp"
#include "hloba/harness/config.hpp"
#include "hloba/latent/autoencoder.hpp"
#include "hloba/latent/o2l.hpp"
#include "hloba/observations.hpp"

namespace hloba::harness {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Long free run of the assimilating model, one state per DA interval.
struct Climatology {
  std::vector<StateVector> states;
  StateVector mean;
  Eigen::VectorXd std;
  /// RMSE of the climatological mean as an analysis.
  double rmse = 0.0;
};

/// Climatological estimates shared by every cycle of an experiment.
struct ClimatologicalCovariances {
  DiagonalCovariance b_z;
  DiagonalCovariance r_z;
  FullCovariance b;
  /// Per-dimension latent variance floor.
  Eigen::VectorXd latent_floor;
};

/// Trained networks, networks and climatological statistics for one configuration.
struct Artifacts {
  Climatology climatology;
  latent::AutoencoderModel ae;
  latent::O2LModel o2l;
  /// Synthesis uses the true noise level; assimilation carries the assumed error level.
  ObservationNetwork synthesis_network;
  ObservationNetwork assimilation_network;
  ClimatologicalCovariances covariances;
  Eigen::VectorXd qc_thresholds;
  latent::TrainingReport ae_report;
  latent::TrainingReport o2l_report;
};

/// Deterministic seed derived from a base seed and a stream tag.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag, std::uint64_t index = 0);

Climatology generate_climatology(const ExperimentConfig& config);
ObservationNetwork synthesis_network(const ExperimentConfig& config, const Climatology& clim);
ObservationNetwork assimilation_network(const ExperimentConfig& config, const Climatology& clim);

latent::AutoencoderModel build_autoencoder(const ExperimentConfig& config, const Climatology& clim,
                                           latent::TrainingReport* report = nullptr);
latent::O2LModel build_o2l(const ExperimentConfig& config, const Climatology& clim, const latent::AutoencoderModel& ae,
                           latent::TrainingReport* report = nullptr);

/// NMC pairs (short-lead, long-lead forecasts valid at one time) from perturbed truth-run states.
std::vector<ForecastPair> nmc_pairs(const ExperimentConfig& config, const Climatology& clim);
ClimatologicalCovariances estimate_climatological_covariances(const ExperimentConfig& config, const Climatology& clim,
                                                              const latent::AutoencoderModel& ae,
                                                              const latent::O2LModel& o2l);
nlohmann::json to_json(const ClimatologicalCovariances& cov);
ClimatologicalCovariances climatological_covariances_from_json(const nlohmann::json& doc);

/// Everything above; checkpoints named in the config are loaded instead of rebuilt.
Artifacts prepare_artifacts(const ExperimentConfig& config);
/// Rebuilds only the pieces that depend on observation settings, reusing the climatology and AE.
Artifacts with_observation_settings(const Artifacts& base, const ExperimentConfig& config);

/// Latent diagnostics at one slot of a latent run.
struct SlotDiagnostics {
  Eigen::VectorXd zb_error;
  Eigen::VectorXd zo_error;
  Eigen::VectorXd xb_error;
  Eigen::VectorXd xo_error;
  Eigen::VectorXd b_clim;
  Eigen::VectorXd b_ens;
  Eigen::VectorXd r_clim;
  Eigen::VectorXd r_ens;
  bool has_ensemble = false;
};

struct CycleRecord {
  long cycle = 0;
  /// Window-end analysis error: WRMSE against truth, or RMSE against withheld observations.
  double analysis_wrmse = 0.0;
  std::vector<double> slot_wrmse;
  /// Verification forecast error for leads 1..horizon intervals.
  std::vector<double> forecast_error;
  /// Window-end analysis minus truth.
  Eigen::VectorXd analysis_error;
  /// Diagnosed analysis standard deviation at the window end; empty for variational methods.
  Eigen::VectorXd diag_std;
  double mean_diag_std = kNaN;
  /// Decoded observation-only analysis error at the window end (HLOBA only).
  double ooa_wrmse = kNaN;
  int solver_iters = 0;
  std::vector<std::string> flags;
  std::vector<SlotDiagnostics> latent;
};

/// Runs the cycling experiment. `forcing_schedule`, when given, sets the forcing of both the
/// truth and the assimilating model per cycle. Throws ExperimentDiverged on sustained failure.
std::vector<CycleRecord> run_cycling_experiment(const ExperimentConfig& config, const Artifacts& artifacts,
                                                const std::vector<double>* forcing_schedule = nullptr);

struct WindowCorrelation {
  int window = 0;
  int blocks = 0;
  double rho = kNaN;
};

struct LatentCalibration {
  double zb_clim = kNaN;
  double zb_ens = kNaN;
  double zo_clim = kNaN;
  double zo_ens = kNaN;
  std::size_t samples = 0;
};

struct Decorrelation {
  double latent_b = kNaN;
  double latent_o = kNaN;
  double model_b = kNaN;
  double model_o = kNaN;
  std::size_t samples = 0;
};

struct EvaluationReport {
  std::string method;
  int cycles = 0;
  int spin_up_cycles = 0;
  int evaluated_cycles = 0;
  int flagged_cycles = 0;
  double mean_analysis_wrmse = kNaN;
  std::vector<double> mean_slot_wrmse;
  std::vector<double> mean_forecast_error;
  double forecast_error_at_horizon = kNaN;
  double mean_ooa_wrmse = kNaN;
  double mean_diag_std = kNaN;
  std::vector<WindowCorrelation> rho_x;
  std::optional<LatentCalibration> latent_calibration;
  std::optional<Decorrelation> decorrelation;
  nlohmann::json extra = nlohmann::json::object();
};

/// Aggregates records after the spin-up. For each window length the per-grid-point mean |error|
/// and mean diagnosed std over consecutive blocks are correlated across the grid; rho is the mean
/// over blocks. A window longer than the evaluated run raises InsufficientSample.
EvaluationReport evaluate(const std::vector<CycleRecord>& records, const std::vector<int>& windows, int spin_up_cycles,
                          const std::string& method);
nlohmann::json to_json(const EvaluationReport& report);

/// Mean analysis error of each post-spin-up cycle, in cycle order.
std::vector<double> analysis_series(const std::vector<CycleRecord>& records, int spin_up_cycles);

struct TuningPoint {
  HybridWeights weights;
  double score = kNaN;
};

struct TuningResult {
  HybridWeights best;
  SolverSettings solver;
  std::vector<TuningPoint> grid;
  int tuning_cycles = 0;
  std::uint64_t seed = 0;
};

/// Cartesian grid alpha x beta x inflation; one inflation factor applies to B and R.
std::vector<HybridWeights> tuning_grid(const ExperimentConfig& config);
/// Runs each grid point on the tuning seed and picks the lowest mean forecast error at the
/// horizon; ties keep the earlier point. Diverged points score +inf.
TuningResult tune(const ExperimentConfig& config, const Artifacts& artifacts, const std::vector<HybridWeights>& grid,
                  int tuning_cycles);
nlohmann::json to_json(const TuningResult& result);

struct DriftReport {
  EvaluationReport evaluation;
  std::vector<double> schedule;
  std::vector<double> block_forcing;
  std::vector<double> block_error;
  std::vector<double> block_std;
  double block_correlation = kNaN;
};

/// Cycling run under a per-cycle forcing schedule. Blocks are maximal runs of constant forcing
/// after the spin-up; the report correlates block-mean diagnosed std with block-mean error.
DriftReport regime_drift_experiment(const ExperimentConfig& config, const Artifacts& artifacts,
                                    const std::vector<double>& forcing_schedule);
nlohmann::json to_json(const DriftReport& report);

/// cycle,analysis_wrmse,fc_err_lead_1..H,mean_diag_std,solver_iters,flags with LF endings.
void write_cycles_csv(std::ostream& out, const std::vector<CycleRecord>& records, int horizon);

}  // namespace hloba::harness
