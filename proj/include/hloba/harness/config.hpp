#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hloba/assimilation.hpp"
#include "hloba/covariance.hpp"
#include "hloba/dynamics.hpp"
#include "hloba/latent/autoencoder.hpp"
#include "hloba/latent/o2l.hpp"

namespace hloba::harness {

enum class ExperimentMode { idealized_twin, imperfect_reference };
enum class Method { hloba, h3dvar, h4dvar, hl3dvar, hl4dvar };

std::string mode_name(ExperimentMode m);
ExperimentMode mode_from_name(const std::string& name);
std::string method_name(Method m);
Method method_from_name(const std::string& name);
bool is_latent(Method m);
bool is_four_dimensional(Method m);

struct LatentSettings {
  latent::AeVariant variant = latent::AeVariant::mlp;
  int n_z = 12;
  int archive_size = 20000;
  std::uint64_t archive_seed = 7;
  /// RK4 steps discarded before the archive starts.
  int spin_up_steps = 1000;
  latent::TrainingSchedule ae_schedule;
  latent::TrainingSchedule o2l_schedule;
  latent::O2LOptions o2l_options;
  std::uint64_t ae_seed = 11;
  std::uint64_t o2l_seed = 13;
  /// Optional checkpoints; when set they are loaded instead of trained.
  std::string ae_checkpoint;
  std::string o2l_checkpoint;
};

struct ObservationSettings {
  int stride = 3;
  int offset = 0;
  /// Synthesis noise as a fraction of the climatological standard deviation.
  double noise_level = 0.03;
  /// Error level assumed by the assimilation; defaults to noise_level.
  std::optional<double> error_level;
  /// Negative means the mode default: 0 in the twin, 0.1 with the imperfect reference.
  double withheld_fraction = -1.0;
  int qc_lag = 8;

  double assumed_error_level() const { return error_level.value_or(noise_level); }
};

struct CovarianceSettings {
  /// 0 runs on climatological estimates alone.
  int ensemble_size = 3;
  HybridWeights weights;
  double localization_radius = 4.0;
  int nmc_short_lead = 4;
  int nmc_long_lead = 8;
  int nmc_pairs = 2000;
  /// Initial-condition perturbation of NMC forecasts, as a fraction of climatological std.
  double nmc_perturbation = 0.1;
  /// Latent variances are floored at this multiple of the climatological latent variance.
  double variance_floor = 1e-8;
  bool centered_r = false;
  /// Optional JSON with precomputed climatological estimates.
  std::string checkpoint;
};

struct MethodSettings {
  Method name = Method::hloba;
  /// "default" picks L-BFGS for 3DVar and Adam for the others.
  std::string optimizer = "default";
  /// 0 picks 0.05 for latent problems and 0.02 in model space.
  double learning_rate = 0.0;
  int max_iters = 500;
  int patience = 20;
  double min_improvement = 1e-8;
  double tolerance = 1e-6;

  SolverSettings solver() const;
};

struct ExperimentSettings {
  ExperimentMode mode = ExperimentMode::idealized_twin;
  int cycles = 1000;
  int window_slots = 4;
  /// Verification forecast length in DA intervals.
  int horizon = 20;
  int spin_up_cycles = 20;
  std::uint64_t seed = 1;
  bool tuning = false;
  std::vector<int> aggregation_windows{1, 20, 200};
  double divergence_factor = 10.0;
  int divergence_cycles = 10;
  int tuning_cycles = 100;
  std::uint64_t tuning_seed = 1001;
  /// "climatology" draws the first background from the archive; "truth" starts from the truth.
  std::string initial_background = "climatology";
  std::vector<double> tuning_alpha{0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<double> tuning_beta{0.0, 0.5, 1.0};
  std::vector<double> tuning_inflation{1.0, 1.1, 1.3};
};

struct ExperimentConfig {
  ModelConfig model;
  /// Forcing of the truth run; defaults to model.forcing in the twin and 8.2 otherwise.
  std::optional<double> truth_forcing;
  LatentSettings latent;
  ObservationSettings observations;
  CovarianceSettings covariance;
  MethodSettings method;
  ExperimentSettings experiment;

  double truth_run_forcing() const;
  double withheld_fraction() const;
  bool qc_enabled() const { return experiment.mode == ExperimentMode::imperfect_reference; }

  /// Throws ConfigurationError on any violated invariant.
  void validate() const;
};

/// Parses TOML with sections [model], [latent], [observations], [covariance], [method],
/// [experiment]. Missing keys keep their defaults; unknown sections or keys are rejected.
ExperimentConfig config_from_toml(const std::string& text);
ExperimentConfig load_config(const std::string& path);

nlohmann::json to_json(const ExperimentConfig& config);

/// Refuses a paired comparison whose configs differ outside the declared factor keys
/// ("section.key", e.g. "covariance.beta_ens").
void check_paired(const ExperimentConfig& a, const ExperimentConfig& b, const std::vector<std::string>& factor);

}  // namespace hloba::harness
