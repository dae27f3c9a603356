#include "hloba/harness/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>

#include "hloba/assimilation.hpp"
#include "hloba/error.hpp"
#include "hloba/harness/metrics.hpp"
#include "hloba/json_io.hpp"

namespace hloba::harness {

namespace {

// Stream tags for derive_seed.
enum : std::uint64_t {
  kTruthStream = 1,
  kObsStream = 2,
  kSplitStream = 3,
  kBackgroundStream = 4,
  kEnsembleRStream = 5,
  kNmcStream = 6,
  kClimRStream = 7,
};

Eigen::VectorXd standard_normal(Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

double finite_mean(const std::vector<double>& values) {
  double sum = 0.0;
  std::size_t n = 0;
  for (double v : values) {
    if (std::isfinite(v)) {
      sum += v;
      ++n;
    }
  }
  return n == 0 ? kNaN : sum / static_cast<double>(n);
}

std::string format_number(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag, std::uint64_t index) {
  // splitmix64 finalizer applied to a combination of the three inputs.
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ tag) ^ index);
}

Climatology generate_climatology(const ExperimentConfig& config) {
  const ModelConfig& model = config.model;
  Rng rng(config.latent.archive_seed);
  StateVector x = (model.forcing + standard_normal(model.n_x, rng).array()).matrix();
  x = dynamics::forecast_state(x, static_cast<std::size_t>(config.latent.spin_up_steps), model);

  Climatology clim;
  clim.states.reserve(static_cast<std::size_t>(config.latent.archive_size));
  for (int k = 0; k < config.latent.archive_size; ++k) {
    x = dynamics::forecast_state(x, static_cast<std::size_t>(model.steps_per_da_interval), model);
    clim.states.push_back(x);
  }
  clim.mean = StateVector::Zero(model.n_x);
  for (const auto& s : clim.states) clim.mean += s;
  clim.mean /= static_cast<double>(clim.states.size());
  Eigen::VectorXd var = Eigen::VectorXd::Zero(model.n_x);
  for (const auto& s : clim.states) var += (s - clim.mean).cwiseAbs2();
  var /= static_cast<double>(clim.states.size() - 1);
  clim.std = var.cwiseSqrt();
  clim.rmse = std::sqrt(var.mean());
  return clim;
}

ObservationNetwork synthesis_network(const ExperimentConfig& config, const Climatology& clim) {
  const auto& o = config.observations;
  return ObservationNetwork::every_kth(config.model.n_x, o.stride, o.offset, clim.std, o.noise_level);
}

ObservationNetwork assimilation_network(const ExperimentConfig& config, const Climatology& clim) {
  const auto& o = config.observations;
  return ObservationNetwork::every_kth(config.model.n_x, o.stride, o.offset, clim.std, o.assumed_error_level());
}

latent::AutoencoderModel build_autoencoder(const ExperimentConfig& config, const Climatology& clim,
                                           latent::TrainingReport* report) {
  const auto& l = config.latent;
  if (!l.ae_checkpoint.empty()) {
    auto ae = latent::autoencoder_from_json(json_io::read_file(l.ae_checkpoint));
    if (ae.n_x != config.model.n_x || ae.n_z != l.n_z) {
      throw ConfigurationError("autoencoder checkpoint " + l.ae_checkpoint + " does not match n_x/n_z");
    }
    return ae;
  }
  if (l.variant == latent::AeVariant::linear) return latent::fit_linear_ae(clim.states, l.n_z);
  auto [ae, rep] = latent::train_mlp_ae(clim.states, l.n_z, l.ae_schedule, l.ae_seed);
  if (report != nullptr) *report = rep;
  return ae;
}

latent::O2LModel build_o2l(const ExperimentConfig& config, const Climatology& clim, const latent::AutoencoderModel& ae,
                           latent::TrainingReport* report) {
  const auto& l = config.latent;
  if (!l.o2l_checkpoint.empty()) {
    auto o2l = latent::o2l_from_json(json_io::read_file(l.o2l_checkpoint));
    if (o2l.ae_fingerprint != ae.fingerprint()) {
      throw ConfigurationError("O2L checkpoint " + l.o2l_checkpoint + " was trained against a different autoencoder");
    }
    return o2l;
  }
  auto [o2l, rep] = latent::train_o2l(ae, clim.states, synthesis_network(config, clim), l.o2l_schedule, l.o2l_seed,
                                      l.o2l_options);
  if (report != nullptr) *report = rep;
  return o2l;
}

std::vector<ForecastPair> nmc_pairs(const ExperimentConfig& config, const Climatology& clim) {
  const auto& c = config.covariance;
  const ModelConfig& model = config.model;
  const auto steps = static_cast<std::size_t>(model.steps_per_da_interval);
  const std::size_t first = static_cast<std::size_t>(c.nmc_long_lead);
  if (clim.states.size() <= first) throw InsufficientSample("archive too short for NMC pairs");
  const std::size_t span = clim.states.size() - first;
  const std::size_t count = std::min(static_cast<std::size_t>(c.nmc_pairs), span);
  Rng rng(derive_seed(config.latent.archive_seed, kNmcStream));

  std::vector<ForecastPair> pairs;
  pairs.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t t = first + k * span / count;
    auto start = [&](int lead) {
      const StateVector& x = clim.states[t - static_cast<std::size_t>(lead)];
      const StateVector pert = c.nmc_perturbation * clim.std.cwiseProduct(standard_normal(model.n_x, rng));
      return dynamics::forecast_state(x + pert, static_cast<std::size_t>(lead) * steps, model);
    };
    StateVector shorter = start(c.nmc_short_lead);
    StateVector longer = start(c.nmc_long_lead);
    pairs.emplace_back(std::move(shorter), std::move(longer));
  }
  return pairs;
}

ClimatologicalCovariances estimate_climatological_covariances(const ExperimentConfig& config, const Climatology& clim,
                                                              const latent::AutoencoderModel& ae,
                                                              const latent::O2LModel& o2l) {
  const int n_z = ae.n_z;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(n_z), sq = Eigen::VectorXd::Zero(n_z);
  for (const auto& s : clim.states) {
    const LatentVector z = ae.encode(s);
    mean += z;
    sq += z.cwiseAbs2();
  }
  const double n = static_cast<double>(clim.states.size());
  const Eigen::VectorXd latent_var = (sq - mean.cwiseAbs2() / n) / (n - 1.0);

  ClimatologicalCovariances out;
  out.latent_floor = config.covariance.variance_floor * latent_var;
  const auto pairs = nmc_pairs(config, clim);
  out.b_z = covariance::nmc_latent_b(ae, pairs, out.latent_floor);
  out.b = covariance::model_space_b_nmc(pairs, config.covariance.localization_radius);

  // The O2L discrepancy is measured on the held-out tail of the archive, not on its training part.
  const auto tail = static_cast<std::size_t>(
      std::floor(config.latent.o2l_schedule.validation_fraction * static_cast<double>(clim.states.size())));
  const std::size_t begin = clim.states.size() - std::max<std::size_t>(tail, 500);
  const std::vector<StateVector> held_out(clim.states.begin() + static_cast<std::ptrdiff_t>(begin), clim.states.end());
  Rng rng(derive_seed(config.latent.archive_seed, kClimRStream));
  out.r_z = covariance::clim_latent_r(o2l, ae, held_out, assimilation_network(config, clim), rng, out.latent_floor);
  return out;
}

nlohmann::json to_json(const ClimatologicalCovariances& cov) {
  return {{"b_z", covariance::to_json(cov.b_z, "b_z_clim")},
          {"r_z", covariance::to_json(cov.r_z, "r_z_clim")},
          {"b", covariance::to_json(cov.b, "b_clim")},
          {"latent_floor", json_io::to_json(cov.latent_floor)}};
}

ClimatologicalCovariances climatological_covariances_from_json(const nlohmann::json& doc) {
  ClimatologicalCovariances out;
  FullCovariance unused_full;
  DiagonalCovariance unused_diag;
  covariance::covariance_from_json(doc.at("b_z"), &out.b_z, &unused_full);
  covariance::covariance_from_json(doc.at("r_z"), &out.r_z, &unused_full);
  covariance::covariance_from_json(doc.at("b"), &unused_diag, &out.b);
  out.latent_floor = json_io::vector_from_json(doc.at("latent_floor"));
  return out;
}

Artifacts prepare_artifacts(const ExperimentConfig& config) {
  config.validate();
  Artifacts a;
  a.climatology = generate_climatology(config);
  a.ae = build_autoencoder(config, a.climatology, &a.ae_report);
  a.synthesis_network = synthesis_network(config, a.climatology);
  a.assimilation_network = assimilation_network(config, a.climatology);
  a.o2l = build_o2l(config, a.climatology, a.ae, &a.o2l_report);
  if (!config.covariance.checkpoint.empty()) {
    a.covariances = climatological_covariances_from_json(json_io::read_file(config.covariance.checkpoint));
    if (a.covariances.b_z.size() != a.ae.n_z || a.covariances.b.matrix.rows() != config.model.n_x) {
      throw ConfigurationError("covariance checkpoint does not match the configured dimensions");
    }
  } else {
    a.covariances = estimate_climatological_covariances(config, a.climatology, a.ae, a.o2l);
  }
  a.qc_thresholds = build_qc_thresholds(a.climatology.states, config.observations.qc_lag);
  return a;
}

Artifacts with_observation_settings(const Artifacts& base, const ExperimentConfig& config) {
  Artifacts a;
  a.climatology = base.climatology;
  a.ae = base.ae;
  a.ae_report = base.ae_report;
  a.synthesis_network = synthesis_network(config, a.climatology);
  a.assimilation_network = assimilation_network(config, a.climatology);
  a.o2l = build_o2l(config, a.climatology, a.ae, &a.o2l_report);
  a.covariances = estimate_climatological_covariances(config, a.climatology, a.ae, a.o2l);
  a.qc_thresholds = build_qc_thresholds(a.climatology.states, config.observations.qc_lag);
  return a;
}

namespace {

/// State shared by the cycles of one run.
class CyclingRun {
 public:
  CyclingRun(const ExperimentConfig& config, const Artifacts& artifacts, const std::vector<double>* schedule)
      : cfg_(config), a_(artifacts), schedule_(schedule), solver_(config.method.solver()) {
    const auto& e = cfg_.experiment;
    if (schedule_ != nullptr && schedule_->size() != static_cast<std::size_t>(e.cycles)) {
      throw ContractError("forcing schedule length must equal the number of cycles");
    }
    if (a_.ae.n_x != cfg_.model.n_x || a_.ae.n_z != cfg_.latent.n_z) {
      throw ConfigurationError("artifacts do not match the configured dimensions");
    }
    steps_ = static_cast<std::size_t>(cfg_.model.steps_per_da_interval);
    build_truth_and_observations();
  }

  std::vector<CycleRecord> run() {
    const auto& e = cfg_.experiment;
    Rng pick(derive_seed(e.seed, kBackgroundStream));
    std::uniform_int_distribution<std::size_t> index(0, a_.climatology.states.size() - 1);
    StateVector background = a_.climatology.states[index(pick)];
    if (e.initial_background == "truth") background = truth_.front();

    std::vector<CycleRecord> records;
    records.reserve(static_cast<std::size_t>(e.cycles));
    int bad_streak = 0;
    for (int c = 0; c < e.cycles; ++c) {
      CycleRecord rec = run_cycle(c, background);
      const bool bad = !std::isfinite(rec.analysis_wrmse) ||
                       rec.analysis_wrmse > e.divergence_factor * a_.climatology.rmse;
      bad_streak = bad ? bad_streak + 1 : 0;
      if (bad_streak >= e.divergence_cycles) {
        throw ExperimentDiverged(method_name(cfg_.method.name) + " diverged at cycle " + std::to_string(c) +
                                 ": analysis error above " + format_number(e.divergence_factor) +
                                 "x climatology for " + std::to_string(bad_streak) + " cycles");
      }
      records.push_back(std::move(rec));
    }
    return records;
  }

 private:
  ModelConfig model_at(int cycle) const {
    ModelConfig m = cfg_.model;
    if (schedule_ != nullptr) m.forcing = (*schedule_)[static_cast<std::size_t>(cycle)];
    return m;
  }

  ModelConfig truth_model_at(int cycle) const {
    ModelConfig m = cfg_.model;
    m.forcing = schedule_ != nullptr ? (*schedule_)[static_cast<std::size_t>(cycle)] : cfg_.truth_run_forcing();
    return m;
  }

  void build_truth_and_observations() {
    const auto& e = cfg_.experiment;
    const int w = e.window_slots;
    const long last = static_cast<long>(e.cycles) * w - 1 + e.horizon;
    Rng rng(derive_seed(e.seed, kTruthStream));
    StateVector x = (a_.climatology.mean.array() +
                     a_.climatology.std.array() * standard_normal(cfg_.model.n_x, rng).array())
                        .matrix();
    x = dynamics::forecast_state(x, static_cast<std::size_t>(cfg_.latent.spin_up_steps), truth_model_at(0));
    truth_.reserve(static_cast<std::size_t>(last + 1));
    truth_.push_back(x);
    for (long t = 0; t < last; ++t) {
      const int cycle = static_cast<int>(std::min<long>(t / w, e.cycles - 1));
      truth_.push_back(dynamics::forecast_state(truth_.back(), steps_, truth_model_at(cycle)));
    }

    const double fraction = cfg_.withheld_fraction();
    for (long t = 0; t <= last; ++t) {
      Rng obs_rng(derive_seed(e.seed, kObsStream, static_cast<std::uint64_t>(t)));
      ObservationSet obs = observations::synthesize(truth_[static_cast<std::size_t>(t)], a_.synthesis_network, obs_rng, t);
      obs.network = a_.assimilation_network;
      // The split stream restarts every interval, so the withheld points are the same throughout.
      Rng split_rng(derive_seed(e.seed, kSplitStream));
      auto [assimilated, withheld] = observations::split_withheld(obs, fraction, split_rng);
      assimilated_.push_back(std::move(assimilated));
      withheld_.push_back(std::move(withheld));
    }
  }

  double score(const StateVector& x, long t) const {
    if (!x.allFinite()) return kNaN;
    if (cfg_.experiment.mode == ExperimentMode::idealized_twin) {
      return weighted_rmse(x, truth_[static_cast<std::size_t>(t)]);
    }
    try {
      return obs_rmse(x, withheld_[static_cast<std::size_t>(t)]);
    } catch (const UndefinedMetric&) {
      return kNaN;
    }
  }

  ObservationSet screened(const StateVector& x_b, const ObservationSet& obs, int& rejected) const {
    if (!cfg_.qc_enabled()) return obs;
    ObservationSet out = observations::qc_filter(obs, x_b, a_.qc_thresholds);
    rejected += static_cast<int>(obs.active_count() - out.active_count());
    return out;
  }

  std::optional<EnsembleSet> ensemble_at(long t, const ModelConfig& model) const {
    if (cfg_.covariance.ensemble_size == 0) return std::nullopt;
    try {
      return covariance::assemble_time_lagged_ensemble(archive_, model, t, cfg_.covariance.ensemble_size);
    } catch (const SpinUpRequired&) {
      return std::nullopt;
    }
  }

  DiagonalCovariance finish(DiagonalCovariance cov, double inflation) const {
    return covariance::floor(covariance::inflate(cov, inflation), a_.covariances.latent_floor);
  }

  /// Hybrid latent B_z; records the raw estimates when `diag` is given.
  DiagonalCovariance latent_b(const std::optional<EnsembleSet>& ens, SlotDiagnostics* diag) const {
    const auto& w = cfg_.covariance.weights;
    DiagonalCovariance b = a_.covariances.b_z;
    if (diag != nullptr) diag->b_clim = b.variances;
    if (ens) {
      std::vector<LatentVector> zs;
      for (const auto& m : ens->members) zs.push_back(a_.ae.encode(m));
      const DiagonalCovariance be = covariance::ensemble_cov_diag(zs);
      if (diag != nullptr) diag->b_ens = be.variances;
      b = covariance::hybrid_blend(b, be, w.alpha_ens);
    }
    return finish(b, w.inflation_b);
  }

  DiagonalCovariance latent_r(const std::optional<EnsembleSet>& ens, const ObservationSet& obs, long t,
                              SlotDiagnostics* diag) const {
    const auto& w = cfg_.covariance.weights;
    DiagonalCovariance r = a_.covariances.r_z;
    if (diag != nullptr) diag->r_clim = r.variances;
    if (ens) {
      Rng rng(derive_seed(cfg_.experiment.seed, kEnsembleRStream, static_cast<std::uint64_t>(t)));
      const DiagonalCovariance re = covariance::ensemble_latent_r(a_.o2l, a_.ae, *ens, a_.assimilation_network,
                                                                  obs.mask, rng, cfg_.covariance.centered_r);
      if (diag != nullptr) diag->r_ens = re.variances;
      r = covariance::hybrid_blend(r, re, w.beta_ens);
    }
    return finish(r, w.inflation_r);
  }

  /// Hybrid model-space B. A collapsed ensemble (identical members) leaves the climatological B
  /// and sets `clim_only`.
  FullCovariance model_b(const std::optional<EnsembleSet>& ens, bool& clim_only) const {
    const auto& w = cfg_.covariance.weights;
    Eigen::MatrixXd b = a_.covariances.b.matrix;
    if (ens && w.alpha_ens > 0.0) {
      try {
        const FullCovariance be = covariance::model_space_b_ensemble(ens->members, cfg_.covariance.localization_radius);
        b = w.alpha_ens * be.matrix + (1.0 - w.alpha_ens) * b;
      } catch (const EstimationError&) {
        clim_only = true;
      }
    }
    return FullCovariance{w.inflation_b * b};
  }

  StateVector propagate(const StateVector& x, const ModelConfig& model) const {
    return dynamics::forecast_state(x, steps_, model);
  }

  CycleRecord run_cycle(int c, StateVector& background) {
    const int w = cfg_.experiment.window_slots;
    const long t0 = static_cast<long>(c) * w;
    const ModelConfig model = model_at(c);
    const Method method = cfg_.method.name;

    CycleRecord rec;
    rec.cycle = c;
    std::vector<StateVector> analyses;
    bool clim_only = false;
    bool flagged = false;
    int rejected = 0;

    try {
      if (method == Method::hloba) {
        run_hloba(t0, model, background, rec, analyses, clim_only, flagged, rejected);
      } else if (!is_four_dimensional(method)) {
        StateVector x_b = background;
        for (int i = 0; i < w; ++i) {
          const long t = t0 + i;
          if (i > 0) {
            archive_[t - 1] = analyses.back();
            x_b = propagate(analyses.back(), model);
          }
          const auto ens = ensemble_at(t, model);
          clim_only |= !ens.has_value();
          DAProblem p;
          p.x_b = x_b;
          p.slot_obs = {screened(x_b, assimilated_[static_cast<std::size_t>(t)], rejected)};
          p.model = &model;
          p.ae = &a_.ae;
          AnalysisResult r;
          if (method == Method::hl3dvar) {
            p.z_b = a_.ae.encode(x_b);
            p.b_z = latent_b(ens, nullptr);
            r = assimilation::solve_l3dvar(p, solver_);
          } else {
            p.b = model_b(ens, clim_only);
            r = assimilation::solve_3dvar(p, solver_);
          }
          rec.solver_iters += r.iterations;
          flagged |= r.flagged;
          analyses.push_back(r.x_a);
        }
      } else {
        const auto ens = ensemble_at(t0, model);
        clim_only |= !ens.has_value();
        DAProblem p;
        p.x_b = background;
        p.model = &model;
        p.ae = &a_.ae;
        StateVector reference = background;
        for (int i = 0; i < w; ++i) {
          if (i > 0) reference = propagate(reference, model);
          p.slot_obs.push_back(screened(reference, assimilated_[static_cast<std::size_t>(t0 + i)], rejected));
        }
        AnalysisResult r;
        if (method == Method::hl4dvar) {
          p.z_b = a_.ae.encode(background);
          p.b_z = latent_b(ens, nullptr);
          r = assimilation::solve_l4dvar(p, solver_);
        } else {
          p.b = model_b(ens, clim_only);
          r = assimilation::solve_4dvar(p, solver_);
        }
        rec.solver_iters += r.iterations;
        flagged |= r.flagged;
        analyses = r.window_trajectory;
      }
    } catch (const IntegrationBlowup& e) {
      throw ExperimentDiverged("cycle " + std::to_string(c) + ": " + e.what());
    }
    if (analyses.size() != static_cast<std::size_t>(w)) {
      throw ExperimentDiverged("cycle " + std::to_string(c) + ": analysis trajectory blew up inside the window");
    }

    for (int i = 0; i < w; ++i) archive_[t0 + i] = analyses[static_cast<std::size_t>(i)];
    const long keep_from = t0 + w - cfg_.covariance.ensemble_size - 2;
    archive_.erase(archive_.begin(), archive_.lower_bound(keep_from));

    const long t_end = t0 + w - 1;
    const StateVector& x_end = analyses.back();
    rec.analysis_error = x_end - truth_[static_cast<std::size_t>(t_end)];
    rec.analysis_wrmse = score(x_end, t_end);
    for (int i = 0; i < w; ++i) rec.slot_wrmse.push_back(score(analyses[static_cast<std::size_t>(i)], t0 + i));

    rec.forecast_error.assign(static_cast<std::size_t>(cfg_.experiment.horizon), kNaN);
    StateVector x = x_end;
    try {
      for (int k = 1; k <= cfg_.experiment.horizon; ++k) {
        x = propagate(x, model);
        if (k == 1) background = x;
        rec.forecast_error[static_cast<std::size_t>(k - 1)] = score(x, t_end + k);
      }
    } catch (const IntegrationBlowup&) {
      rec.flags.push_back("forecast_blowup");
      if (rec.forecast_error.front() != rec.forecast_error.front()) {
        throw ExperimentDiverged("cycle " + std::to_string(c) + ": background forecast blew up");
      }
    }

    if (clim_only) rec.flags.push_back("clim_cov");
    if (flagged) rec.flags.push_back("solver_flagged");
    if (rejected > 0) rec.flags.push_back("qc_rejected_" + std::to_string(rejected));
    return rec;
  }

  void run_hloba(long t0, const ModelConfig& model, const StateVector& background, CycleRecord& rec,
                 std::vector<StateVector>& analyses, bool& clim_only, bool& flagged, int& rejected) {
    const int w = cfg_.experiment.window_slots;
    std::vector<SlotDiagnostics> diag(static_cast<std::size_t>(w));
    DAProblem p;
    p.x_b = background;
    p.model = &model;
    p.ae = &a_.ae;
    p.o2l = &a_.o2l;
    for (int i = 0; i < w; ++i) p.slot_obs.push_back(assimilated_[static_cast<std::size_t>(t0 + i)]);

    const auto provider = [&](int slot, const StateVector&, const ObservationSet& obs,
                              const std::vector<SlotRecord>& done) {
      const long t = t0 + slot;
      if (!done.empty()) archive_[t - 1] = done.back().x_a;
      const auto ens = ensemble_at(t, model);
      SlotDiagnostics& d = diag[static_cast<std::size_t>(slot)];
      d.has_ensemble = ens.has_value();
      clim_only |= !ens.has_value();
      return std::pair{latent_b(ens, &d), latent_r(ens, obs, t, &d)};
    };
    const auto filter = [&](int, const StateVector& x_b, const ObservationSet& obs) {
      return screened(x_b, obs, rejected);
    };
    const AnalysisResult r = cfg_.qc_enabled() ? assimilation::hloba_sequential_window(p, provider, filter)
                                               : assimilation::hloba_sequential_window(p, provider);
    flagged |= r.flagged;

    for (std::size_t i = 0; i < r.slots.size(); ++i) {
      const SlotRecord& s = r.slots[i];
      const StateVector& truth = truth_[static_cast<std::size_t>(t0) + i];
      const LatentVector z_t = a_.ae.encode(truth);
      SlotDiagnostics& d = diag[i];
      d.zb_error = s.z_b - z_t;
      d.zo_error = s.z_o - z_t;
      d.xb_error = s.x_b - truth;
      d.xo_error = a_.ae.decode(s.z_o) - truth;
      analyses.push_back(s.x_a);
    }
    if (r.slots.size() != static_cast<std::size_t>(w)) return;
    const SlotRecord& last = r.slots.back();
    rec.diag_std = last.model_variance.cwiseSqrt();
    rec.mean_diag_std = rec.diag_std.mean();
    rec.ooa_wrmse = score(a_.ae.decode(last.z_o), t0 + w - 1);
    rec.latent = std::move(diag);
  }

  const ExperimentConfig& cfg_;
  const Artifacts& a_;
  const std::vector<double>* schedule_;
  const SolverSettings solver_;
  std::size_t steps_ = 0;
  std::vector<StateVector> truth_;
  std::vector<ObservationSet> assimilated_;
  std::vector<ObservationSet> withheld_;
  AnalysisArchive archive_;
};

}  // namespace

std::vector<CycleRecord> run_cycling_experiment(const ExperimentConfig& config, const Artifacts& artifacts,
                                                const std::vector<double>* forcing_schedule) {
  config.validate();
  return CyclingRun(config, artifacts, forcing_schedule).run();
}

std::vector<double> analysis_series(const std::vector<CycleRecord>& records, int spin_up_cycles) {
  std::vector<double> out;
  for (const auto& r : records) {
    if (r.cycle >= spin_up_cycles) out.push_back(r.analysis_wrmse);
  }
  return out;
}

EvaluationReport evaluate(const std::vector<CycleRecord>& records, const std::vector<int>& windows, int spin_up_cycles,
                          const std::string& method) {
  std::vector<const CycleRecord*> post;
  for (const auto& r : records) {
    if (r.cycle >= spin_up_cycles) post.push_back(&r);
  }
  if (post.empty()) throw InsufficientSample("evaluate: no cycles after the spin-up");

  EvaluationReport rep;
  rep.method = method;
  rep.cycles = static_cast<int>(records.size());
  rep.spin_up_cycles = spin_up_cycles;
  rep.evaluated_cycles = static_cast<int>(post.size());

  std::vector<double> analysis, ooa, diag_std;
  const std::size_t n_slots = post.front()->slot_wrmse.size();
  const std::size_t horizon = post.front()->forecast_error.size();
  std::vector<std::vector<double>> slots(n_slots), leads(horizon);
  for (const auto* r : post) {
    analysis.push_back(r->analysis_wrmse);
    ooa.push_back(r->ooa_wrmse);
    diag_std.push_back(r->mean_diag_std);
    for (std::size_t i = 0; i < n_slots && i < r->slot_wrmse.size(); ++i) slots[i].push_back(r->slot_wrmse[i]);
    for (std::size_t k = 0; k < horizon && k < r->forecast_error.size(); ++k) leads[k].push_back(r->forecast_error[k]);
    const bool failed = std::any_of(r->flags.begin(), r->flags.end(),
                                    [](const std::string& f) { return f == "solver_flagged" || f == "forecast_blowup"; });
    rep.flagged_cycles += failed ? 1 : 0;
  }
  rep.mean_analysis_wrmse = finite_mean(analysis);
  for (const auto& s : slots) rep.mean_slot_wrmse.push_back(finite_mean(s));
  for (const auto& l : leads) rep.mean_forecast_error.push_back(finite_mean(l));
  if (!rep.mean_forecast_error.empty()) rep.forecast_error_at_horizon = rep.mean_forecast_error.back();
  rep.mean_ooa_wrmse = finite_mean(ooa);
  rep.mean_diag_std = finite_mean(diag_std);

  const bool has_std = std::all_of(post.begin(), post.end(), [](const CycleRecord* r) { return r->diag_std.size() > 0; });
  if (has_std) {
    for (int window : windows) {
      if (window > static_cast<int>(post.size())) {
        throw InsufficientSample("evaluate: aggregation window " + std::to_string(window) + " exceeds the " +
                                 std::to_string(post.size()) + " evaluated cycles");
      }
      WindowCorrelation wc;
      wc.window = window;
      std::vector<double> rhos;
      for (std::size_t b = 0; b + static_cast<std::size_t>(window) <= post.size(); b += static_cast<std::size_t>(window)) {
        Eigen::VectorXd err = Eigen::VectorXd::Zero(post.front()->analysis_error.size());
        Eigen::VectorXd sd = Eigen::VectorXd::Zero(err.size());
        for (std::size_t k = b; k < b + static_cast<std::size_t>(window); ++k) {
          err += post[k]->analysis_error.cwiseAbs();
          sd += post[k]->diag_std;
        }
        ++wc.blocks;
        try {
          rhos.push_back(pearson(err, sd));
        } catch (const UndefinedMetric&) {
        }
      }
      wc.rho = finite_mean(rhos);
      rep.rho_x.push_back(wc);
    }
  }

  // Latent calibration and decorrelation pool every slot that had an ensemble estimate.
  std::vector<double> zb2, zo2, bc, be, rc, re;
  std::vector<Eigen::VectorXd> zb, zo, xb, xo;
  for (const auto* r : post) {
    for (const auto& d : r->latent) {
      if (!d.has_ensemble || d.b_ens.size() == 0 || d.r_ens.size() == 0) continue;
      for (Eigen::Index i = 0; i < d.zb_error.size(); ++i) {
        zb2.push_back(d.zb_error[i] * d.zb_error[i]);
        zo2.push_back(d.zo_error[i] * d.zo_error[i]);
        bc.push_back(d.b_clim[i]);
        be.push_back(d.b_ens[i]);
        rc.push_back(d.r_clim[i]);
        re.push_back(d.r_ens[i]);
      }
      zb.push_back(d.zb_error);
      zo.push_back(d.zo_error);
      xb.push_back(d.xb_error);
      xo.push_back(d.xo_error);
    }
  }
  auto safe_pearson = [](const std::vector<double>& a, const std::vector<double>& b) {
    try {
      return pearson(a, b);
    } catch (const UndefinedMetric&) {
      return kNaN;
    }
  };
  if (zb2.size() >= 3) {
    LatentCalibration lc;
    lc.samples = zb2.size();
    lc.zb_clim = safe_pearson(zb2, bc);
    lc.zb_ens = safe_pearson(zb2, be);
    lc.zo_clim = safe_pearson(zo2, rc);
    lc.zo_ens = safe_pearson(zo2, re);
    rep.latent_calibration = lc;
  }
  if (zb.size() >= 100) {
    Decorrelation dc;
    dc.samples = zb.size();
    dc.latent_b = covariance::latent_decorrelation_report(zb);
    dc.latent_o = covariance::latent_decorrelation_report(zo);
    dc.model_b = covariance::latent_decorrelation_report(xb);
    dc.model_o = covariance::latent_decorrelation_report(xo);
    rep.decorrelation = dc;
  }
  return rep;
}

nlohmann::json to_json(const EvaluationReport& r) {
  nlohmann::json j;
  j["method"] = r.method;
  j["cycles"] = r.cycles;
  j["spin_up_cycles"] = r.spin_up_cycles;
  j["evaluated_cycles"] = r.evaluated_cycles;
  j["flagged_cycles"] = r.flagged_cycles;
  j["mean_analysis_wrmse"] = r.mean_analysis_wrmse;
  j["mean_slot_wrmse"] = r.mean_slot_wrmse;
  j["mean_forecast_error"] = r.mean_forecast_error;
  j["forecast_error_at_horizon"] = r.forecast_error_at_horizon;
  j["mean_ooa_wrmse"] = r.mean_ooa_wrmse;
  j["mean_diag_std"] = r.mean_diag_std;
  j["rho_x"] = nlohmann::json::array();
  for (const auto& w : r.rho_x) j["rho_x"].push_back({{"window", w.window}, {"blocks", w.blocks}, {"rho", w.rho}});
  if (r.latent_calibration) {
    const auto& c = *r.latent_calibration;
    j["latent_calibration"] = {{"rho_zb_clim", c.zb_clim}, {"rho_zb_ens", c.zb_ens}, {"rho_zo_clim", c.zo_clim},
                               {"rho_zo_ens", c.zo_ens},   {"samples", c.samples}};
  }
  if (r.decorrelation) {
    const auto& d = *r.decorrelation;
    j["decorrelation"] = {{"latent_background", d.latent_b}, {"latent_observation", d.latent_o},
                          {"model_background", d.model_b},   {"model_observation", d.model_o},
                          {"samples", d.samples}};
  }
  if (!r.extra.empty()) j["extra"] = r.extra;
  return j;
}

std::vector<HybridWeights> tuning_grid(const ExperimentConfig& config) {
  const auto& e = config.experiment;
  // beta only enters the HLOBA observation-error blend.
  const std::vector<double> betas =
      config.method.name == Method::hloba ? e.tuning_beta : std::vector<double>{config.covariance.weights.beta_ens};
  std::vector<HybridWeights> grid;
  for (double a : e.tuning_alpha) {
    for (double b : betas) {
      for (double f : e.tuning_inflation) {
        HybridWeights w;
        w.alpha_ens = a;
        w.beta_ens = b;
        w.inflation_b = f;
        w.inflation_r = f;
        grid.push_back(w);
      }
    }
  }
  return grid;
}

TuningResult tune(const ExperimentConfig& config, const Artifacts& artifacts, const std::vector<HybridWeights>& grid,
                  int tuning_cycles) {
  if (grid.empty()) throw ContractError("tune: empty grid");
  if (tuning_cycles < 1) throw ContractError("tune: tuning_cycles must be >= 1");
  TuningResult result;
  result.tuning_cycles = tuning_cycles;
  result.seed = config.experiment.tuning_seed;
  result.solver = config.method.solver();
  const int spin_up = std::min(config.experiment.spin_up_cycles, tuning_cycles / 2);

  double best = std::numeric_limits<double>::infinity();
  for (const auto& w : grid) {
    ExperimentConfig cfg = config;
    cfg.covariance.weights = w;
    cfg.experiment.seed = config.experiment.tuning_seed;
    cfg.experiment.cycles = tuning_cycles;
    TuningPoint point{w, std::numeric_limits<double>::infinity()};
    try {
      const auto records = run_cycling_experiment(cfg, artifacts);
      std::vector<double> horizon_errors;
      for (const auto& r : records) {
        if (r.cycle >= spin_up) horizon_errors.push_back(r.forecast_error.back());
      }
      const double m = finite_mean(horizon_errors);
      if (std::isfinite(m)) point.score = m;
    } catch (const ExperimentDiverged&) {
    }
    if (point.score < best || result.grid.empty()) {
      if (point.score < best) best = point.score;
      result.best = w;
    }
    result.grid.push_back(point);
  }
  return result;
}

nlohmann::json to_json(const TuningResult& t) {
  auto weights = [](const HybridWeights& w) {
    return nlohmann::json{{"alpha_ens", w.alpha_ens},
                          {"beta_ens", w.beta_ens},
                          {"inflation_b", w.inflation_b},
                          {"inflation_r", w.inflation_r}};
  };
  nlohmann::json j;
  j["best"] = weights(t.best);
  j["optimizer"] = {{"kind", t.solver.optimizer == diffcore::OptimizerKind::lbfgs ? "lbfgs" : "adam"},
                    {"learning_rate", t.solver.learning_rate},
                    {"max_iters", t.solver.max_iters},
                    {"patience", t.solver.patience},
                    {"min_improvement", t.solver.min_improvement}};
  j["tuning_cycles"] = t.tuning_cycles;
  j["seed"] = t.seed;
  j["grid"] = nlohmann::json::array();
  for (const auto& p : t.grid) {
    auto entry = weights(p.weights);
    entry["score"] = p.score;
    j["grid"].push_back(entry);
  }
  return j;
}

DriftReport regime_drift_experiment(const ExperimentConfig& config, const Artifacts& artifacts,
                                    const std::vector<double>& forcing_schedule) {
  if (forcing_schedule.size() != static_cast<std::size_t>(config.experiment.cycles)) {
    throw ContractError("forcing schedule length must equal the number of cycles");
  }
  const auto records = run_cycling_experiment(config, artifacts, &forcing_schedule);
  DriftReport rep;
  rep.schedule = forcing_schedule;
  rep.evaluation = evaluate(records, config.experiment.aggregation_windows, config.experiment.spin_up_cycles,
                            method_name(config.method.name));
  rep.evaluation.extra["forcing_schedule"] = forcing_schedule;

  std::vector<double> err, sd;
  auto close_block = [&](double forcing) {
    if (err.empty()) return;
    rep.block_forcing.push_back(forcing);
    rep.block_error.push_back(finite_mean(err));
    rep.block_std.push_back(finite_mean(sd));
    err.clear();
    sd.clear();
  };
  double current = kNaN;
  for (const auto& r : records) {
    if (r.cycle < config.experiment.spin_up_cycles) continue;
    const double f = forcing_schedule[static_cast<std::size_t>(r.cycle)];
    if (f != current) {
      close_block(current);
      current = f;
    }
    err.push_back(r.analysis_wrmse);
    sd.push_back(r.mean_diag_std);
  }
  close_block(current);
  if (rep.block_error.size() >= 3) {
    try {
      rep.block_correlation = pearson(rep.block_std, rep.block_error);
    } catch (const UndefinedMetric&) {
    }
  }
  return rep;
}

nlohmann::json to_json(const DriftReport& r) {
  nlohmann::json j = to_json(r.evaluation);
  j["drift"] = {{"schedule", r.schedule},
                {"block_forcing", r.block_forcing},
                {"block_error", r.block_error},
                {"block_std", r.block_std},
                {"block_correlation", r.block_correlation}};
  return j;
}

void write_cycles_csv(std::ostream& out, const std::vector<CycleRecord>& records, int horizon) {
  out << "cycle,analysis_wrmse";
  for (int k = 1; k <= horizon; ++k) out << ",fc_err_lead_" << k;
  out << ",mean_diag_std,solver_iters,flags\n";
  for (const auto& r : records) {
    out << r.cycle << ',' << format_number(r.analysis_wrmse);
    for (int k = 0; k < horizon; ++k) {
      out << ',' << format_number(k < static_cast<int>(r.forecast_error.size()) ? r.forecast_error[static_cast<std::size_t>(k)] : kNaN);
    }
    out << ',' << format_number(r.mean_diag_std) << ',' << r.solver_iters << ',';
    if (r.flags.empty()) {
      out << "ok";
    } else {
      for (std::size_t i = 0; i < r.flags.size(); ++i) out << (i ? ";" : "") << r.flags[i];
    }
    out << '\n';
  }
}

}  // namespace hloba::harness
