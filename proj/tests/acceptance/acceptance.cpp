// Acceptance suite: one line per criterion, exit status 1 if any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Dense>

#include "hloba/assimilation.hpp"
#include "hloba/covariance.hpp"
#include "hloba/error.hpp"
#include "hloba/harness/config.hpp"
#include "hloba/harness/experiment.hpp"
#include "hloba/harness/metrics.hpp"
#include "hloba/json_io.hpp"
#include "hloba/latent/o2l.hpp"

namespace fs = std::filesystem;
using namespace hloba;
using namespace hloba::harness;

namespace {

struct Outcome {
  int id = 0;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Eigen::VectorXd normal_vector(Eigen::Index n, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

Eigen::VectorXd uniform_vector(Eigen::Index n, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

Eigen::MatrixXd random_spd(int n, Rng& rng, double scale) {
  Eigen::MatrixXd a(n, n);
  for (int j = 0; j < n; ++j) a.col(j) = normal_vector(n, rng);
  return scale * (a * a.transpose() / n + 0.5 * Eigen::MatrixXd::Identity(n, n));
}

double relative(const Eigen::VectorXd& a, const Eigen::VectorXd& oracle) {
  return (a - oracle).norm() / std::max(oracle.norm(), 1e-300);
}

ModelConfig model_with(int n_x, double forcing) {
  ModelConfig c;
  c.n_x = n_x;
  c.forcing = forcing;
  return c;
}

ObservationSet exact_obs(const ObservationNetwork& net, const Eigen::VectorXd& values) {
  ObservationSet obs;
  obs.network = net;
  obs.values = values;
  obs.mask = Eigen::VectorXd::Zero(net.n_x);
  for (int i : net.observed_indices) obs.mask[i] = 1.0;
  return obs;
}

Eigen::MatrixXd selection(const ObservationNetwork& net) {
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(net.size()), net.n_x);
  for (std::size_t k = 0; k < net.size(); ++k) h(static_cast<Eigen::Index>(k), net.observed_indices[k]) = 1.0;
  return h;
}

Eigen::MatrixXd r_inverse(const ObservationNetwork& net) {
  Eigen::VectorXd d(static_cast<Eigen::Index>(net.size()));
  for (std::size_t k = 0; k < net.size(); ++k) d[static_cast<Eigen::Index>(k)] = 1.0 / (net.noise_std[k] * net.noise_std[k]);
  return d.asDiagonal();
}

std::vector<StateVector> attractor_states(int n_x, std::size_t count, unsigned seed) {
  const ModelConfig c = model_with(n_x, 8.0);
  Rng rng(seed);
  StateVector x = (8.0 + normal_vector(n_x, rng).array()).matrix();
  x = dynamics::forecast_state(x, 500, c);
  std::vector<StateVector> out;
  for (std::size_t k = 0; k < count; ++k) {
    x = dynamics::forecast_state(x, 2, c);
    out.push_back(x);
  }
  return out;
}

template <class Cost>
Eigen::VectorXd central_difference(const Cost& cost, const Eigen::VectorXd& x, double h) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd p = x, m = x;
    p[i] += h;
    m[i] -= h;
    g[i] = (cost(p) - cost(m)) / (2.0 * h);
  }
  return g;
}

// ---------------------------------------------------------------------------------------------
// Criteria 1-4: oracle equivalence.

Outcome criterion_blue() {
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + trial % 40;
    const LatentVector z_b = normal_vector(n, rng), z_o = normal_vector(n, rng);
    const DiagonalCovariance b{uniform_vector(n, rng, 1e-3, 10.0)}, r{uniform_vector(n, rng, 1e-3, 10.0)};
    const auto [z_a, a] = assimilation::hloba_update(z_b, z_o, b, r);
    const Eigen::MatrixXd bm = b.variances.asDiagonal(), rm = r.variances.asDiagonal();
    // K = B H^T (H B H^T + R)^-1 with H = I, A = (I - K H) B.
    const Eigen::MatrixXd k = bm * (bm + rm).inverse();
    const Eigen::VectorXd za_dense = z_b + k * (z_o - z_b);
    const Eigen::MatrixXd a_dense = (Eigen::MatrixXd::Identity(n, n) - k) * bm;
    worst = std::max(worst, (z_a - za_dense).cwiseAbs().maxCoeff() / std::max(1.0, za_dense.cwiseAbs().maxCoeff()));
    worst = std::max(worst, (a.variances - a_dense.diagonal()).cwiseAbs().maxCoeff() /
                                std::max(1.0, a_dense.diagonal().cwiseAbs().maxCoeff()));
  }
  return {1, worst <= 1e-12, "max relative deviation " + fmt("%.2e", worst) + " over 1000 instances (tol 1e-12)"};
}

Outcome criterion_linear_regime() {
  Rng rng(77);
  const double amp = 1e-6;
  const int n = 12, nz = 6;
  const ModelConfig model = model_with(n, 0.0);
  const double h = -model.dt;
  const double g = std::pow(1.0 + h + h * h / 2.0 + h * h * h / 6.0 + h * h * h * h / 24.0, model.steps_per_da_interval);
  const auto net = ObservationNetwork::every_kth(n, 2, 0, Eigen::VectorXd::Constant(n, amp), 0.5);
  const Eigen::MatrixXd hm = selection(net), rinv = r_inverse(net);
  // Gradient tolerances in the units of each control vector: x is O(amp), z is O(1).
  const auto tight = SolverSettings::lbfgs(1e-9 / amp);
  const auto tight_z = SolverSettings::lbfgs(1e-11);

  std::vector<StateVector> states;
  const Eigen::VectorXd shape = uniform_vector(n, rng, 0.5, 2.0);
  for (int k = 0; k < 300; ++k) states.push_back(normal_vector(n, rng, amp).cwiseProduct(shape));
  const auto ae = latent::fit_linear_ae(states, nz);
  const Eigen::VectorXd m = ae.decode(LatentVector::Zero(nz));
  Eigen::MatrixXd w(n, nz);
  for (int j = 0; j < nz; ++j) w.col(j) = ae.decode(LatentVector::Unit(nz, j)) - m;

  std::map<std::string, double> worst{{"3dvar", 0.0}, {"4dvar", 0.0}, {"l3dvar", 0.0}, {"l4dvar", 0.0}};
  for (int trial = 0; trial < 3; ++trial) {
    const int window = 3;
    DAProblem p;
    p.model = &model;
    p.ae = &ae;
    p.x_b = normal_vector(n, rng, amp);
    p.b = FullCovariance{random_spd(n, rng, amp * amp)};
    p.b_z = DiagonalCovariance{uniform_vector(nz, rng, 0.3, 2.0)};
    for (int i = 0; i <= window; ++i) p.slot_obs.push_back(exact_obs(net, normal_vector(6, rng, amp)));

    auto model_space = [&](int last) {
      const Eigen::MatrixXd binv = p.b.matrix.inverse();
      Eigen::MatrixXd lhs = binv;
      Eigen::VectorXd rhs = binv * p.x_b;
      for (int i = 0; i <= last; ++i) {
        const Eigen::MatrixXd hi = std::pow(g, i) * hm;
        lhs += hi.transpose() * rinv * hi;
        rhs += hi.transpose() * rinv * p.slot_obs[static_cast<std::size_t>(i)].values;
      }
      return Eigen::VectorXd(lhs.ldlt().solve(rhs));
    };
    auto latent_space = [&](int last) {
      const LatentVector z_b = ae.encode(p.x_b);
      const Eigen::MatrixXd bzinv = p.b_z.variances.cwiseInverse().asDiagonal();
      Eigen::MatrixXd lhs = bzinv;
      Eigen::VectorXd rhs = bzinv * z_b;
      for (int i = 0; i <= last; ++i) {
        const double gi = std::pow(g, i);
        const Eigen::MatrixXd hw = gi * hm * w;
        lhs += hw.transpose() * rinv * hw;
        rhs += hw.transpose() * rinv * (p.slot_obs[static_cast<std::size_t>(i)].values - gi * hm * m);
      }
      return Eigen::VectorXd(lhs.ldlt().solve(rhs));
    };

    DAProblem single = p;
    single.slot_obs.resize(1);
    worst["3dvar"] = std::max(worst["3dvar"], relative(assimilation::solve_3dvar(single, tight).x_a, model_space(0)));
    worst["4dvar"] = std::max(worst["4dvar"], relative(assimilation::solve_4dvar(p, tight).x_a, model_space(window)));
    worst["l3dvar"] =
        std::max(worst["l3dvar"], relative(*assimilation::solve_l3dvar(single, tight_z).z_a, latent_space(0)));
    worst["l4dvar"] =
        std::max(worst["l4dvar"], relative(*assimilation::solve_l4dvar(p, tight_z).z_a, latent_space(window)));
  }
  bool ok = true;
  std::string detail;
  for (const auto& [name, err] : worst) {
    ok = ok && err <= 1e-5;
    detail += name + " " + fmt("%.1e", err) + "  ";
  }
  return {2, ok, detail + "(relative, tol 1e-5)"};
}

Outcome criterion_gradients() {
  Rng rng(5);
  const ModelConfig model = model_with(40, 8.0);
  const auto states = attractor_states(40, 400, 3);
  latent::TrainingSchedule sched;
  sched.hidden_widths = {24};
  const auto ae = latent::init_mlp_ae(states, 8, sched, 11);
  const auto net = ObservationNetwork::every_kth(40, 3, 1, Eigen::VectorXd::Constant(40, 3.6), 0.1);

  std::map<std::string, double> worst;
  auto note = [&](const std::string& name, double err) { worst[name] = std::max(worst[name], err); };
  for (int point = 0; point < 5; ++point) {
    const StateVector truth = states[static_cast<std::size_t>(60 * point + 10)];
    DAProblem p;
    p.model = &model;
    p.ae = &ae;
    p.x_b = truth + normal_vector(40, rng, 0.5);
    p.b = FullCovariance{random_spd(40, rng, 0.25)};
    p.b_z = DiagonalCovariance{uniform_vector(8, rng, 0.2, 1.0)};
    StateVector x = truth;
    for (int i = 0; i < 4; ++i) {
      p.slot_obs.push_back(observations::synthesize(x, net, rng, i));
      x = dynamics::forecast_state(x, 2, model);
    }
    const assimilation::VariationalCosts costs(p);
    const StateVector xs = truth + normal_vector(40, rng, 0.5);
    const LatentVector zs = ae.encode(xs) + normal_vector(8, rng, 0.3);
    StateVector gx;
    LatentVector gz;
    costs.cost_3dvar(xs, &gx);
    note("3dvar", relative(gx, central_difference([&](const Eigen::VectorXd& v) { return costs.cost_3dvar(v, nullptr); }, xs, 1e-5)));
    costs.cost_4dvar(xs, &gx);
    note("4dvar", relative(gx, central_difference([&](const Eigen::VectorXd& v) { return costs.cost_4dvar(v, nullptr); }, xs, 1e-5)));
    costs.cost_l3dvar(zs, &gz);
    note("l3dvar", relative(gz, central_difference([&](const Eigen::VectorXd& v) { return costs.cost_l3dvar(v, nullptr); }, zs, 1e-5)));
    costs.cost_l4dvar(zs, &gz);
    note("l4dvar", relative(gz, central_difference([&](const Eigen::VectorXd& v) { return costs.cost_l4dvar(v, nullptr); }, zs, 1e-5)));

    const Eigen::VectorXd wgt = normal_vector(40, rng);
    const StateVector adj = dynamics::forecast_gradient(xs, 8, wgt, model);
    note("adjoint", relative(adj, central_difference([&](const Eigen::VectorXd& v) {
                                   return wgt.dot(dynamics::forecast_state(v, 8, model));
                                 }, xs, 1e-5)));

    // Observation-to-latent training loss with respect to every network parameter.
    Rng init(100 + static_cast<unsigned>(point));
    const auto layers = latent::init_layers({80, 16, 16, 8}, latent::Activation::tanh, init);
    const auto params = latent::to_tensors(layers);
    diffcore::RowMatrix inputs(6, 80), targets(6, 8), weights(6, 8);
    for (int r = 0; r < 6; ++r) {
      inputs.row(r) = normal_vector(80, rng).transpose();
      targets.row(r) = normal_vector(8, rng).transpose();
      weights.row(r) = uniform_vector(8, rng, 0.5, 1.0).transpose();
    }
    std::vector<diffcore::Tensor> grads;
    latent::o2l_batch_loss(layers, params, inputs, targets, weights, &grads);
    Eigen::VectorXd flat_params, flat_grads;
    for (std::size_t t = 0; t < params.size(); ++t) {
      const Eigen::Index old = flat_params.size();
      flat_params.conservativeResize(old + params[t].flat().size());
      flat_params.tail(params[t].flat().size()) = params[t].flat();
      flat_grads.conservativeResize(old + grads[t].flat().size());
      flat_grads.tail(grads[t].flat().size()) = grads[t].flat();
    }
    auto loss_at = [&](const Eigen::VectorXd& v) {
      auto ps = params;
      Eigen::Index off = 0;
      for (auto& t : ps) {
        t.flat() = v.segment(off, t.flat().size());
        off += t.flat().size();
      }
      return latent::o2l_batch_loss(layers, ps, inputs, targets, weights, nullptr);
    };
    note("o2l_loss", relative(flat_grads, central_difference(loss_at, flat_params, 1e-5)));
  }
  bool ok = true;
  std::string detail;
  for (const auto& [name, err] : worst) {
    ok = ok && err <= 1e-4;
    detail += name + " " + fmt("%.1e", err) + "  ";
  }
  return {3, ok, detail + "(worst of 5 points, tol 1e-4)"};
}

double rel_err(const Eigen::VectorXd& got, const std::vector<long double>& oracle) {
  double worst = 0.0;
  for (Eigen::Index j = 0; j < got.size(); ++j) {
    const double o = static_cast<double>(oracle[static_cast<std::size_t>(j)]);
    worst = std::max(worst, std::abs(got[j] - o) / std::max(std::abs(o), 1e-300));
  }
  return worst;
}

Outcome criterion_covariances() {
  Rng rng(31);
  const int n_x = 40, n_z = 12;
  std::vector<StateVector> states;
  const Eigen::VectorXd shape = uniform_vector(n_x, rng, 0.5, 3.0);
  for (int k = 0; k < 700; ++k) states.push_back((2.0 + normal_vector(n_x, rng).cwiseProduct(shape).array()).matrix());
  const auto ae = latent::fit_linear_ae(states, n_z);
  const auto net = ObservationNetwork::every_kth(n_x, 3, 0, ae.scale, 0.03);
  latent::TrainingSchedule sched;
  sched.epochs = 0;
  latent::O2LOptions opts;
  opts.hidden_widths = {16};
  const auto o2l = latent::train_o2l(ae, states, net, sched, 4, opts).first;
  std::map<std::string, double> err;

  // NMC: half the mean squared latent pair difference, accumulated in two passes.
  std::vector<ForecastPair> pairs;
  for (int k = 0; k < 500; ++k) pairs.emplace_back(states[static_cast<std::size_t>(k)], states[static_cast<std::size_t>(k + 100)]);
  {
    std::vector<LatentVector> d;
    for (const auto& [s, l] : pairs) d.push_back(ae.encode(l) - ae.encode(s));
    std::vector<long double> o(n_z, 0.0L);
    for (const auto& v : d)
      for (int j = 0; j < n_z; ++j) o[static_cast<std::size_t>(j)] += 0.5L * v[j] * v[j] / d.size();
    err["nmc_b"] = rel_err(covariance::nmc_latent_b(ae, pairs).variances, o);
  }
  // Ensemble variance: mean first, then squared deviations over N - 1.
  std::vector<LatentVector> members;
  for (int m = 0; m < 9; ++m) members.push_back(normal_vector(n_z, rng, 2.0));
  {
    std::vector<long double> mean(n_z, 0.0L), o(n_z, 0.0L);
    for (const auto& v : members)
      for (int j = 0; j < n_z; ++j) mean[static_cast<std::size_t>(j)] += static_cast<long double>(v[j]) / members.size();
    for (const auto& v : members)
      for (int j = 0; j < n_z; ++j) {
        const long double d = v[j] - mean[static_cast<std::size_t>(j)];
        o[static_cast<std::size_t>(j)] += d * d / (members.size() - 1);
      }
    err["ens_b"] = rel_err(covariance::ensemble_cov_diag(members).variances, o);
  }
  // Climatological and ensemble R_z with the same noise stream.
  auto discrepancy = [&](const StateVector& x, Rng& r, const Eigen::VectorXd& mask) {
    std::normal_distribution<double> normal(0.0, 1.0);
    ObservationSet obs;
    obs.network = net;
    obs.values = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(net.size()));
    obs.mask = mask;
    for (std::size_t k = 0; k < net.size(); ++k) {
      const double e = normal(r);
      if (mask[net.observed_indices[k]] > 0.0) {
        obs.values[static_cast<Eigen::Index>(k)] = x[net.observed_indices[k]] + net.noise_std[k] * e;
      }
    }
    return LatentVector(latent::o2l_forward(o2l, obs) - ae.encode(x));
  };
  Eigen::VectorXd full_mask = Eigen::VectorXd::Zero(n_x);
  for (int i : net.observed_indices) full_mask[i] = 1.0;
  {
    const std::vector<StateVector> arch(states.begin(), states.begin() + 600);
    Rng r1(9), r2(9);
    const auto got = covariance::clim_latent_r(o2l, ae, arch, net, r1);
    std::vector<long double> o(n_z, 0.0L);
    for (const auto& x : arch) {
      const LatentVector d = discrepancy(x, r2, full_mask);
      for (int j = 0; j < n_z; ++j) o[static_cast<std::size_t>(j)] += 0.5L * d[j] * d[j] / arch.size();
    }
    err["clim_r"] = rel_err(got.variances, o);
  }
  {
    EnsembleSet ens;
    for (int m = 0; m < 6; ++m) ens.members.push_back(states[static_cast<std::size_t>(300 + 41 * m)]);
    Eigen::VectorXd mask = full_mask;
    mask[net.observed_indices[4]] = 0.0;
    Rng r1(12), r2(12);
    const auto got = covariance::ensemble_latent_r(o2l, ae, ens, net, mask, r1);
    std::vector<long double> o(n_z, 0.0L);
    for (const auto& x : ens.members) {
      const LatentVector d = discrepancy(x, r2, mask);
      for (int j = 0; j < n_z; ++j) o[static_cast<std::size_t>(j)] += static_cast<long double>(d[j]) * d[j] / 5.0L;
    }
    err["ens_r"] = rel_err(got.variances, o);
  }
  {
    const DiagonalCovariance clim{uniform_vector(n_z, rng, 0.1, 3.0)}, ens{uniform_vector(n_z, rng, 0.1, 3.0)};
    std::vector<long double> o(n_z);
    for (int j = 0; j < n_z; ++j) {
      o[static_cast<std::size_t>(j)] = 1.3L * (0.3L * ens.variances[j] + 0.7L * clim.variances[j]);
    }
    err["hybrid_inflate"] = rel_err(covariance::inflate(covariance::hybrid_blend(clim, ens, 0.3), 1.3).variances, o);
  }
  bool ok = true;
  std::string detail;
  for (const auto& [name, e] : err) {
    ok = ok && e <= 1e-10;
    detail += name + " " + fmt("%.1e", e) + "  ";
  }
  return {4, ok, detail + "(relative, tol 1e-10)"};
}

// ---------------------------------------------------------------------------------------------
// Criteria 5-11: cycling experiments.

struct RunResult {
  std::vector<CycleRecord> records;
  std::optional<EvaluationReport> report;
  std::string failure;
};

class Campaign {
 public:
  Campaign(ExperimentConfig base, fs::path out) : base_(std::move(base)), out_(std::move(out)) {
    fs::create_directories(out_);
  }

  const Artifacts& artifacts() {
    if (!artifacts_) {
      std::cout << "  preparing artifacts (climatology, autoencoder, O2L, climatological covariances)\n" << std::flush;
      artifacts_ = prepare_artifacts(base_);
      std::cout << "  climatology RMSE " << fmt("%.4f", artifacts_->climatology.rmse) << ", AE validation MSE "
                << fmt("%.4f", artifacts_->ae_report.validation_mse) << ", O2L validation MSE "
                << fmt("%.4f", artifacts_->o2l_report.validation_mse) << '\n';
    }
    return *artifacts_;
  }

  ExperimentConfig config_for(Method m) const {
    ExperimentConfig c = base_;
    c.method.name = m;
    return c;
  }

  /// Frozen weights per method from a grid search on the tuning seed.
  HybridWeights tuned(Method m) {
    auto it = tuned_.find(m);
    if (it != tuned_.end()) return it->second;
    const ExperimentConfig c = config_for(m);
    HybridWeights w = c.covariance.weights;
    if (base_.experiment.tuning) {
      const auto t0 = std::chrono::steady_clock::now();
      const TuningResult t = tune(c, artifacts(), tuning_grid(c), c.experiment.tuning_cycles);
      json_io::write_file((out_ / ("tuning_" + method_name(m) + ".json")).string(), to_json(t));
      w = t.best;
      std::cout << "  tuned " << method_name(m) << ": alpha " << w.alpha_ens << ", beta " << w.beta_ens
                << ", inflation " << w.inflation_b << " ("
                << fmt("%.0f", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) << " s)\n"
                << std::flush;
    }
    tuned_[m] = w;
    return w;
  }

  RunResult run(ExperimentConfig c, const Artifacts& a, const std::string& label) {
    RunResult r;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      r.records = run_cycling_experiment(c, a);
      r.report = evaluate(r.records, c.experiment.aggregation_windows, c.experiment.spin_up_cycles,
                          method_name(c.method.name));
    } catch (const Error& e) {
      r.failure = e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "  run " << label << ": "
              << (r.report ? "analysis " + fmt("%.4f", r.report->mean_analysis_wrmse) : "FAILED " + r.failure)
              << " (" << fmt("%.0f", secs) << " s)\n"
              << std::flush;
    return r;
  }

  /// Tuned run of one method and seed, cached.
  const RunResult& standard(Method m, std::uint64_t seed) {
    const auto key = std::make_pair(m, seed);
    auto it = runs_.find(key);
    if (it != runs_.end()) return it->second;
    ExperimentConfig c = config_for(m);
    c.covariance.weights = tuned(m);
    c.experiment.seed = seed;
    return runs_[key] = run(c, artifacts(), method_name(m) + " seed " + std::to_string(seed));
  }

  const ExperimentConfig& base() const { return base_; }
  const fs::path& out() const { return out_; }

 private:
  ExperimentConfig base_;
  fs::path out_;
  std::optional<Artifacts> artifacts_;
  std::map<Method, HybridWeights> tuned_;
  std::map<std::pair<Method, std::uint64_t>, RunResult> runs_;
};

constexpr int kBlock = 20;
constexpr int kResamples = 4000;

std::vector<double> difference(const RunResult& a, const RunResult& b, int spin_up) {
  const auto sa = analysis_series(a.records, spin_up), sb = analysis_series(b.records, spin_up);
  std::vector<double> d;
  for (std::size_t i = 0; i < std::min(sa.size(), sb.size()); ++i) d.push_back(sa[i] - sb[i]);
  return d;
}

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

Outcome criterion_ordering(Campaign& camp) {
  const std::vector<Method> methods{Method::hloba, Method::hl3dvar, Method::hl4dvar, Method::h4dvar};
  const int spin = camp.base().experiment.spin_up_cycles;
  std::ostringstream table;
  table << "    method    ";
  for (auto s : kSeeds) table << "  seed " << s << "  ";
  table << "   mean\n";
  std::map<Method, double> mean;
  bool all_ran = true;
  for (Method m : methods) {
    table << "    " << method_name(m) << std::string(10 - method_name(m).size(), ' ');
    double sum = 0.0;
    for (auto s : kSeeds) {
      const auto& r = camp.standard(m, s);
      if (r.report) {
        table << "  " << fmt("%8.4f", r.report->mean_analysis_wrmse);
        sum += r.report->mean_analysis_wrmse;
      } else {
        table << "  diverged";
        all_ran = false;
        sum = kNaN;
      }
    }
    mean[m] = sum / static_cast<double>(kSeeds.size());
    table << "  " << fmt("%8.4f", mean[m]) << '\n';
  }
  std::cout << table.str();

  auto paired = [&](Method a, Method b) -> std::optional<ConfidenceInterval> {
    std::vector<std::vector<double>> diffs;
    for (auto s : kSeeds) {
      const auto& ra = camp.standard(a, s);
      const auto& rb = camp.standard(b, s);
      if (!ra.report || !rb.report) return std::nullopt;
      diffs.push_back(difference(ra, rb, spin));
    }
    return paired_block_bootstrap(diffs, kBlock, kResamples, 0.95, 17);
  };
  const auto ci = paired(Method::hloba, Method::hl3dvar);
  std::string detail;
  bool pass = false;
  if (ci) {
    pass = ci->upper < 0.0;
    detail = "HLOBA - HL3DVar = " + fmt("%.4f", ci->mean) + " [" + fmt("%.4f", ci->lower) + ", " +
             fmt("%.4f", ci->upper) + "] 95% paired block bootstrap";
  } else {
    detail = "a required run diverged";
  }
  // Secondary ordering, reported only.
  if (all_ran) {
    const Method better = mean[Method::hloba] <= mean[Method::h4dvar] ? Method::hloba : Method::h4dvar;
    if (const auto ci4 = paired(Method::hl4dvar, better)) {
      detail += "; HL4DVar - " + method_name(better) + " = " + fmt("%.4f", ci4->mean) + " [" + fmt("%.4f", ci4->lower) +
                ", " + fmt("%.4f", ci4->upper) + "] (reported)";
    }
  }
  return {5, pass, detail};
}

Outcome criterion_r_ablation(Campaign& camp) {
  const int spin = camp.base().experiment.spin_up_cycles;
  const HybridWeights w = camp.tuned(Method::hloba);
  bool pass = true;
  std::string detail;
  for (int n_e : {3, 6, 9}) {
    std::vector<std::vector<double>> diffs;
    bool ok = true;
    double m0 = 0.0, m1 = 0.0;
    for (auto s : kSeeds) {
      ExperimentConfig c = camp.config_for(Method::hloba);
      c.covariance.weights = w;
      c.covariance.ensemble_size = n_e;
      c.experiment.seed = s;
      ExperimentConfig c0 = c, c1 = c;
      c0.covariance.weights.beta_ens = 0.0;
      c1.covariance.weights.beta_ens = 1.0;
      check_paired(c0, c1, {"covariance.beta_ens"});
      const std::string tag = "N_e " + std::to_string(n_e) + " seed " + std::to_string(s);
      const auto r0 = camp.run(c0, camp.artifacts(), "hloba beta 0 " + tag);
      const auto r1 = camp.run(c1, camp.artifacts(), "hloba beta 1 " + tag);
      if (!r0.report || !r1.report) {
        ok = false;
        break;
      }
      m0 += r0.report->mean_analysis_wrmse / 3.0;
      m1 += r1.report->mean_analysis_wrmse / 3.0;
      diffs.push_back(difference(r1, r0, spin));
    }
    if (!ok) {
      pass = false;
      detail += "N_e=" + std::to_string(n_e) + " diverged; ";
      continue;
    }
    const auto ci = paired_block_bootstrap(diffs, kBlock, kResamples, 0.95, 23);
    pass = pass && ci.upper < 0.0;
    detail += "N_e=" + std::to_string(n_e) + ": " + fmt("%.4f", m1) + " vs " + fmt("%.4f", m0) + ", diff [" +
              fmt("%.4f", ci.lower) + ", " + fmt("%.4f", ci.upper) + "]; ";
  }
  return {6, pass, detail + "beta=1 minus beta=0, 95% paired"};
}

Outcome criterion_uncertainty(Campaign& camp) {
  const auto& r = camp.standard(Method::hloba, kSeeds.front());
  if (!r.report) return {7, false, "HLOBA run failed: " + r.failure};
  const auto& rho = r.report->rho_x;
  std::string detail;
  bool increasing = rho.size() >= 2;
  for (std::size_t i = 0; i < rho.size(); ++i) {
    detail += "rho_x(" + std::to_string(rho[i].window) + ")=" + fmt("%.3f", rho[i].rho) + " ";
    if (i > 0) increasing = increasing && rho[i].rho > rho[i - 1].rho;
  }
  const bool level = !rho.empty() && rho.back().rho >= 0.6;
  return {7, increasing && level, detail + (increasing ? "increasing" : "not increasing") + ", last >= 0.6: " +
                                      (level ? "yes" : "no")};
}

Outcome criterion_latent_calibration(Campaign& camp) {
  const auto& r = camp.standard(Method::hloba, kSeeds.front());
  if (!r.report || !r.report->latent_calibration) return {8, false, "no latent calibration available"};
  const auto& c = *r.report->latent_calibration;
  const bool pass = c.zo_ens > c.zo_clim && c.zb_clim > c.zb_ens;
  return {8, pass, "rho_zo ens " + fmt("%.3f", c.zo_ens) + " vs clim " + fmt("%.3f", c.zo_clim) + "; rho_zb clim " +
                       fmt("%.3f", c.zb_clim) + " vs ens " + fmt("%.3f", c.zb_ens) + " (" +
                       std::to_string(c.samples) + " samples)"};
}

Outcome criterion_decorrelation(Campaign& camp) {
  const auto& r = camp.standard(Method::hloba, kSeeds.front());
  if (!r.report || !r.report->decorrelation) return {9, false, "no decorrelation summary available"};
  const auto& d = *r.report->decorrelation;
  const bool pass = d.latent_b < d.model_b && d.latent_o < d.model_o;
  return {9, pass, "background latent " + fmt("%.3f", d.latent_b) + " vs model " + fmt("%.3f", d.model_b) +
                       "; observation latent " + fmt("%.3f", d.latent_o) + " vs model " + fmt("%.3f", d.model_o) +
                       " (" + std::to_string(d.samples) + " samples)"};
}

Outcome criterion_noise(Campaign& camp) {
  const auto& lo_hloba = camp.standard(Method::hloba, kSeeds.front());
  const auto& lo_l3 = camp.standard(Method::hl3dvar, kSeeds.front());
  if (!lo_hloba.report || !lo_l3.report) return {10, false, "low-noise runs failed"};

  ExperimentConfig hi = camp.base();
  const double c_lo = hi.observations.noise_level, c_hi = 0.1;
  hi.observations.noise_level = c_hi;
  if (hi.observations.error_level) hi.observations.error_level = c_hi;
  hi.latent.o2l_checkpoint.clear();
  hi.covariance.checkpoint.clear();
  std::cout << "  retraining O2L and covariances at c = " << c_hi << '\n' << std::flush;
  const Artifacts a = with_observation_settings(camp.artifacts(), hi);

  auto high = [&](Method m) {
    ExperimentConfig c = hi;
    c.method.name = m;
    c.covariance.weights = camp.tuned(m);
    c.experiment.seed = kSeeds.front();
    return camp.run(c, a, method_name(m) + " c=0.1");
  };
  const auto hi_hloba = high(Method::hloba);
  const auto hi_l3 = high(Method::hl3dvar);
  if (!hi_hloba.report || !hi_l3.report) return {10, false, "high-noise runs failed"};

  const double added = (c_hi - c_lo) * camp.artifacts().climatology.std.mean();
  const double ooa = (hi_hloba.report->mean_ooa_wrmse - lo_hloba.report->mean_ooa_wrmse) / added;
  const double l3 = (hi_l3.report->mean_analysis_wrmse - lo_l3.report->mean_analysis_wrmse) / added;
  return {10, ooa < l3, "OOA " + fmt("%.4f", lo_hloba.report->mean_ooa_wrmse) + " -> " +
                            fmt("%.4f", hi_hloba.report->mean_ooa_wrmse) + " (" + fmt("%.3f", ooa) +
                            " of added noise); HL3DVar " + fmt("%.4f", lo_l3.report->mean_analysis_wrmse) + " -> " +
                            fmt("%.4f", hi_l3.report->mean_analysis_wrmse) + " (" + fmt("%.3f", l3) + ")"};
}

Outcome criterion_determinism(Campaign& camp) {
  std::vector<std::string> csv;
  for (int k = 0; k < 2; ++k) {
    const Artifacts a = prepare_artifacts(camp.base());
    ExperimentConfig c = camp.base();
    const auto records = run_cycling_experiment(c, a);
    std::ostringstream s;
    write_cycles_csv(s, records, c.experiment.horizon);
    csv.push_back(s.str());
    std::ofstream((camp.out() / ("determinism_" + std::to_string(k) + ".csv")).string(), std::ios::binary) << csv.back();
  }
  const bool same = csv[0] == csv[1] && !csv[0].empty();
  return {11, same, std::to_string(csv[0].size()) + " bytes, " + (same ? "identical" : "DIFFERENT") + " (" +
                        method_name(camp.base().method.name) + ", artifacts rebuilt for each run)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string config_path, out = "acceptance_out";
  std::vector<int> only;
  std::optional<int> cycles;
  app.add_option("--config", config_path, "Base experiment configuration")->check(CLI::ExistingFile);
  app.add_option("--out", out, "Directory for tuning reports and run artifacts");
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--cycles", cycles, "Override experiment.cycles (shortened runs)");
  CLI11_PARSE(app, argc, argv);

  ExperimentConfig base = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
  if (cycles) base.experiment.cycles = *cycles;
  base.validate();
  Campaign camp(base, out);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, criterion_blue},
      {2, criterion_linear_regime},
      {3, criterion_gradients},
      {4, criterion_covariances},
      {5, [&] { return criterion_ordering(camp); }},
      {6, [&] { return criterion_r_ablation(camp); }},
      {7, [&] { return criterion_uncertainty(camp); }},
      {8, [&] { return criterion_latent_calibration(camp); }},
      {9, [&] { return criterion_decorrelation(camp); }},
      {10, [&] { return criterion_noise(camp); }},
      {11, [&] { return criterion_determinism(camp); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  std::vector<Outcome> outcomes;
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& [id, fn] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    std::cout << "criterion " << id << " ...\n" << std::flush;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {id, false, std::string("error: ") + e.what()};
    }
    o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    outcomes.push_back(o);
    summary.push_back({{"criterion", o.id}, {"pass", o.pass}, {"detail", o.detail}, {"seconds", o.seconds}});
  }
  json_io::write_file((fs::path(out) / "acceptance.json").string(), summary);

  std::cout << "\n";
  bool all = true;
  for (const auto& o : outcomes) {
    all = all && o.pass;
    std::printf("criterion %2d: %s  %s  [%.1f s]\n", o.id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), o.seconds);
  }
  return all ? 0 : 1;
}
