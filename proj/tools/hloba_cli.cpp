// Command-line driver: training, covariance estimation, tuning, cycling runs and gradient checks.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hloba/assimilation.hpp"
#include "hloba/error.hpp"
#include "hloba/harness/config.hpp"
#include "hloba/harness/experiment.hpp"
#include "hloba/json_io.hpp"

namespace fs = std::filesystem;
using namespace hloba;
using namespace hloba::harness;

namespace {

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

ExperimentConfig load(const GlobalOptions& g) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
  if (g.seed) cfg.experiment.seed = *g.seed;
  cfg.validate();
  return cfg;
}

fs::path output(const GlobalOptions& g, const std::string& name) {
  fs::create_directories(g.out);
  return fs::path(g.out) / name;
}

void write_json(const GlobalOptions& g, const std::string& name, const nlohmann::json& doc) {
  const fs::path p = output(g, name);
  json_io::write_file(p.string(), doc);
  std::cout << "wrote " << p.string() << '\n';
}

nlohmann::json report_json(const latent::TrainingReport& r) {
  return {{"initial_loss", r.initial_loss},
          {"final_loss", r.final_loss},
          {"validation_mse", r.validation_mse},
          {"linear_validation_mse", r.linear_validation_mse},
          {"improved_on_linear", r.improved_on_linear},
          {"steps", r.steps}};
}

/// Full per-cycle records, enough for `evaluate` to recompute every metric.
nlohmann::json records_json(const std::vector<CycleRecord>& records) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json j{{"cycle", r.cycle},
                     {"analysis_wrmse", r.analysis_wrmse},
                     {"slot_wrmse", r.slot_wrmse},
                     {"forecast_error", r.forecast_error},
                     {"analysis_error", json_io::to_json(r.analysis_error)},
                     {"diag_std", json_io::to_json(r.diag_std)},
                     {"mean_diag_std", r.mean_diag_std},
                     {"ooa_wrmse", r.ooa_wrmse},
                     {"solver_iters", r.solver_iters},
                     {"flags", r.flags}};
    nlohmann::json slots = nlohmann::json::array();
    for (const auto& d : r.latent) {
      slots.push_back({{"zb_error", json_io::to_json(d.zb_error)},
                       {"zo_error", json_io::to_json(d.zo_error)},
                       {"xb_error", json_io::to_json(d.xb_error)},
                       {"xo_error", json_io::to_json(d.xo_error)},
                       {"b_clim", json_io::to_json(d.b_clim)},
                       {"b_ens", json_io::to_json(d.b_ens)},
                       {"r_clim", json_io::to_json(d.r_clim)},
                       {"r_ens", json_io::to_json(d.r_ens)},
                       {"has_ensemble", d.has_ensemble}});
    }
    j["latent"] = slots;
    arr.push_back(j);
  }
  return arr;
}

double number(const nlohmann::json& j) { return j.is_null() ? kNaN : j.get<double>(); }

std::vector<CycleRecord> records_from_json(const nlohmann::json& arr) {
  std::vector<CycleRecord> out;
  for (const auto& j : arr) {
    CycleRecord r;
    r.cycle = j.at("cycle").get<long>();
    r.analysis_wrmse = number(j.at("analysis_wrmse"));
    for (const auto& v : j.at("slot_wrmse")) r.slot_wrmse.push_back(number(v));
    for (const auto& v : j.at("forecast_error")) r.forecast_error.push_back(number(v));
    r.analysis_error = json_io::vector_from_json(j.at("analysis_error"));
    r.diag_std = json_io::vector_from_json(j.at("diag_std"));
    r.mean_diag_std = number(j.at("mean_diag_std"));
    r.ooa_wrmse = number(j.at("ooa_wrmse"));
    r.solver_iters = j.at("solver_iters").get<int>();
    r.flags = j.at("flags").get<std::vector<std::string>>();
    for (const auto& s : j.at("latent")) {
      SlotDiagnostics d;
      d.zb_error = json_io::vector_from_json(s.at("zb_error"));
      d.zo_error = json_io::vector_from_json(s.at("zo_error"));
      d.xb_error = json_io::vector_from_json(s.at("xb_error"));
      d.xo_error = json_io::vector_from_json(s.at("xo_error"));
      d.b_clim = json_io::vector_from_json(s.at("b_clim"));
      d.b_ens = json_io::vector_from_json(s.at("b_ens"));
      d.r_clim = json_io::vector_from_json(s.at("r_clim"));
      d.r_ens = json_io::vector_from_json(s.at("r_ens"));
      d.has_ensemble = s.at("has_ensemble").get<bool>();
      r.latent.push_back(std::move(d));
    }
    out.push_back(std::move(r));
  }
  return out;
}

int cmd_train_ae(const GlobalOptions& g) {
  const ExperimentConfig cfg = load(g);
  const Climatology clim = generate_climatology(cfg);
  latent::TrainingReport rep;
  const auto ae = build_autoencoder(cfg, clim, &rep);
  write_json(g, "ae.json", latent::to_json(ae));
  nlohmann::json r = report_json(rep);
  r["normalized_reconstruction_mse"] = latent::normalized_reconstruction_mse(ae, clim.states);
  r["climatology_rmse"] = clim.rmse;
  write_json(g, "ae_report.json", r);
  return 0;
}

int cmd_train_o2l(const GlobalOptions& g) {
  const ExperimentConfig cfg = load(g);
  const Climatology clim = generate_climatology(cfg);
  const auto ae = build_autoencoder(cfg, clim);
  latent::TrainingReport rep;
  const auto o2l = build_o2l(cfg, clim, ae, &rep);
  write_json(g, "o2l.json", latent::to_json(o2l));
  write_json(g, "o2l_report.json", report_json(rep));
  return 0;
}

int cmd_estimate_cov(const GlobalOptions& g) {
  ExperimentConfig cfg = load(g);
  cfg.covariance.checkpoint.clear();
  const Climatology clim = generate_climatology(cfg);
  const auto ae = build_autoencoder(cfg, clim);
  const auto o2l = build_o2l(cfg, clim, ae);
  write_json(g, "covariances.json", to_json(estimate_climatological_covariances(cfg, clim, ae, o2l)));
  return 0;
}

int cmd_tune(const GlobalOptions& g) {
  const ExperimentConfig cfg = load(g);
  const Artifacts a = prepare_artifacts(cfg);
  const TuningResult t = tune(cfg, a, tuning_grid(cfg), cfg.experiment.tuning_cycles);
  nlohmann::json j = to_json(t);
  j["method"] = method_name(cfg.method.name);
  write_json(g, "tuning.json", j);
  return 0;
}

int cmd_run_da(const GlobalOptions& g, const std::string& tuning_path, bool keep_records) {
  ExperimentConfig cfg = load(g);
  if (!tuning_path.empty()) {
    const auto t = json_io::read_file(tuning_path);
    const auto& b = t.at("best");
    cfg.covariance.weights.alpha_ens = b.at("alpha_ens").get<double>();
    cfg.covariance.weights.beta_ens = b.at("beta_ens").get<double>();
    cfg.covariance.weights.inflation_b = b.at("inflation_b").get<double>();
    cfg.covariance.weights.inflation_r = b.at("inflation_r").get<double>();
  }
  const Artifacts a = prepare_artifacts(cfg);
  const auto records = run_cycling_experiment(cfg, a);
  {
    const fs::path p = output(g, "cycles.csv");
    std::ofstream out(p, std::ios::binary);
    write_cycles_csv(out, records, cfg.experiment.horizon);
    std::cout << "wrote " << p.string() << '\n';
  }
  EvaluationReport rep = evaluate(records, cfg.experiment.aggregation_windows, cfg.experiment.spin_up_cycles,
                                  method_name(cfg.method.name));
  rep.extra["config"] = to_json(cfg);
  rep.extra["climatology_rmse"] = a.climatology.rmse;
  write_json(g, "report.json", to_json(rep));
  if (keep_records) write_json(g, "records.json", records_json(records));
  std::printf("%s: mean analysis error %.4f, forecast error at horizon %.4f (climatology %.4f)\n",
              rep.method.c_str(), rep.mean_analysis_wrmse, rep.forecast_error_at_horizon, a.climatology.rmse);
  return 0;
}

int cmd_evaluate(const GlobalOptions& g, const std::string& records_path) {
  const ExperimentConfig cfg = load(g);
  const auto records = records_from_json(json_io::read_file(records_path));
  const EvaluationReport rep = evaluate(records, cfg.experiment.aggregation_windows, cfg.experiment.spin_up_cycles,
                                       method_name(cfg.method.name));
  write_json(g, "report.json", to_json(rep));
  return 0;
}

double relative_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

/// Central differences along random unit directions against the analytic directional derivative.
template <class Cost>
double check_gradient(const Cost& cost, const Eigen::VectorXd& x, Rng& rng, double h) {
  Eigen::VectorXd grad(x.size());
  cost(x, &grad);
  std::normal_distribution<double> normal;
  Eigen::VectorXd d(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) d[i] = normal(rng);
  d.normalize();
  const double fd = (cost(x + h * d, nullptr) - cost(x - h * d, nullptr)) / (2.0 * h);
  return relative_error(fd, grad.dot(d));
}

int cmd_gradcheck(const GlobalOptions& g, int points, double step, double tolerance) {
  const ExperimentConfig cfg = load(g);
  const Artifacts a = prepare_artifacts(cfg);
  Rng rng(derive_seed(cfg.experiment.seed, 99));
  std::uniform_int_distribution<std::size_t> pick(0, a.climatology.states.size() - 1);
  const auto steps = static_cast<std::size_t>(cfg.model.steps_per_da_interval);

  nlohmann::json results = nlohmann::json::array();
  bool ok = true;
  auto record = [&](const std::string& name, double err) {
    ok = ok && err <= tolerance;
    results.push_back({{"name", name}, {"relative_error", err}});
    std::printf("%-16s %.3e %s\n", name.c_str(), err, err <= tolerance ? "ok" : "FAIL");
  };

  for (int p = 0; p < points; ++p) {
    const StateVector truth = a.climatology.states[pick(rng)];
    DAProblem prob;
    prob.model = &cfg.model;
    prob.ae = &a.ae;
    StateVector x = truth;
    for (int i = 0; i < cfg.experiment.window_slots; ++i) {
      if (i > 0) x = dynamics::forecast_state(x, steps, cfg.model);
      prob.slot_obs.push_back(observations::synthesize(x, a.synthesis_network, rng, i));
      prob.slot_obs.back().network = a.assimilation_network;
    }
    prob.x_b = a.climatology.states[pick(rng)];
    prob.z_b = a.ae.encode(prob.x_b);
    prob.b = a.covariances.b;
    prob.b_z = a.covariances.b_z;
    const assimilation::VariationalCosts costs(prob);
    const std::string tag = "[" + std::to_string(p) + "]";
    record("3dvar" + tag, check_gradient([&](const Eigen::VectorXd& v, Eigen::VectorXd* gr) { return costs.cost_3dvar(v, gr); }, truth, rng, step));
    record("4dvar" + tag, check_gradient([&](const Eigen::VectorXd& v, Eigen::VectorXd* gr) { return costs.cost_4dvar(v, gr); }, truth, rng, step));
    const LatentVector z = a.ae.encode(truth);
    record("l3dvar" + tag, check_gradient([&](const Eigen::VectorXd& v, Eigen::VectorXd* gr) { return costs.cost_l3dvar(v, gr); }, z, rng, step));
    record("l4dvar" + tag, check_gradient([&](const Eigen::VectorXd& v, Eigen::VectorXd* gr) { return costs.cost_l4dvar(v, gr); }, z, rng, step));

    // J(x) = w . M(x) over one window checks the adjoint integration.
    Eigen::VectorXd w(truth.size());
    std::normal_distribution<double> normal;
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = normal(rng);
    const std::size_t n = steps * static_cast<std::size_t>(cfg.experiment.window_slots);
    record("adjoint" + tag, check_gradient(
                                [&](const Eigen::VectorXd& v, Eigen::VectorXd* gr) {
                                  if (gr != nullptr) *gr = dynamics::forecast_gradient(v, n, w, cfg.model);
                                  return w.dot(dynamics::forecast_state(v, n, cfg.model));
                                },
                                truth, rng, step));
  }
  write_json(g, "gradcheck.json", {{"step", step}, {"tolerance", tolerance}, {"results", results}, {"passed", ok}});
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid latent-space data assimilation on Lorenz-96"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "TOML experiment configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Override experiment.seed");
  app.add_option("--out", g.out, "Output directory");

  auto* train_ae = app.add_subcommand("train-ae", "Train the autoencoder; writes ae.json");
  auto* train_o2l = app.add_subcommand("train-o2l", "Train the observation-to-latent network; writes o2l.json");
  auto* estimate_cov = app.add_subcommand("estimate-cov", "Climatological B_z, R_z and B; writes covariances.json");
  auto* tune_cmd = app.add_subcommand("tune", "Grid search of hybrid weights on the tuning seed; writes tuning.json");

  auto* run_da = app.add_subcommand("run-da", "Cycling run; writes cycles.csv and report.json");
  std::string tuning_path;
  bool keep_records = false;
  run_da->add_option("--tuning", tuning_path, "Apply the best weights from a tuning.json")->check(CLI::ExistingFile);
  run_da->add_flag("--records", keep_records, "Also write records.json for later evaluation");

  auto* evaluate_cmd = app.add_subcommand("evaluate", "Recompute report.json from records.json");
  std::string records_path;
  evaluate_cmd->add_option("records", records_path, "records.json from run-da --records")
      ->required()
      ->check(CLI::ExistingFile);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference checks of every cost and the adjoint");
  int points = 5;
  double step = 1e-5, tolerance = 1e-4;
  gradcheck->add_option("--points", points, "Random points per check")->check(CLI::PositiveNumber);
  gradcheck->add_option("--step", step, "Central-difference step")->check(CLI::PositiveNumber);
  gradcheck->add_option("--tolerance", tolerance, "Relative tolerance")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_ae) return cmd_train_ae(g);
    if (*train_o2l) return cmd_train_o2l(g);
    if (*estimate_cov) return cmd_estimate_cov(g);
    if (*tune_cmd) return cmd_tune(g);
    if (*run_da) return cmd_run_da(g, tuning_path, keep_records);
    if (*evaluate_cmd) return cmd_evaluate(g, records_path);
    if (*gradcheck) return cmd_gradcheck(g, points, step, tolerance);
  } catch (const ConfigurationError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
