#include "hloba/assimilation.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "hloba/error.hpp"

namespace hloba::assimilation {

namespace {

void require_positive(const DiagonalCovariance& cov, const char* what) {
  for (Eigen::Index i = 0; i < cov.size(); ++i) {
    if (!(cov.variances[i] > 0.0) || !std::isfinite(cov.variances[i])) {
      throw ContractError(std::string(what) + " variance must be positive and finite at dimension " +
                          std::to_string(i));
    }
  }
}

const ModelConfig& model_of(const DAProblem& p) {
  if (p.model == nullptr) throw ContractError("problem has no model configuration");
  return *p.model;
}

const latent::AutoencoderModel& ae_of(const DAProblem& p) {
  if (p.ae == nullptr) throw ContractError("latent method needs an autoencoder");
  return *p.ae;
}

LatentVector background_latent(const DAProblem& p) {
  return p.z_b.size() > 0 ? p.z_b : ae_of(p).encode(p.x_b);
}

std::vector<StateVector> slot_states(const StateVector& x0, int window, const ModelConfig& model) {
  std::vector<StateVector> states{x0};
  const auto steps = static_cast<std::size_t>(model.steps_per_da_interval);
  for (int i = 0; i < window; ++i) states.push_back(dynamics::forecast_state(states.back(), steps, model));
  return states;
}

/// Runs the chosen optimizer. Blow-ups inside the objective read as non-finite cost, and the
/// lowest finite cost evaluated is kept so a stalled run still returns its best point.
diffcore::MinimizeResult run_optimizer(const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>& cost,
                                       const Eigen::VectorXd& initial, const SolverSettings& settings, bool& flagged) {
  double best = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_x = initial;
  std::string blowup;
  const diffcore::Objective objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    double f;
    try {
      f = cost(x, &g);
    } catch (const IntegrationBlowup& e) {
      blowup = e.what();
      g = Eigen::VectorXd::Constant(x.size(), std::numeric_limits<double>::quiet_NaN());
      return std::numeric_limits<double>::quiet_NaN();
    }
    if (std::isfinite(f) && f < best) {
      best = f;
      best_x = x;
    }
    return f;
  };

  diffcore::MinimizeResult r;
  flagged = false;
  try {
    if (settings.optimizer == diffcore::OptimizerKind::lbfgs) {
      r = diffcore::lbfgs_minimize(objective, initial, settings.tolerance, settings.max_iters);
      flagged = !r.converged;
    } else {
      diffcore::AdamMinimizeSettings adam;
      adam.adam.learning_rate = settings.learning_rate;
      adam.max_iters = settings.max_iters;
      adam.patience = settings.patience;
      adam.min_improvement = settings.min_improvement;
      r = diffcore::adam_minimize(objective, initial, adam);
      // A patience stop without any descent from a non-stationary start is a stall.
      const bool no_descent = !(r.final_loss < r.initial_loss) && r.message != "gradient tolerance reached";
      flagged = !r.converged || no_descent || r.message.rfind("non-finite", 0) == 0;
    }
  } catch (const OptimizationStalled& e) {
    // best_x is the initial point when nothing finite was ever evaluated.
    flagged = true;
    r.x = best_x;
    r.initial_loss = r.final_loss = best;
    r.message = e.what();
    if (std::isfinite(best)) {
      Eigen::VectorXd g(initial.size());
      cost(best_x, &g);
      r.grad_norm = g.norm();
    }
  }
  if (!blowup.empty()) {
    flagged = true;
    r.message += "; " + blowup;
  }
  return r;
}

/// Trajectory from the analysis; a blow-up truncates it and flags the result.
void fill_trajectory(const StateVector& x0, int window, const ModelConfig& model, AnalysisResult& out) {
  out.window_trajectory = {x0};
  const auto steps = static_cast<std::size_t>(model.steps_per_da_interval);
  try {
    for (int i = 0; i < window; ++i) {
      out.window_trajectory.push_back(dynamics::forecast_state(out.window_trajectory.back(), steps, model));
    }
  } catch (const IntegrationBlowup& e) {
    out.flagged = true;
    out.message += std::string(out.message.empty() ? "" : "; ") + "window trajectory: " + e.what();
  }
}

void copy_diagnostics(const diffcore::MinimizeResult& r, bool flagged, AnalysisResult& out) {
  out.iterations = r.iterations;
  out.initial_cost = r.initial_loss;
  out.final_cost = r.final_loss;
  out.grad_norm = r.grad_norm;
  out.flagged = flagged;
  out.message = r.message;
}

}  // namespace

std::pair<LatentVector, DiagonalCovariance> hloba_update(const LatentVector& z_b, const LatentVector& z_o,
                                                         const DiagonalCovariance& b_z, const DiagonalCovariance& r_z) {
  const Eigen::Index n = z_b.size();
  if (z_o.size() != n || b_z.size() != n || r_z.size() != n) {
    throw ContractError("hloba_update: latent vectors and covariances must share one length");
  }
  require_positive(b_z, "background");
  require_positive(r_z, "observation");
  const Eigen::ArrayXd b = b_z.variances.array();
  const Eigen::ArrayXd r = r_z.variances.array();
  const Eigen::ArrayXd gain = b / (b + r);
  LatentVector z_a = z_b.array() + gain * (z_o - z_b).array();
  return {std::move(z_a), DiagonalCovariance{(b * r / (b + r)).matrix()}};
}

Eigen::VectorXd propagate_uncertainty(const latent::AutoencoderModel& ae, const LatentVector& z_a,
                                      const LatentVector& z_b, const DiagonalCovariance& a_z) {
  if (z_a.size() != ae.n_z || z_b.size() != ae.n_z || a_z.size() != ae.n_z) {
    throw ContractError("propagate_uncertainty: length mismatch with the autoencoder latent size");
  }
  if ((a_z.variances.array() < 0.0).any()) throw ContractError("propagate_uncertainty: negative latent variance");
  // sign(0) is taken as +1; the result is even in the sign vector.
  const Eigen::ArrayXd s = (z_a - z_b).array().unaryExpr([](double v) { return v < 0.0 ? -1.0 : 1.0; });
  const LatentVector step = (a_z.variances.array().sqrt() * s).matrix();
  const StateVector half = 0.5 * (ae.decode(z_a + step) - ae.decode(z_a - step));
  return half.cwiseAbs2();
}

VariationalCosts::VariationalCosts(const DAProblem& problem) : p_(problem) {
  if (p_.slot_obs.empty()) throw ContractError("problem needs at least one observation slot");
  for (const auto& obs : p_.slot_obs) {
    obs.check_consistency();
    for (std::size_t k = 0; k < obs.network.size(); ++k) {
      if (obs.active(k) && !(obs.network.noise_std[k] > 0.0)) {
        throw ContractError("observation error variance must be positive at active points");
      }
    }
  }
  if (p_.b.matrix.size() > 0) {
    if (p_.b.matrix.rows() != p_.x_b.size() || p_.b.matrix.cols() != p_.x_b.size()) {
      throw ContractError("B must be n_x by n_x");
    }
    b_factor_.emplace(p_.b.matrix);
    if (b_factor_->info() != Eigen::Success) throw ContractError("B is not positive definite");
  }
}

double VariationalCosts::observation_term(int slot, const StateVector& x, StateVector* grad) const {
  const ObservationSet& obs = p_.slot_obs.at(static_cast<std::size_t>(slot));
  if (x.size() != obs.network.n_x) throw ContractError("state length does not match the observation network");
  double j = 0.0;
  for (std::size_t k = 0; k < obs.network.size(); ++k) {
    if (!obs.active(k)) continue;
    const int i = obs.network.observed_indices[k];
    const double r = obs.network.noise_std[k] * obs.network.noise_std[k];
    const double d = x[i] - obs.values[static_cast<Eigen::Index>(k)];
    j += 0.5 * d * d / r;
    if (grad != nullptr) (*grad)[i] += d / r;
  }
  return j;
}

double VariationalCosts::window_term(const StateVector& x0, StateVector* grad) const {
  const ModelConfig& model = model_of(p_);
  const int n = p_.window();
  const std::vector<StateVector> states = slot_states(x0, n, model);
  double j = 0.0;
  for (int i = 0; i <= n; ++i) j += observation_term(i, states[static_cast<std::size_t>(i)], nullptr);
  if (grad == nullptr) return j;

  StateVector lambda = StateVector::Zero(x0.size());
  observation_term(n, states.back(), &lambda);
  const auto steps = static_cast<std::size_t>(model.steps_per_da_interval);
  for (int i = n - 1; i >= 0; --i) {
    lambda = dynamics::forecast_gradient(states[static_cast<std::size_t>(i)], steps, lambda, model);
    observation_term(i, states[static_cast<std::size_t>(i)], &lambda);
  }
  *grad += lambda;
  return j;
}

double VariationalCosts::cost_3dvar(const StateVector& x, StateVector* grad) const {
  if (!b_factor_) throw ContractError("model-space cost needs B");
  const StateVector d = x - p_.x_b;
  const StateVector b_inv_d = b_factor_->solve(d);
  if (grad != nullptr) *grad = b_inv_d;
  return 0.5 * d.dot(b_inv_d) + observation_term(0, x, grad);
}

double VariationalCosts::cost_4dvar(const StateVector& x, StateVector* grad) const {
  if (!b_factor_) throw ContractError("model-space cost needs B");
  const StateVector d = x - p_.x_b;
  const StateVector b_inv_d = b_factor_->solve(d);
  if (grad != nullptr) *grad = b_inv_d;
  return 0.5 * d.dot(b_inv_d) + window_term(x, grad);
}

double VariationalCosts::cost_l3dvar(const LatentVector& z, LatentVector* grad) const {
  const latent::AutoencoderModel& ae = ae_of(p_);
  require_positive(p_.b_z, "latent background");
  const LatentVector z_b = background_latent(p_);
  if (z.size() != z_b.size() || p_.b_z.size() != z.size()) throw ContractError("latent length mismatch");
  const LatentVector scaled = (z - z_b).cwiseQuotient(p_.b_z.variances);
  const StateVector x = ae.decode(z);
  StateVector gx = StateVector::Zero(x.size());
  const double j = 0.5 * (z - z_b).dot(scaled) + observation_term(0, x, grad != nullptr ? &gx : nullptr);
  if (grad != nullptr) *grad = scaled + ae.decode_vjp(z, gx);
  return j;
}

double VariationalCosts::cost_l4dvar(const LatentVector& z, LatentVector* grad) const {
  const latent::AutoencoderModel& ae = ae_of(p_);
  require_positive(p_.b_z, "latent background");
  const LatentVector z_b = background_latent(p_);
  if (z.size() != z_b.size() || p_.b_z.size() != z.size()) throw ContractError("latent length mismatch");
  const LatentVector scaled = (z - z_b).cwiseQuotient(p_.b_z.variances);
  const StateVector x = ae.decode(z);
  StateVector gx = StateVector::Zero(x.size());
  const double j = 0.5 * (z - z_b).dot(scaled) + window_term(x, grad != nullptr ? &gx : nullptr);
  if (grad != nullptr) *grad = scaled + ae.decode_vjp(z, gx);
  return j;
}

AnalysisResult solve_3dvar(const DAProblem& problem, const SolverSettings& settings) {
  const VariationalCosts costs(problem);
  bool flagged = false;
  const auto r = run_optimizer([&](const Eigen::VectorXd& x, Eigen::VectorXd* g) { return costs.cost_3dvar(x, g); },
                               problem.x_b, settings, flagged);
  AnalysisResult out;
  out.method = "3dvar";
  out.x_a = r.x;
  out.window_trajectory = {r.x};
  copy_diagnostics(r, flagged, out);
  return out;
}

AnalysisResult solve_4dvar(const DAProblem& problem, const SolverSettings& settings) {
  const VariationalCosts costs(problem);
  bool flagged = false;
  const auto r = run_optimizer([&](const Eigen::VectorXd& x, Eigen::VectorXd* g) { return costs.cost_4dvar(x, g); },
                               problem.x_b, settings, flagged);
  AnalysisResult out;
  out.method = "4dvar";
  out.x_a = r.x;
  copy_diagnostics(r, flagged, out);
  fill_trajectory(r.x, problem.window(), model_of(problem), out);
  return out;
}

AnalysisResult solve_l3dvar(const DAProblem& problem, const SolverSettings& settings) {
  const VariationalCosts costs(problem);
  bool flagged = false;
  const auto r = run_optimizer([&](const Eigen::VectorXd& z, Eigen::VectorXd* g) { return costs.cost_l3dvar(z, g); },
                               background_latent(problem), settings, flagged);
  AnalysisResult out;
  out.method = "l3dvar";
  out.z_a = r.x;
  out.x_a = ae_of(problem).decode(r.x);
  out.window_trajectory = {out.x_a};
  copy_diagnostics(r, flagged, out);
  return out;
}

AnalysisResult solve_l4dvar(const DAProblem& problem, const SolverSettings& settings) {
  const VariationalCosts costs(problem);
  bool flagged = false;
  const auto r = run_optimizer([&](const Eigen::VectorXd& z, Eigen::VectorXd* g) { return costs.cost_l4dvar(z, g); },
                               background_latent(problem), settings, flagged);
  AnalysisResult out;
  out.method = "l4dvar";
  out.z_a = r.x;
  out.x_a = ae_of(problem).decode(r.x);
  copy_diagnostics(r, flagged, out);
  fill_trajectory(out.x_a, problem.window(), model_of(problem), out);
  return out;
}

AnalysisResult hloba_sequential_window(const DAProblem& problem, const SlotCovarianceProvider& provider,
                                       const SlotObservationFilter& filter) {
  const latent::AutoencoderModel& ae = ae_of(problem);
  if (problem.o2l == nullptr) throw ContractError("HLOBA needs an observation-to-latent network");
  if (problem.slot_obs.empty()) throw ContractError("problem needs at least one observation slot");
  const int n = problem.window();
  if (n > 0) model_of(problem);

  AnalysisResult out;
  out.method = "hloba";
  StateVector x_b = problem.x_b;
  for (int i = 0; i <= n; ++i) {
    const ObservationSet obs =
        filter ? filter(i, x_b, problem.slot_obs[static_cast<std::size_t>(i)]) : problem.slot_obs[static_cast<std::size_t>(i)];
    SlotRecord rec;
    rec.x_b = x_b;
    rec.z_b = ae.encode(x_b);
    rec.z_o = latent::o2l_forward(*problem.o2l, obs);
    if (provider) {
      std::tie(rec.b_z, rec.r_z) = provider(i, x_b, obs, out.slots);
    } else {
      rec.b_z = problem.b_z;
      rec.r_z = problem.r_z;
    }
    std::tie(rec.z_a, rec.a_z) = hloba_update(rec.z_b, rec.z_o, rec.b_z, rec.r_z);
    rec.x_a = ae.decode(rec.z_a);
    rec.model_variance = propagate_uncertainty(ae, rec.z_a, rec.z_b, rec.a_z);
    out.window_trajectory.push_back(rec.x_a);
    out.slots.push_back(std::move(rec));

    if (i == n) break;
    try {
      x_b = dynamics::forecast_state(out.slots.back().x_a,
                                     static_cast<std::size_t>(problem.model->steps_per_da_interval), *problem.model);
    } catch (const IntegrationBlowup& e) {
      out.flagged = true;
      out.message = "slot " + std::to_string(i) + ": " + e.what();
      break;
    }
  }

  const SlotRecord& last = out.slots.back();
  out.x_a = last.x_a;
  out.z_a = last.z_a;
  out.latent_variance = last.a_z;
  out.model_variance = last.model_variance;
  return out;
}

}  // namespace hloba::assimilation
