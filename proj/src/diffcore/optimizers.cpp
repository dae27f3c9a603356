#include "hloba/diffcore/optimizers.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "hloba/error.hpp"

namespace hloba::diffcore {

OptimizerState OptimizerState::make_adam(const AdamSettings& settings) {
  OptimizerState s;
  s.kind = OptimizerKind::adam;
  s.adam = settings;
  return s;
}

OptimizerState OptimizerState::make_lbfgs(const LbfgsSettings& settings) {
  OptimizerState s;
  s.kind = OptimizerKind::lbfgs;
  s.lbfgs = settings;
  return s;
}

namespace {

void adam_update(Eigen::Map<Eigen::VectorXd> p, Eigen::Map<const Eigen::VectorXd> g, Eigen::Map<Eigen::VectorXd> m,
                 Eigen::Map<Eigen::VectorXd> v, const AdamSettings& a, double bias1, double bias2) {
  m = a.beta1 * m + (1.0 - a.beta1) * g;
  v = a.beta2 * v + (1.0 - a.beta2) * g.cwiseAbs2();
  const double step = a.learning_rate / bias1;
  p.array() -= step * m.array() / ((v.array() / bias2).sqrt() + a.epsilon);
}

void require_finite(const Eigen::Ref<const Eigen::VectorXd>& v, const char* what) {
  if (!v.allFinite()) throw OptimizationStalled(std::string("non-finite ") + what + " in optimizer");
}

}  // namespace

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, OptimizerState& state) {
  if (state.kind != OptimizerKind::adam) throw ContractError("adam_step requires an Adam optimizer state");
  if (params.size() != grads.size()) throw ContractError("adam_step: parameter and gradient counts differ");
  if (state.first_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.push_back(Tensor::zeros(p.shape()));
      state.second_moment.push_back(Tensor::zeros(p.shape()));
    }
  }
  if (state.first_moment.size() != params.size()) throw ContractError("adam_step: moment buffers do not match");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].same_shape(grads[i]) || !params[i].same_shape(state.first_moment[i])) {
      throw ContractError("adam_step: shape mismatch for parameter " + std::to_string(i));
    }
    require_finite(grads[i].flat(), "gradient");
  }
  ++state.step_count;
  const double bias1 = 1.0 - std::pow(state.adam.beta1, static_cast<double>(state.step_count));
  const double bias2 = 1.0 - std::pow(state.adam.beta2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_update(params[i].flat(), grads[i].flat(), state.first_moment[i].flat(), state.second_moment[i].flat(),
                state.adam, bias1, bias2);
    require_finite(params[i].flat(), "parameter");
  }
}

void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads, OptimizerState& state) {
  if (state.kind != OptimizerKind::adam) throw ContractError("adam_step requires an Adam optimizer state");
  if (params.size() != grads.size()) throw ContractError("adam_step: parameter and gradient sizes differ");
  if (state.first_moment.empty()) {
    state.first_moment.push_back(Tensor::zeros({static_cast<std::size_t>(params.size())}));
    state.second_moment.push_back(Tensor::zeros({static_cast<std::size_t>(params.size())}));
  }
  if (state.first_moment.size() != 1 || state.first_moment[0].size() != static_cast<std::size_t>(params.size())) {
    throw ContractError("adam_step: moment buffers do not match parameter size");
  }
  require_finite(grads, "gradient");
  ++state.step_count;
  const double bias1 = 1.0 - std::pow(state.adam.beta1, static_cast<double>(state.step_count));
  const double bias2 = 1.0 - std::pow(state.adam.beta2, static_cast<double>(state.step_count));
  adam_update(Eigen::Map<Eigen::VectorXd>(params.data(), params.size()),
              Eigen::Map<const Eigen::VectorXd>(grads.data(), grads.size()), state.first_moment[0].flat(),
              state.second_moment[0].flat(), state.adam, bias1, bias2);
  require_finite(params, "parameter");
}

MinimizeResult lbfgs_minimize(const Objective& objective, Eigen::VectorXd x, double tolerance, int max_iters,
                              const LbfgsSettings& settings) {
  if (!(tolerance > 0.0)) throw ContractError("lbfgs tolerance must be positive");
  require_finite(x, "initial point");
  OptimizerState state = OptimizerState::make_lbfgs(settings);

  MinimizeResult r;
  Eigen::VectorXd g(x.size());
  double f = objective(x, g);
  ++r.evaluations;
  if (!std::isfinite(f) || !g.allFinite()) throw OptimizationStalled("lbfgs: non-finite objective at start");
  r.initial_loss = f;

  Eigen::VectorXd g_new(x.size());
  Eigen::VectorXd alpha_hist(static_cast<Eigen::Index>(settings.memory_size));
  while (g.norm() > tolerance && r.iterations < max_iters) {
    // Two-loop recursion for d = -H g.
    Eigen::VectorXd q = g;
    const auto& hist = state.history;
    for (std::size_t k = hist.size(); k-- > 0;) {
      const auto& [s, y] = hist[k];
      const double a = s.dot(q) / y.dot(s);
      alpha_hist[static_cast<Eigen::Index>(k)] = a;
      q -= a * y;
    }
    double gamma = 1.0;
    if (!hist.empty()) gamma = hist.back().first.dot(hist.back().second) / hist.back().second.squaredNorm();
    Eigen::VectorXd d = gamma * q;
    for (std::size_t k = 0; k < hist.size(); ++k) {
      const auto& [s, y] = hist[k];
      const double b = y.dot(d) / y.dot(s);
      d += s * (alpha_hist[static_cast<Eigen::Index>(k)] - b);
    }
    d = -d;
    double slope = g.dot(d);
    if (!(slope < 0.0)) {
      state.history.clear();
      d = -g;
      slope = -g.squaredNorm();
    }

    double step = hist.empty() ? std::min(1.0, 1.0 / g.norm()) : 1.0;
    double f_new = 0.0;
    int backtracks = 0;
    for (;;) {
      const Eigen::VectorXd trial = x + step * d;
      const bool moved = trial != x;
      f_new = objective(trial, g_new);
      ++r.evaluations;
      if (moved && std::isfinite(f_new) && g_new.allFinite()) {
        if (f_new <= f + settings.armijo_c * step * slope) break;
        // Once the predicted decrease is below the resolution of f, fall back to the gradient norm.
        const double resolution = 8.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f));
        if (-settings.armijo_c * step * slope < resolution && f_new <= f + resolution && g_new.norm() < g.norm()) break;
      }
      if (!moved || ++backtracks > settings.max_backtracks) {
        std::ostringstream msg;
        msg << "lbfgs line search failed after " << backtracks << " backtracks at iteration "
            << r.iterations << " (loss " << f << ", gradient norm " << g.norm() << ", directional slope " << slope
            << ")";
        throw OptimizationStalled(msg.str());
      }
      step *= settings.backtrack_factor;
    }

    Eigen::VectorXd s = step * d;
    Eigen::VectorXd y = g_new - g;
    x += s;
    f = f_new;
    g = g_new;
    ++r.iterations;
    ++state.step_count;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      state.history.emplace_back(std::move(s), std::move(y));
      if (state.history.size() > settings.memory_size) state.history.pop_front();
    }
  }

  r.x = std::move(x);
  r.final_loss = f;
  r.grad_norm = g.norm();
  r.converged = r.grad_norm <= tolerance;
  r.message = r.converged ? "converged" : "iteration cap reached";
  return r;
}

std::pair<std::vector<Tensor>, MinimizeResult> lbfgs_minimize(const LossProgram& program,
                                                              const std::vector<Tensor>& initial, double tolerance,
                                                              int max_iters, const LbfgsSettings& settings) {
  Eigen::Index total = 0;
  for (const Tensor& t : initial) total += static_cast<Eigen::Index>(t.size());
  auto unflatten = [&](const Eigen::VectorXd& x) {
    std::vector<Tensor> params = initial;
    Eigen::Index offset = 0;
    for (Tensor& t : params) {
      const auto n = static_cast<Eigen::Index>(t.size());
      t.flat() = x.segment(offset, n);
      offset += n;
    }
    return params;
  };
  Eigen::VectorXd x0(total);
  Eigen::Index offset = 0;
  for (const Tensor& t : initial) {
    x0.segment(offset, static_cast<Eigen::Index>(t.size())) = t.flat();
    offset += static_cast<Eigen::Index>(t.size());
  }
  Objective objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    auto [value, grads] = value_and_grad(program, unflatten(x));
    Eigen::Index o = 0;
    for (const Tensor& t : grads) {
      g.segment(o, static_cast<Eigen::Index>(t.size())) = t.flat();
      o += static_cast<Eigen::Index>(t.size());
    }
    return value;
  };
  MinimizeResult r = lbfgs_minimize(objective, x0, tolerance, max_iters, settings);
  return {unflatten(r.x), std::move(r)};
}

MinimizeResult adam_minimize(const Objective& objective, Eigen::VectorXd x, const AdamMinimizeSettings& settings) {
  require_finite(x, "initial point");
  OptimizerState state = OptimizerState::make_adam(settings.adam);
  MinimizeResult r;
  Eigen::VectorXd g(x.size());
  std::vector<double> best_history;
  best_history.reserve(static_cast<std::size_t>(settings.max_iters) + 1);

  double best = 0.0;
  Eigen::VectorXd best_x = x;
  double best_grad_norm = 0.0;
  for (int it = 0;; ++it) {
    const double f = objective(x, g);
    ++r.evaluations;
    if (!std::isfinite(f) || !g.allFinite()) {
      if (it == 0) throw OptimizationStalled("adam: non-finite objective at the starting point");
      r.message = "non-finite objective, returning best iterate";
      break;
    }
    if (it == 0) {
      r.initial_loss = f;
      best = f;
      best_grad_norm = g.norm();
    } else if (f < best) {
      best = f;
      best_x = x;
      best_grad_norm = g.norm();
    }
    best_history.push_back(best);

    if (g.norm() <= settings.grad_tolerance) {
      r.converged = true;
      r.message = "gradient tolerance reached";
      break;
    }
    if (it >= settings.patience &&
        best_history[static_cast<std::size_t>(it - settings.patience)] - best < settings.min_improvement) {
      r.converged = true;
      r.message = "cost improvement below threshold";
      break;
    }
    if (it >= settings.max_iters) {
      r.message = "iteration cap reached";
      break;
    }
    adam_step(x, g, state);
    ++r.iterations;
  }
  r.x = std::move(best_x);
  r.final_loss = best;
  r.grad_norm = best_grad_norm;
  return r;
}

double warmup_cosine_rate(double base_rate, long step, long total_steps, double warmup_fraction) {
  if (total_steps <= 0) return base_rate;
  const long warmup = static_cast<long>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return base_rate * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const long decay_steps = std::max(1L, total_steps - warmup);
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(decay_steps));
  return 0.5 * base_rate * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace hloba::diffcore
