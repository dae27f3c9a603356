#include "hloba/dynamics.hpp"

#include <cmath>
#include <string>

#include "hloba/error.hpp"

namespace hloba {

void ModelConfig::validate() const {
  if (n_x < 4) throw ConfigurationError("model.n_x must be >= 4, got " + std::to_string(n_x));
  if (!(dt > 0.0)) throw ConfigurationError("model.dt must be positive");
  if (steps_per_da_interval < 1) throw ConfigurationError("model.steps_per_da_interval must be >= 1");
  if (!(blowup_threshold > 0.0)) throw ConfigurationError("model.blowup_threshold must be positive");
}

namespace dynamics {
namespace {

inline Eigen::Index wrap(Eigen::Index i, Eigen::Index n) { return (i % n + n) % n; }

void check_dimension(const StateVector& state, const ModelConfig& config) {
  if (state.size() != config.n_x) {
    throw ConfigurationError("state has length " + std::to_string(state.size()) + ", model expects n_x=" +
                             std::to_string(config.n_x));
  }
}

void check_finite(const StateVector& state, const ModelConfig& config, std::size_t step) {
  for (Eigen::Index i = 0; i < state.size(); ++i) {
    const double v = state[i];
    if (!std::isfinite(v) || std::abs(v) > config.blowup_threshold) {
      throw IntegrationBlowup("integration blew up at step " + std::to_string(step) + ", coordinate " +
                                  std::to_string(i) + " = " + std::to_string(v),
                              step);
    }
  }
}

// Stage inputs of one RK4 step, kept for the reverse sweep.
struct Stages {
  StateVector x1, x2, x3, x4;
};

StateVector step_with_stages(const StateVector& x, const ModelConfig& config, Stages* stages) {
  const double dt = config.dt;
  const StateVector k1 = tendency(x, config);
  StateVector x2 = x + 0.5 * dt * k1;
  const StateVector k2 = tendency(x2, config);
  StateVector x3 = x + 0.5 * dt * k2;
  const StateVector k3 = tendency(x3, config);
  StateVector x4 = x + dt * k3;
  const StateVector k4 = tendency(x4, config);
  if (stages != nullptr) {
    stages->x1 = x;
    stages->x2 = std::move(x2);
    stages->x3 = std::move(x3);
    stages->x4 = std::move(x4);
  }
  return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

}  // namespace

StateVector tendency(const StateVector& state, const ModelConfig& config) {
  check_dimension(state, config);
  const Eigen::Index n = state.size();
  StateVector out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out[i] = (state[wrap(i + 1, n)] - state[wrap(i - 2, n)]) * state[wrap(i - 1, n)] - state[i] + config.forcing;
  }
  return out;
}

StateVector tendency_adjoint(const StateVector& x, const StateVector& v, const ModelConfig& config) {
  check_dimension(x, config);
  check_dimension(v, config);
  const Eigen::Index n = x.size();
  StateVector out(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    // Row i of the Jacobian touches x_{i+1}, x_{i-2}, x_{i-1}, x_i; collect the rows that touch x_j.
    out[j] = v[wrap(j - 1, n)] * x[wrap(j - 2, n)]                          // i = j-1, via x_{i+1}
             - v[wrap(j + 2, n)] * x[wrap(j + 1, n)]                        // i = j+2, via x_{i-2}
             + v[wrap(j + 1, n)] * (x[wrap(j + 2, n)] - x[wrap(j - 1, n)])  // i = j+1, via x_{i-1}
             - v[j];
  }
  return out;
}

StateVector rk4_step(const StateVector& state, const ModelConfig& config) {
  check_dimension(state, config);
  check_finite(state, config, 0);
  StateVector next = step_with_stages(state, config, nullptr);
  check_finite(next, config, 1);
  return next;
}

Trajectory forecast(const StateVector& state, std::size_t n_steps, const ModelConfig& config) {
  check_dimension(state, config);
  check_finite(state, config, 0);
  Trajectory traj;
  traj.dt = config.dt;
  traj.states.reserve(n_steps + 1);
  traj.states.push_back(state);
  for (std::size_t s = 0; s < n_steps; ++s) {
    traj.states.push_back(step_with_stages(traj.states.back(), config, nullptr));
    check_finite(traj.states.back(), config, s + 1);
  }
  return traj;
}

StateVector forecast_state(const StateVector& state, std::size_t n_steps, const ModelConfig& config) {
  check_dimension(state, config);
  check_finite(state, config, 0);
  StateVector x = state;
  for (std::size_t s = 0; s < n_steps; ++s) {
    x = step_with_stages(x, config, nullptr);
    check_finite(x, config, s + 1);
  }
  return x;
}

StateVector forecast_gradient(const StateVector& state, std::size_t n_steps, const StateVector& cost_grad_at_end,
                              const ModelConfig& config) {
  check_dimension(state, config);
  check_dimension(cost_grad_at_end, config);
  if (n_steps > config.max_reverse_steps) {
    throw ResourceError("reverse sweep over " + std::to_string(n_steps) + " steps exceeds the cap of " +
                        std::to_string(config.max_reverse_steps));
  }
  std::vector<Stages> tape(n_steps);
  StateVector x = state;
  check_finite(x, config, 0);
  for (std::size_t s = 0; s < n_steps; ++s) {
    x = step_with_stages(x, config, &tape[s]);
    check_finite(x, config, s + 1);
  }

  const double dt = config.dt;
  StateVector lambda = cost_grad_at_end;
  for (std::size_t s = n_steps; s-- > 0;) {
    const Stages& st = tape[s];
    const StateVector g4 = tendency_adjoint(st.x4, (dt / 6.0) * lambda, config);
    const StateVector g3 = tendency_adjoint(st.x3, (dt / 3.0) * lambda + dt * g4, config);
    const StateVector g2 = tendency_adjoint(st.x2, (dt / 3.0) * lambda + 0.5 * dt * g3, config);
    const StateVector g1 = tendency_adjoint(st.x1, (dt / 6.0) * lambda + 0.5 * dt * g2, config);
    lambda += g1 + g2 + g3 + g4;
  }
  return lambda;
}

}  // namespace dynamics
}  // namespace hloba
