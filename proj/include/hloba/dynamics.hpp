#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Core>

namespace hloba {

using StateVector = Eigen::VectorXd;

/// Lorenz-96 testbed parameters. One DA interval is `steps_per_da_interval` RK4 steps.
struct ModelConfig {
  int n_x = 40;
  double forcing = 8.0;
  double dt = 0.05;
  int steps_per_da_interval = 2;
  /// Any |value| above this aborts integration.
  double blowup_threshold = 1e6;
  /// Upper bound on RK4 steps whose stages are stored for a reverse sweep.
  std::size_t max_reverse_steps = 100000;

  /// Throws ConfigurationError if an invariant is violated.
  void validate() const;
};

struct Trajectory {
  std::vector<StateVector> states;
  int start_time = 0;
  double dt = 0.0;

  const StateVector& front() const { return states.front(); }
  const StateVector& back() const { return states.back(); }
  std::size_t size() const { return states.size(); }
};

namespace dynamics {

/// dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F with cyclic indices.
StateVector tendency(const StateVector& state, const ModelConfig& config);

/// Adjoint of the tendency linearised at `state`: returns J(state)^T v.
StateVector tendency_adjoint(const StateVector& state, const StateVector& v, const ModelConfig& config);

/// One classical RK4 step of size config.dt.
StateVector rk4_step(const StateVector& state, const ModelConfig& config);

/// Trajectory of n_steps + 1 states starting at `state`.
Trajectory forecast(const StateVector& state, std::size_t n_steps, const ModelConfig& config);

/// Final state only; avoids storing the trajectory.
StateVector forecast_state(const StateVector& state, std::size_t n_steps, const ModelConfig& config);

/// Reverse accumulation through every RK4 stage: given dJ/dx(end), returns dJ/dx(start).
StateVector forecast_gradient(const StateVector& state, std::size_t n_steps,
                              const StateVector& cost_grad_at_end, const ModelConfig& config);

}  // namespace dynamics
}  // namespace hloba
