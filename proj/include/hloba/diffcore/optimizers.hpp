#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "hloba/diffcore/tape.hpp"
#include "hloba/diffcore/tensor.hpp"

namespace hloba::diffcore {

enum class OptimizerKind { adam, lbfgs };

struct AdamSettings {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct LbfgsSettings {
  std::size_t memory_size = 10;
  /// Sufficient-decrease constant of the Armijo condition.
  double armijo_c = 1e-4;
  double backtrack_factor = 0.5;
  int max_backtracks = 60;
};

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  long step_count = 0;

  AdamSettings adam;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;

  LbfgsSettings lbfgs;
  std::deque<std::pair<Eigen::VectorXd, Eigen::VectorXd>> history;  // (s, y) pairs, oldest first

  static OptimizerState make_adam(const AdamSettings& settings = {});
  static OptimizerState make_lbfgs(const LbfgsSettings& settings = {});
};

/// One bias-corrected Adam update applied in place. Moment buffers are created on first use.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, OptimizerState& state);

/// Flat-vector overload used by the variational solvers.
void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads, OptimizerState& state);

/// f(x), writing df/dx into `grad`.
using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

struct MinimizeResult {
  Eigen::VectorXd x;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  int evaluations = 0;
  /// False when the iteration cap stopped the run before the convergence test passed.
  bool converged = false;
  std::string message;
};

/// Limited-memory BFGS with Armijo backtracking. Throws OptimizationStalled (carrying the
/// current iterate diagnostics in its message) if the line search cannot find a decrease.
MinimizeResult lbfgs_minimize(const Objective& objective, Eigen::VectorXd initial, double tolerance, int max_iters,
                              const LbfgsSettings& settings = {});

/// Tape-program front end: parameters are flattened, minimized, and reshaped back.
std::pair<std::vector<Tensor>, MinimizeResult> lbfgs_minimize(const LossProgram& program,
                                                              const std::vector<Tensor>& initial, double tolerance,
                                                              int max_iters, const LbfgsSettings& settings = {});

struct AdamMinimizeSettings {
  AdamSettings adam;
  int max_iters = 500;
  /// Stop when the best cost improved by less than min_improvement over this many iterations.
  int patience = 20;
  double min_improvement = 1e-8;
  double grad_tolerance = 0.0;
};

/// Full-batch Adam on a deterministic objective. Returns the best iterate seen, so the final
/// cost never exceeds the cost at the starting point.
MinimizeResult adam_minimize(const Objective& objective, Eigen::VectorXd initial, const AdamMinimizeSettings& settings);

/// Linear warm-up over the first `warmup_fraction` of steps, then cosine decay to zero.
double warmup_cosine_rate(double base_rate, long step, long total_steps, double warmup_fraction);

}  // namespace hloba::diffcore
