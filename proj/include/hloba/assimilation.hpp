#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "hloba/covariance.hpp"
#include "hloba/diffcore/optimizers.hpp"
#include "hloba/dynamics.hpp"
#include "hloba/latent/autoencoder.hpp"
#include "hloba/latent/o2l.hpp"
#include "hloba/observations.hpp"

namespace hloba {

/// Per-slot record of a sequential latent window.
struct SlotRecord {
  StateVector x_b;
  StateVector x_a;
  LatentVector z_b;
  LatentVector z_o;
  LatentVector z_a;
  DiagonalCovariance b_z;
  DiagonalCovariance r_z;
  DiagonalCovariance a_z;
  Eigen::VectorXd model_variance;
};

struct AnalysisResult {
  std::string method;
  StateVector x_a;
  std::optional<LatentVector> z_a;
  std::optional<DiagonalCovariance> latent_variance;
  std::optional<Eigen::VectorXd> model_variance;
  /// States at every window slot, starting from the analysis time.
  std::vector<StateVector> window_trajectory;
  std::vector<SlotRecord> slots;

  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  double grad_norm = 0.0;
  /// Set when the optimizer stalled or hit its cap; x_a is then the best point found.
  bool flagged = false;
  std::string message;
};

struct SolverSettings {
  diffcore::OptimizerKind optimizer = diffcore::OptimizerKind::adam;
  double learning_rate = 0.05;
  int max_iters = 500;
  int patience = 20;
  double min_improvement = 1e-8;
  /// Gradient-norm tolerance for L-BFGS.
  double tolerance = 1e-8;

  static SolverSettings latent_adam() { return {}; }
  static SolverSettings model_adam() {
    SolverSettings s;
    s.learning_rate = 0.02;
    return s;
  }
  static SolverSettings lbfgs(double tol = 1e-8, int max_iters = 5000) {
    SolverSettings s;
    s.optimizer = diffcore::OptimizerKind::lbfgs;
    s.tolerance = tol;
    s.max_iters = max_iters;
    return s;
  }
};

/// Everything one analysis needs. Slot i of the window is i DA intervals after slot 0.
struct DAProblem {
  StateVector x_b;
  LatentVector z_b;
  std::vector<ObservationSet> slot_obs;
  FullCovariance b;
  DiagonalCovariance b_z;
  DiagonalCovariance r_z;
  const ModelConfig* model = nullptr;
  const latent::AutoencoderModel* ae = nullptr;
  const latent::O2LModel* o2l = nullptr;

  int window() const { return static_cast<int>(slot_obs.size()) - 1; }
};

namespace assimilation {

/// Elementwise latent BLUE: returns (z_a, diag A_z).
std::pair<LatentVector, DiagonalCovariance> hloba_update(const LatentVector& z_b, const LatentVector& z_o,
                                                         const DiagonalCovariance& b_z, const DiagonalCovariance& r_z);

/// Model-space analysis variance from a symmetric decoder difference along the increment signs.
Eigen::VectorXd propagate_uncertainty(const latent::AutoencoderModel& ae, const LatentVector& z_a,
                                      const LatentVector& z_b, const DiagonalCovariance& a_z);

/// Observation part of the costs, shared by all variational forms. Holds a Cholesky factor of B.
class VariationalCosts {
 public:
  explicit VariationalCosts(const DAProblem& problem);

  /// Model-space 3DVar on slot 0.
  double cost_3dvar(const StateVector& x, StateVector* grad) const;
  /// Model-space 4DVar over the whole window, initial state x.
  double cost_4dvar(const StateVector& x, StateVector* grad) const;
  /// Latent 3DVar on slot 0.
  double cost_l3dvar(const LatentVector& z, LatentVector* grad) const;
  /// Latent 4DVar over the whole window.
  double cost_l4dvar(const LatentVector& z, LatentVector* grad) const;

  /// Sum over active points of slot `slot` of (H x - y)^2 / (2 r); gradient is added to `grad`.
  double observation_term(int slot, const StateVector& x, StateVector* grad) const;
  /// Window observation cost from initial state x0, with adjoint accumulation into grad.
  double window_term(const StateVector& x0, StateVector* grad) const;

 private:
  const DAProblem& p_;
  std::optional<Eigen::LLT<Eigen::MatrixXd>> b_factor_;
};

AnalysisResult solve_3dvar(const DAProblem& problem, const SolverSettings& settings = SolverSettings::lbfgs());
AnalysisResult solve_4dvar(const DAProblem& problem, const SolverSettings& settings = SolverSettings::model_adam());
AnalysisResult solve_l3dvar(const DAProblem& problem, const SolverSettings& settings = SolverSettings::latent_adam());
AnalysisResult solve_l4dvar(const DAProblem& problem, const SolverSettings& settings = SolverSettings::latent_adam());

/// Supplies B_z and R_z for a slot given the background there and the slots already analysed.
using SlotCovarianceProvider = std::function<std::pair<DiagonalCovariance, DiagonalCovariance>(
    int slot, const StateVector& x_b, const ObservationSet& obs, const std::vector<SlotRecord>& done)>;

/// Optional per-slot observation screening against that slot's background (quality control).
using SlotObservationFilter = std::function<ObservationSet(int slot, const StateVector& x_b, const ObservationSet& obs)>;

/// Slot by slot: encode the background, map observations to z_o, update, decode, forecast on.
/// Without a provider every slot uses problem.b_z and problem.r_z.
AnalysisResult hloba_sequential_window(const DAProblem& problem, const SlotCovarianceProvider& provider = {},
                                       const SlotObservationFilter& filter = {});

}  // namespace assimilation
}  // namespace hloba
