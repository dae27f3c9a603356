#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "hloba/dynamics.hpp"
#include "hloba/latent/network.hpp"

namespace hloba {

using LatentVector = Eigen::VectorXd;

namespace latent {

enum class AeVariant { linear, mlp };

/// Encoder E and decoder D acting on normalized states u = (x - mean) / scale.
struct AutoencoderModel {
  AeVariant variant = AeVariant::linear;
  int n_x = 0;
  int n_z = 0;
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;
  LayerStack encoder;
  LayerStack decoder;

  LatentVector encode(const StateVector& x) const;
  StateVector decode(const LatentVector& z) const;
  /// Gradient of <cotangent, D(z)> with respect to z.
  LatentVector decode_vjp(const LatentVector& z, const StateVector& cotangent) const;
  /// Jacobian of D at z, n_x x n_z, by reverse passes.
  Eigen::MatrixXd decode_jacobian(const LatentVector& z) const;

  /// Stable hash of the serialized parameters; ties an O2L model to the AE it was trained against.
  std::string fingerprint() const;
  void validate() const;
};

struct TrainingSchedule {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 2e-4;
  double warmup_fraction = 0.05;
  double validation_fraction = 0.1;
  std::vector<int> hidden_widths{64};
  Activation hidden_activation = Activation::tanh;
};

struct TrainingReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  /// Mean squared error per coordinate on the validation split, in normalized units.
  double validation_mse = 0.0;
  /// The PCA autoencoder's validation error at the same n_z (AE training only).
  double linear_validation_mse = 0.0;
  bool improved_on_linear = false;
  long steps = 0;
};

/// Descending eigenvalues of the covariance of normalized states.
Eigen::VectorXd normalized_spectrum(const std::vector<StateVector>& states);

/// PCA autoencoder: the encoder projects onto the leading n_z principal directions.
AutoencoderModel fit_linear_ae(const std::vector<StateVector>& states, int n_z);

/// Untrained MLP autoencoder with the given seed; train_mlp_ae starts from exactly these weights.
AutoencoderModel init_mlp_ae(const std::vector<StateVector>& states, int n_z, const TrainingSchedule& schedule,
                             std::uint64_t seed);

std::pair<AutoencoderModel, TrainingReport> train_mlp_ae(const std::vector<StateVector>& states, int n_z,
                                                         const TrainingSchedule& schedule, std::uint64_t seed);

/// Mean squared reconstruction error per coordinate, in normalized units.
double normalized_reconstruction_mse(const AutoencoderModel& model, const std::vector<StateVector>& states);

nlohmann::json to_json(const AutoencoderModel& model);
AutoencoderModel autoencoder_from_json(const nlohmann::json& doc);

}  // namespace latent
}  // namespace hloba
