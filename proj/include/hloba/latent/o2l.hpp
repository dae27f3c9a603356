#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "hloba/latent/autoencoder.hpp"
#include "hloba/observations.hpp"

namespace hloba::latent {

/// Observation-to-latent network. Input is [normalized observation image, quality mask], 2 n_x wide.
struct O2LModel {
  int n_x = 0;
  int n_z = 0;
  /// Input normalization, copied from the companion autoencoder.
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;
  LayerStack layers;
  std::string ae_fingerprint;

  void validate() const;
};

struct O2LOptions {
  std::vector<int> hidden_widths{96, 96};
  /// Training masks are drawn uniformly from [mask_min, 1] at observed points.
  double mask_min = 0.5;
  /// Probability that an observed point is dropped (mask 0) in a training sample.
  double drop_fraction = 0.1;
  int weight_smoothing_width = 5;
};

/// Spatial loss weight on the grid: cyclic moving average of the mask, rescaled to [0.5, 1].
/// A constant mask maps to 0.5 everywhere.
Eigen::VectorXd loss_weight_map(const Eigen::VectorXd& mask, int width = 5);

/// Averages a grid field onto n_z contiguous blocks, one per latent dimension.
Eigen::VectorXd pool_to_latent(const Eigen::VectorXd& grid_field, int n_z);

/// Network input for a dense observation image and mask.
Eigen::VectorXd o2l_input(const O2LModel& model, const Eigen::VectorXd& dense_values, const Eigen::VectorXd& mask);

/// Training loss on one batch: mean over rows and latent dimensions of (w * (O2L(input) - target))^2,
/// with the network parameters taken from `params` (to_tensors order). Fills `grads` when given.
double o2l_batch_loss(const LayerStack& layers, const std::vector<diffcore::Tensor>& params,
                      const diffcore::RowMatrix& inputs, const diffcore::RowMatrix& targets,
                      const diffcore::RowMatrix& weights, std::vector<diffcore::Tensor>* grads);

std::pair<O2LModel, TrainingReport> train_o2l(const AutoencoderModel& ae, const std::vector<StateVector>& states,
                                              const ObservationNetwork& network, const TrainingSchedule& schedule,
                                              std::uint64_t seed, const O2LOptions& options = {});

/// z_o for one observation set. Rejects sets whose inactive points carry values.
LatentVector o2l_forward(const O2LModel& model, const ObservationSet& obs);

nlohmann::json to_json(const O2LModel& model);
O2LModel o2l_from_json(const nlohmann::json& doc);

}  // namespace hloba::latent
