#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "hloba/diffcore/tape.hpp"
#include "hloba/observations.hpp"

namespace hloba::latent {

enum class Activation { identity, tanh };

std::string activation_name(Activation a);
Activation activation_from_name(const std::string& name);

/// y = act(x W + b) with x as a row; W is (inputs x outputs).
struct DenseLayer {
  diffcore::RowMatrix weights;
  Eigen::VectorXd bias;
  Activation activation = Activation::identity;

  Eigen::Index inputs() const { return weights.rows(); }
  Eigen::Index outputs() const { return weights.cols(); }
};

using LayerStack = std::vector<DenseLayer>;

/// Glorot-uniform weights and zero biases for the given widths.
LayerStack init_layers(const std::vector<int>& widths, Activation hidden, Rng& rng);

Eigen::VectorXd forward(const LayerStack& layers, const Eigen::VectorXd& input);
/// Row-wise forward pass on a batch (one sample per row).
diffcore::RowMatrix forward_batch(const LayerStack& layers, const diffcore::RowMatrix& inputs);

/// Parameters as tensors in the order W0, b0, W1, b1, ...
std::vector<diffcore::Tensor> to_tensors(const LayerStack& layers);
void assign_from_tensors(LayerStack& layers, const std::vector<diffcore::Tensor>& params);

/// Records the forward pass on a tape. `params` holds one leaf per tensor of to_tensors().
diffcore::Var forward_on_tape(diffcore::Tape& tape, const LayerStack& layers, std::span<const diffcore::Var> params,
                              diffcore::Var input);

nlohmann::json layers_to_json(const LayerStack& layers);
LayerStack layers_from_json(const nlohmann::json& array);

}  // namespace hloba::latent
