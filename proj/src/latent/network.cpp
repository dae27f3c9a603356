#include "hloba/latent/network.hpp"

#include <cmath>

#include "hloba/error.hpp"
#include "hloba/json_io.hpp"

namespace hloba::latent {

using diffcore::RowMatrix;
using diffcore::Tensor;
using diffcore::Var;

std::string activation_name(Activation a) { return a == Activation::tanh ? "tanh" : "identity"; }

Activation activation_from_name(const std::string& name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "identity" || name == "linear") return Activation::identity;
  throw ConfigurationError("unknown activation '" + name + "'");
}

LayerStack init_layers(const std::vector<int>& widths, Activation hidden, Rng& rng) {
  if (widths.size() < 2) throw ConfigurationError("a network needs at least an input and an output width");
  LayerStack layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int fan_in = widths[l], fan_out = widths[l + 1];
    if (fan_in < 1 || fan_out < 1) throw ConfigurationError("layer widths must be positive");
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> uniform(-limit, limit);
    DenseLayer layer;
    layer.weights.resize(fan_in, fan_out);
    for (Eigen::Index i = 0; i < layer.weights.size(); ++i) layer.weights.data()[i] = uniform(rng);
    layer.bias = Eigen::VectorXd::Zero(fan_out);
    layer.activation = l + 2 == widths.size() ? Activation::identity : hidden;
    layers.push_back(std::move(layer));
  }
  return layers;
}

Eigen::VectorXd forward(const LayerStack& layers, const Eigen::VectorXd& input) {
  Eigen::VectorXd h = input;
  for (const DenseLayer& layer : layers) {
    if (h.size() != layer.inputs()) throw ContractError("layer input width mismatch");
    Eigen::VectorXd next = layer.weights.transpose() * h + layer.bias;
    if (layer.activation == Activation::tanh) next = next.array().tanh().matrix();
    h = std::move(next);
  }
  return h;
}

RowMatrix forward_batch(const LayerStack& layers, const RowMatrix& inputs) {
  RowMatrix h = inputs;
  for (const DenseLayer& layer : layers) {
    if (h.cols() != layer.inputs()) throw ContractError("layer input width mismatch");
    RowMatrix next = h * layer.weights;
    next.rowwise() += layer.bias.transpose();
    if (layer.activation == Activation::tanh) next = next.array().tanh().matrix();
    h = std::move(next);
  }
  return h;
}

std::vector<Tensor> to_tensors(const LayerStack& layers) {
  std::vector<Tensor> out;
  for (const DenseLayer& layer : layers) {
    out.push_back(Tensor::from_matrix(layer.weights));
    out.push_back(Tensor::row(layer.bias));
  }
  return out;
}

void assign_from_tensors(LayerStack& layers, const std::vector<Tensor>& params) {
  if (params.size() != 2 * layers.size()) throw ContractError("parameter count does not match the layer stack");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Tensor& w = params[2 * l];
    const Tensor& b = params[2 * l + 1];
    if (w.rows() != layers[l].inputs() || w.cols() != layers[l].outputs() || b.cols() != layers[l].outputs()) {
      throw ContractError("parameter shape does not match layer " + std::to_string(l));
    }
    layers[l].weights = w.matrix();
    layers[l].bias = b.flat();
  }
}

Var forward_on_tape(diffcore::Tape& tape, const LayerStack& layers, std::span<const Var> params, Var input) {
  if (params.size() != 2 * layers.size()) throw ContractError("parameter count does not match the layer stack");
  Var h = input;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    h = tape.add(tape.matmul(h, params[2 * l]), params[2 * l + 1]);
    if (layers[l].activation == Activation::tanh) h = tape.tanh(h);
  }
  return h;
}

nlohmann::json layers_to_json(const LayerStack& layers) {
  nlohmann::json arr = nlohmann::json::array();
  for (const DenseLayer& layer : layers) {
    nlohmann::json w = nlohmann::json::array();
    for (Eigen::Index i = 0; i < layer.weights.size(); ++i) w.push_back(layer.weights.data()[i]);
    arr.push_back({{"rows", layer.inputs()},
                   {"cols", layer.outputs()},
                   {"weights", std::move(w)},
                   {"bias", json_io::to_json(layer.bias)},
                   {"activation", activation_name(layer.activation)}});
  }
  return arr;
}

LayerStack layers_from_json(const nlohmann::json& array) {
  if (!array.is_array()) throw ConfigurationError("checkpoint layers must be an array");
  LayerStack layers;
  for (const auto& entry : array) {
    DenseLayer layer;
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    const Eigen::VectorXd w = json_io::vector_from_json(entry.at("weights"));
    if (rows < 1 || cols < 1 || w.size() != rows * cols) throw ConfigurationError("checkpoint layer shape mismatch");
    layer.weights = Eigen::Map<const RowMatrix>(w.data(), rows, cols);
    layer.bias = json_io::vector_from_json(entry.at("bias"));
    if (layer.bias.size() != cols) throw ConfigurationError("checkpoint bias length mismatch");
    layer.activation = activation_from_name(entry.at("activation").get<std::string>());
    if (!layers.empty() && layers.back().outputs() != rows) throw ConfigurationError("checkpoint layers do not chain");
    layers.push_back(std::move(layer));
  }
  return layers;
}

}  // namespace hloba::latent
