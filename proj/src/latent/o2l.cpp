#include "hloba/latent/o2l.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hloba/diffcore/optimizers.hpp"
#include "hloba/error.hpp"
#include "hloba/json_io.hpp"

namespace hloba::latent {

using diffcore::RowMatrix;
using diffcore::Tape;
using diffcore::Tensor;
using diffcore::Var;

void O2LModel::validate() const {
  if (n_x < 1 || n_z < 1) throw ConfigurationError("O2L dimensions must be positive");
  if (mean.size() != n_x || scale.size() != n_x) throw ConfigurationError("O2L normalization length mismatch");
  if (layers.empty() || layers.front().inputs() != 2 * n_x || layers.back().outputs() != n_z) {
    throw ConfigurationError("O2L layers must map 2 n_x inputs to n_z outputs");
  }
}

Eigen::VectorXd loss_weight_map(const Eigen::VectorXd& mask, int width) {
  if (width < 1) throw ConfigurationError("smoothing width must be positive");
  const Eigen::Index n = mask.size();
  Eigen::VectorXd smooth(n);
  const int half = width / 2;
  for (Eigen::Index i = 0; i < n; ++i) {
    double s = 0.0;
    for (int k = -half; k < width - half; ++k) s += mask[((i + k) % n + n) % n];
    smooth[i] = s / width;
  }
  const double lo = smooth.minCoeff(), hi = smooth.maxCoeff();
  if (hi == lo) return Eigen::VectorXd::Constant(n, 0.5);
  return (0.5 + 0.5 * (smooth.array() - lo) / (hi - lo)).matrix();
}

Eigen::VectorXd pool_to_latent(const Eigen::VectorXd& grid_field, int n_z) {
  const Eigen::Index n = grid_field.size();
  if (n_z < 1 || n_z > n) throw ConfigurationError("cannot pool onto that many latent dimensions");
  Eigen::VectorXd out(n_z);
  for (int j = 0; j < n_z; ++j) {
    const Eigen::Index begin = j * n / n_z, end = (j + 1) * n / n_z;
    out[j] = grid_field.segment(begin, end - begin).mean();
  }
  return out;
}

Eigen::VectorXd o2l_input(const O2LModel& model, const Eigen::VectorXd& dense_values, const Eigen::VectorXd& mask) {
  if (dense_values.size() != model.n_x || mask.size() != model.n_x) throw ContractError("O2L input length mismatch");
  Eigen::VectorXd in(2 * model.n_x);
  for (int i = 0; i < model.n_x; ++i) {
    in[i] = mask[i] > 0.0 ? (dense_values[i] - model.mean[i]) / model.scale[i] : 0.0;
    in[model.n_x + i] = mask[i];
  }
  return in;
}

namespace {

struct Sample {
  Eigen::VectorXd input;
  Eigen::VectorXd weight;
};

/// One training draw: random quality mask, point dropout, and mask-scaled noise.
Sample draw_sample(const O2LModel& model, const StateVector& x, const ObservationNetwork& network,
                   const O2LOptions& options, Rng& rng) {
  std::uniform_real_distribution<double> quality(options.mask_min, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd values = Eigen::VectorXd::Zero(model.n_x);
  Eigen::VectorXd mask = Eigen::VectorXd::Zero(model.n_x);
  for (std::size_t k = 0; k < network.size(); ++k) {
    const int i = network.observed_indices[k];
    const double m = quality(rng);
    const double e = normal(rng);
    if (unit(rng) < options.drop_fraction) continue;
    mask[i] = m;
    values[i] = x[i] + network.noise_std[k] / m * e;
  }
  return {o2l_input(model, values, mask), pool_to_latent(loss_weight_map(mask, options.weight_smoothing_width), model.n_z)};
}

}  // namespace

double o2l_batch_loss(const LayerStack& layers, const std::vector<Tensor>& params, const RowMatrix& inputs,
                      const RowMatrix& targets, const RowMatrix& weights, std::vector<Tensor>* grads) {
  if (inputs.rows() != targets.rows() || targets.rows() != weights.rows() || targets.cols() != weights.cols() ||
      inputs.rows() == 0) {
    throw ContractError("o2l_batch_loss: batch shapes disagree");
  }
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : params) leaves.push_back(tape.leaf(t, grads != nullptr));
  Var out = forward_on_tape(tape, layers, leaves, tape.constant(Tensor::from_matrix(inputs)));
  Var diff = tape.mul(diffcore::sub(out, tape.constant(Tensor::from_matrix(targets))),
                      tape.constant(Tensor::from_matrix(weights)));
  Var loss = tape.scale(tape.sum_squares(diff), 1.0 / static_cast<double>(targets.rows() * targets.cols()));
  if (grads != nullptr) {
    tape.backward(loss);
    grads->clear();
    for (Var v : leaves) grads->push_back(tape.grad(v));
  }
  return loss.value().item();
}

std::pair<O2LModel, TrainingReport> train_o2l(const AutoencoderModel& ae, const std::vector<StateVector>& states,
                                              const ObservationNetwork& network, const TrainingSchedule& schedule,
                                              std::uint64_t seed, const O2LOptions& options) {
  ae.validate();
  network.validate();
  if (network.n_x != ae.n_x) throw ConfigurationError("observation grid does not match the autoencoder");
  if (schedule.epochs < 0 || schedule.batch_size < 1) throw ConfigurationError("invalid training schedule");
  if (!(options.mask_min > 0.0 && options.mask_min <= 1.0)) throw ConfigurationError("mask_min must lie in (0, 1]");
  if (!(options.drop_fraction >= 0.0 && options.drop_fraction < 1.0)) {
    throw ConfigurationError("drop_fraction must lie in [0, 1)");
  }
  const std::size_t n_val =
      static_cast<std::size_t>(std::floor(schedule.validation_fraction * static_cast<double>(states.size())));
  const std::size_t n_train = states.size() - n_val;
  if (n_train < 2) throw DegenerateData("too few O2L training states");

  O2LModel model;
  model.n_x = ae.n_x;
  model.n_z = ae.n_z;
  model.mean = ae.mean;
  model.scale = ae.scale;
  model.ae_fingerprint = ae.fingerprint();
  Rng init_rng(seed);
  std::vector<int> widths{2 * ae.n_x};
  widths.insert(widths.end(), options.hidden_widths.begin(), options.hidden_widths.end());
  widths.push_back(ae.n_z);
  model.layers = init_layers(widths, schedule.hidden_activation, init_rng);

  std::vector<LatentVector> targets;
  targets.reserve(states.size());
  for (const StateVector& x : states) targets.push_back(ae.encode(x));

  // Fixed draws for the initial-loss and validation measurements.
  auto measure = [&](std::size_t begin, std::size_t end, std::uint64_t stream) {
    if (begin == end) return 0.0;
    Rng eval_rng(seed ^ stream);
    double total = 0.0;
    for (std::size_t s = begin; s < end; ++s) {
      const Sample smp = draw_sample(model, states[s], network, options, eval_rng);
      total += (forward(model.layers, smp.input) - targets[s]).squaredNorm();
    }
    return total / static_cast<double>((end - begin) * static_cast<std::size_t>(model.n_z));
  };

  TrainingReport report;
  report.initial_loss = measure(0, n_train, 0x51ed270b);
  std::vector<Tensor> params = to_tensors(model.layers);
  diffcore::OptimizerState opt = diffcore::OptimizerState::make_adam({schedule.learning_rate});
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batches_per_epoch = static_cast<long>((n_train + schedule.batch_size - 1) / schedule.batch_size);
  const long total_steps = batches_per_epoch * schedule.epochs;

  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n_train; start += static_cast<std::size_t>(schedule.batch_size)) {
      const std::size_t end = std::min(n_train, start + static_cast<std::size_t>(schedule.batch_size));
      const auto rows = static_cast<Eigen::Index>(end - start);
      RowMatrix inputs(rows, 2 * model.n_x), target(rows, model.n_z), weight(rows, model.n_z);
      for (std::size_t r = start; r < end; ++r) {
        const auto row = static_cast<Eigen::Index>(r - start);
        const Sample smp = draw_sample(model, states[order[r]], network, options, rng);
        inputs.row(row) = smp.input.transpose();
        target.row(row) = targets[order[r]].transpose();
        weight.row(row) = smp.weight.transpose();
      }
      std::vector<Tensor> grads;
      const double loss = o2l_batch_loss(model.layers, params, inputs, target, weight, &grads);
      opt.adam.learning_rate =
          diffcore::warmup_cosine_rate(schedule.learning_rate, report.steps, total_steps, schedule.warmup_fraction);
      diffcore::adam_step(params, grads, opt);
      ++report.steps;
      epoch_loss += loss * static_cast<double>(rows);
    }
    epoch_loss /= static_cast<double>(n_train);
    // The weighted loss is at most the unweighted one, so the comparison is conservative.
    if (!std::isfinite(epoch_loss) || epoch_loss > 10.0 * report.initial_loss) {
      throw TrainingDiverged("O2L loss " + std::to_string(epoch_loss) + " at epoch " + std::to_string(epoch) +
                             " exceeds ten times the initial " + std::to_string(report.initial_loss));
    }
    report.final_loss = epoch_loss;
  }
  assign_from_tensors(model.layers, params);
  report.validation_mse = n_val > 0 ? measure(n_train, states.size(), 0x7f4a7c15) : measure(0, n_train, 0x7f4a7c15);
  return {std::move(model), report};
}

LatentVector o2l_forward(const O2LModel& model, const ObservationSet& obs) {
  if (obs.network.n_x != model.n_x) throw ContractError("observation grid does not match the O2L model");
  obs.check_consistency();
  return forward(model.layers, o2l_input(model, obs.dense_values(), obs.mask));
}

nlohmann::json to_json(const O2LModel& model) {
  return {{"variant", "o2l"},
          {"n_x", model.n_x},
          {"n_z", model.n_z},
          {"normalization", {{"mean", json_io::to_json(model.mean)}, {"scale", json_io::to_json(model.scale)}}},
          {"ae_fingerprint", model.ae_fingerprint},
          {"layers", layers_to_json(model.layers)}};
}

O2LModel o2l_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("variant").get<std::string>() != "o2l") throw ConfigurationError("not an O2L checkpoint");
    O2LModel m;
    m.n_x = doc.at("n_x").get<int>();
    m.n_z = doc.at("n_z").get<int>();
    m.mean = json_io::vector_from_json(doc.at("normalization").at("mean"));
    m.scale = json_io::vector_from_json(doc.at("normalization").at("scale"));
    m.ae_fingerprint = doc.at("ae_fingerprint").get<std::string>();
    m.layers = layers_from_json(doc.at("layers"));
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError(std::string("malformed O2L checkpoint: ") + e.what());
  }
}

}  // namespace hloba::latent
