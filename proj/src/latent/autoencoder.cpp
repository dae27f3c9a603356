#include "hloba/latent/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "hloba/diffcore/optimizers.hpp"
#include "hloba/error.hpp"
#include "hloba/json_io.hpp"

namespace hloba::latent {

using diffcore::RowMatrix;
using diffcore::Tape;
using diffcore::Tensor;
using diffcore::Var;

namespace {

void fit_normalization(const std::vector<StateVector>& states, Eigen::VectorXd& mean, Eigen::VectorXd& scale) {
  if (states.empty()) throw DegenerateData("no training states");
  const Eigen::Index n = states.front().size();
  mean = Eigen::VectorXd::Zero(n);
  for (const StateVector& x : states) {
    if (x.size() != n) throw ContractError("training states have inconsistent lengths");
    mean += x;
  }
  mean /= static_cast<double>(states.size());
  Eigen::VectorXd var = Eigen::VectorXd::Zero(n);
  for (const StateVector& x : states) var += (x - mean).cwiseAbs2();
  var /= static_cast<double>(states.size());
  scale = var.cwiseSqrt();
  for (Eigen::Index i = 0; i < n; ++i)
    if (!(scale[i] > 1e-12)) scale[i] = 1.0;  // constant coordinate: leave units unchanged
}

RowMatrix normalized_rows(const std::vector<StateVector>& states, std::size_t begin, std::size_t end,
                          const Eigen::VectorXd& mean, const Eigen::VectorXd& scale) {
  RowMatrix u(static_cast<Eigen::Index>(end - begin), mean.size());
  for (std::size_t s = begin; s < end; ++s) {
    u.row(static_cast<Eigen::Index>(s - begin)) = ((states[s] - mean).array() / scale.array()).matrix().transpose();
  }
  return u;
}

struct Eigenpairs {
  Eigen::VectorXd values;   // descending
  Eigen::MatrixXd vectors;  // columns match values
};

Eigenpairs normalized_eigenpairs(const std::vector<StateVector>& states, const Eigen::VectorXd& mean,
                                 const Eigen::VectorXd& scale) {
  if (states.size() < 2) throw DegenerateData("need at least two states for a covariance");
  const RowMatrix u = normalized_rows(states, 0, states.size(), mean, scale);
  const Eigen::MatrixXd cov = (u.transpose() * u) / static_cast<double>(states.size() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw DegenerateData("eigendecomposition failed");
  Eigenpairs out;
  out.values = solver.eigenvalues().reverse();
  out.vectors = solver.eigenvectors().rowwise().reverse();
  // Deterministic sign: the largest-magnitude component of each direction is positive.
  for (Eigen::Index j = 0; j < out.vectors.cols(); ++j) {
    Eigen::Index arg = 0;
    out.vectors.col(j).cwiseAbs().maxCoeff(&arg);
    if (out.vectors(arg, j) < 0.0) out.vectors.col(j) *= -1.0;
  }
  return out;
}

std::vector<int> chain_widths(int first, const std::vector<int>& hidden, int last) {
  std::vector<int> widths{first};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(last);
  return widths;
}

double batch_mse(const AutoencoderModel& m, const RowMatrix& u) {
  if (u.rows() == 0) return 0.0;
  const RowMatrix r = forward_batch(m.decoder, forward_batch(m.encoder, u));
  return (r - u).squaredNorm() / static_cast<double>(u.size());
}

}  // namespace

LatentVector AutoencoderModel::encode(const StateVector& x) const {
  if (x.size() != n_x) throw ContractError("encode: state length " + std::to_string(x.size()) + " != " +
                                           std::to_string(n_x));
  return forward(encoder, ((x - mean).array() / scale.array()).matrix());
}

StateVector AutoencoderModel::decode(const LatentVector& z) const {
  if (z.size() != n_z) throw ContractError("decode: latent length " + std::to_string(z.size()) + " != " +
                                           std::to_string(n_z));
  return mean + (forward(decoder, z).array() * scale.array()).matrix();
}

LatentVector AutoencoderModel::decode_vjp(const LatentVector& z, const StateVector& cotangent) const {
  if (z.size() != n_z || cotangent.size() != n_x) throw ContractError("decode_vjp: shape mismatch");
  Tape tape;
  Var zin = tape.leaf(Tensor::row(z));
  std::vector<Var> params;
  for (Tensor& t : to_tensors(decoder)) params.push_back(tape.constant(std::move(t)));
  Var u = forward_on_tape(tape, decoder, params, zin);
  const std::pair<Var, Tensor> seed{u, Tensor::row((cotangent.array() * scale.array()).matrix())};
  tape.backward(std::span<const std::pair<Var, Tensor>>(&seed, 1));
  return tape.grad(zin).flat();
}

Eigen::MatrixXd AutoencoderModel::decode_jacobian(const LatentVector& z) const {
  Eigen::MatrixXd jac(n_x, n_z);
  for (int i = 0; i < n_x; ++i) jac.row(i) = decode_vjp(z, Eigen::VectorXd::Unit(n_x, i)).transpose();
  return jac;
}

std::string AutoencoderModel::fingerprint() const {
  const std::string text = json_io::dump(to_json(*this), -1);
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void AutoencoderModel::validate() const {
  if (n_x < 1 || n_z < 1 || n_z > n_x) throw ConfigurationError("autoencoder needs 1 <= n_z <= n_x");
  if (mean.size() != n_x || scale.size() != n_x) throw ConfigurationError("normalization length mismatch");
  if (!(scale.array() > 0.0).all()) throw ConfigurationError("normalization scale must be positive");
  if (encoder.empty() || decoder.empty()) throw ConfigurationError("autoencoder has no layers");
  if (encoder.front().inputs() != n_x || encoder.back().outputs() != n_z || decoder.front().inputs() != n_z ||
      decoder.back().outputs() != n_x) {
    throw ConfigurationError("autoencoder layer widths do not match n_x/n_z");
  }
}

Eigen::VectorXd normalized_spectrum(const std::vector<StateVector>& states) {
  Eigen::VectorXd mean, scale;
  fit_normalization(states, mean, scale);
  return normalized_eigenpairs(states, mean, scale).values;
}

AutoencoderModel fit_linear_ae(const std::vector<StateVector>& states, int n_z) {
  if (states.empty()) throw DegenerateData("no training states");
  const auto n_x = static_cast<int>(states.front().size());
  if (n_z < 1 || n_z > n_x) throw ConfigurationError("n_z must lie in [1, n_x]");
  if (states.size() < static_cast<std::size_t>(n_x)) {
    throw DegenerateData("PCA autoencoder needs at least n_x training states");
  }
  AutoencoderModel m;
  m.variant = AeVariant::linear;
  m.n_x = n_x;
  m.n_z = n_z;
  fit_normalization(states, m.mean, m.scale);
  const Eigenpairs eig = normalized_eigenpairs(states, m.mean, m.scale);
  if (!(eig.values[n_z - 1] > 1e-12 * std::max(eig.values[0], 1e-300))) {
    throw DegenerateData("training states span fewer than " + std::to_string(n_z) + " directions");
  }
  const Eigen::MatrixXd v = eig.vectors.leftCols(n_z);
  DenseLayer enc{v, Eigen::VectorXd::Zero(n_z), Activation::identity};
  DenseLayer dec{v.transpose(), Eigen::VectorXd::Zero(n_x), Activation::identity};
  m.encoder = {std::move(enc)};
  m.decoder = {std::move(dec)};
  return m;
}

AutoencoderModel init_mlp_ae(const std::vector<StateVector>& states, int n_z, const TrainingSchedule& schedule,
                             std::uint64_t seed) {
  if (states.empty()) throw DegenerateData("no training states");
  AutoencoderModel m;
  m.variant = AeVariant::mlp;
  m.n_x = static_cast<int>(states.front().size());
  m.n_z = n_z;
  if (n_z < 1 || n_z > m.n_x) throw ConfigurationError("n_z must lie in [1, n_x]");
  fit_normalization(states, m.mean, m.scale);
  Rng rng(seed);
  std::vector<int> reversed(schedule.hidden_widths.rbegin(), schedule.hidden_widths.rend());
  m.encoder = init_layers(chain_widths(m.n_x, schedule.hidden_widths, n_z), schedule.hidden_activation, rng);
  m.decoder = init_layers(chain_widths(n_z, reversed, m.n_x), schedule.hidden_activation, rng);
  return m;
}

std::pair<AutoencoderModel, TrainingReport> train_mlp_ae(const std::vector<StateVector>& states, int n_z,
                                                         const TrainingSchedule& schedule, std::uint64_t seed) {
  if (schedule.epochs < 0 || schedule.batch_size < 1) throw ConfigurationError("invalid training schedule");
  if (!(schedule.validation_fraction >= 0.0 && schedule.validation_fraction < 1.0)) {
    throw ConfigurationError("validation fraction must lie in [0, 1)");
  }
  const std::size_t n_val =
      static_cast<std::size_t>(std::floor(schedule.validation_fraction * static_cast<double>(states.size())));
  const std::size_t n_train = states.size() - n_val;
  if (n_train < 2) throw DegenerateData("too few training states");
  const std::vector<StateVector> train_states(states.begin(), states.begin() + static_cast<long>(n_train));

  AutoencoderModel model = init_mlp_ae(train_states, n_z, schedule, seed);
  const RowMatrix u_train = normalized_rows(states, 0, n_train, model.mean, model.scale);
  const RowMatrix u_val = normalized_rows(states, n_train, states.size(), model.mean, model.scale);

  std::vector<Tensor> params = to_tensors(model.encoder);
  const std::size_t n_enc = params.size();
  for (Tensor& t : to_tensors(model.decoder)) params.push_back(std::move(t));

  TrainingReport report;
  report.initial_loss = batch_mse(model, u_train);
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
      RowMatrix batch(static_cast<Eigen::Index>(end - start), model.n_x);
      for (std::size_t r = start; r < end; ++r) batch.row(static_cast<Eigen::Index>(r - start)) = u_train.row(static_cast<Eigen::Index>(order[r]));
      const double norm = 1.0 / static_cast<double>(batch.size());
      Tape tape;
      std::vector<Var> leaves;
      for (const Tensor& t : params) leaves.push_back(tape.leaf(t));
      Var input = tape.constant(Tensor::from_matrix(batch));
      Var z = forward_on_tape(tape, model.encoder, std::span<const Var>(leaves).first(n_enc), input);
      Var recon = forward_on_tape(tape, model.decoder, std::span<const Var>(leaves).subspan(n_enc), z);
      Var loss = tape.scale(tape.sum_squares(diffcore::sub(recon, input)), norm);
      tape.backward(loss);
      std::vector<Tensor> grads;
      for (Var v : leaves) grads.push_back(tape.grad(v));
      opt.adam.learning_rate =
          diffcore::warmup_cosine_rate(schedule.learning_rate, report.steps, total_steps, schedule.warmup_fraction);
      diffcore::adam_step(params, grads, opt);
      ++report.steps;
      epoch_loss += loss.value().item() * static_cast<double>(end - start);
    }
    epoch_loss /= static_cast<double>(n_train);
    if (!std::isfinite(epoch_loss) || epoch_loss > 10.0 * report.initial_loss) {
      throw TrainingDiverged("autoencoder loss " + std::to_string(epoch_loss) + " at epoch " + std::to_string(epoch) +
                             " exceeds ten times the initial " + std::to_string(report.initial_loss));
    }
  }
  assign_from_tensors(model.encoder, std::vector<Tensor>(params.begin(), params.begin() + static_cast<long>(n_enc)));
  assign_from_tensors(model.decoder, std::vector<Tensor>(params.begin() + static_cast<long>(n_enc), params.end()));
  report.final_loss = batch_mse(model, u_train);

  const bool have_val = u_val.rows() > 0;
  const RowMatrix& u_eval = have_val ? u_val : u_train;
  report.validation_mse = batch_mse(model, u_eval);
  AutoencoderModel pca = fit_linear_ae(train_states, n_z);
  report.linear_validation_mse = batch_mse(pca, u_eval);
  report.improved_on_linear = report.validation_mse <= report.linear_validation_mse;
  return {std::move(model), report};
}

double normalized_reconstruction_mse(const AutoencoderModel& model, const std::vector<StateVector>& states) {
  return batch_mse(model, normalized_rows(states, 0, states.size(), model.mean, model.scale));
}

nlohmann::json to_json(const AutoencoderModel& model) {
  nlohmann::json layers = layers_to_json(model.encoder);
  for (auto& l : layers_to_json(model.decoder)) layers.push_back(std::move(l));
  return {{"variant", model.variant == AeVariant::linear ? "linear" : "mlp"},
          {"n_x", model.n_x},
          {"n_z", model.n_z},
          {"normalization", {{"mean", json_io::to_json(model.mean)}, {"scale", json_io::to_json(model.scale)}}},
          {"encoder_layers", model.encoder.size()},
          {"layers", std::move(layers)}};
}

AutoencoderModel autoencoder_from_json(const nlohmann::json& doc) {
  try {
    AutoencoderModel m;
    const std::string variant = doc.at("variant").get<std::string>();
    if (variant == "linear") {
      m.variant = AeVariant::linear;
    } else if (variant == "mlp") {
      m.variant = AeVariant::mlp;
    } else {
      throw ConfigurationError("unknown autoencoder variant '" + variant + "'");
    }
    m.n_x = doc.at("n_x").get<int>();
    m.n_z = doc.at("n_z").get<int>();
    m.mean = json_io::vector_from_json(doc.at("normalization").at("mean"));
    m.scale = json_io::vector_from_json(doc.at("normalization").at("scale"));
    const LayerStack all = layers_from_json(doc.at("layers"));
    const auto n_enc = doc.at("encoder_layers").get<std::size_t>();
    if (n_enc < 1 || n_enc >= all.size()) throw ConfigurationError("encoder_layers out of range");
    m.encoder.assign(all.begin(), all.begin() + static_cast<long>(n_enc));
    m.decoder.assign(all.begin() + static_cast<long>(n_enc), all.end());
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError(std::string("malformed autoencoder checkpoint: ") + e.what());
  }
}

}  // namespace hloba::latent
