#include <doctest.h>

#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>

#include "hloba/covariance.hpp"
#include "hloba/error.hpp"
#include "hloba/json_io.hpp"

using namespace hloba;
using namespace hloba::covariance;

namespace {

std::vector<StateVector> climatology(std::size_t n, unsigned seed = 1) {
  ModelConfig c;
  Rng rng(seed);
  std::normal_distribution<double> normal;
  StateVector x(40);
  for (int i = 0; i < 40; ++i) x[i] = 8.0 + normal(rng);
  x = dynamics::forecast_state(x, 1000, c);
  std::vector<StateVector> out;
  for (std::size_t k = 0; k < n; ++k) {
    x = dynamics::forecast_state(x, 2, c);
    out.push_back(x);
  }
  return out;
}

const std::vector<StateVector>& archive() {
  static const std::vector<StateVector> states = climatology(3000);
  return states;
}

const latent::AutoencoderModel& linear_ae() {
  static const latent::AutoencoderModel ae = latent::fit_linear_ae(archive(), 12);
  return ae;
}

const latent::O2LModel& small_o2l() {
  static const latent::O2LModel o2l = [] {
    latent::TrainingSchedule s;
    s.epochs = 3;
    s.learning_rate = 1e-3;
    const auto net = ObservationNetwork::every_kth(40, 3, 0, linear_ae().scale, 0.03);
    return latent::train_o2l(linear_ae(), archive(), net, s, 5).first;
  }();
  return o2l;
}

Eigen::VectorXd random_vector(Eigen::Index n, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

double rel_err(const Eigen::VectorXd& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    num += (a[static_cast<Eigen::Index>(i)] - b[i]) * (a[static_cast<Eigen::Index>(i)] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("nmc_latent_b: zero differences, constant differences, sample size") {
  const auto& ae = linear_ae();
  std::vector<ForecastPair> same;
  for (int k = 0; k < 20; ++k) same.emplace_back(archive()[k], archive()[k]);
  CHECK(nmc_latent_b(ae, same).variances.isZero(0.0));
  const Eigen::VectorXd floor_var = Eigen::VectorXd::Constant(12, 1e-8);
  CHECK(nmc_latent_b(ae, same, floor_var).variances == floor_var);

  const StateVector d = Eigen::VectorXd::LinSpaced(40, -1.0, 2.0);
  std::vector<ForecastPair> shifted;
  for (int k = 0; k < 20; ++k) shifted.emplace_back(archive()[k], archive()[k] + d);
  const LatentVector dz = ae.encode(archive()[0] + d) - ae.encode(archive()[0]);
  CHECK((nmc_latent_b(ae, shifted).variances - 0.5 * dz.cwiseAbs2()).norm() <= 1e-12 * dz.squaredNorm());

  CHECK_THROWS_AS(nmc_latent_b(ae, std::vector<ForecastPair>(same.begin(), same.begin() + 9)), InsufficientSample);
}

TEST_CASE("nmc_latent_b: matches a two-pass oracle on 500 forecast pairs") {
  const auto& ae = linear_ae();
  ModelConfig c;
  std::vector<ForecastPair> pairs;
  for (int k = 0; k < 500; ++k) {
    const StateVector& start = archive()[static_cast<std::size_t>(k)];
    StateVector perturbed = start;
    perturbed[k % 40] += 0.1;
    const StateVector long_lead = dynamics::forecast_state(perturbed, 16, c);
    const StateVector short_lead = dynamics::forecast_state(dynamics::forecast_state(start, 8, c), 8, c);
    pairs.emplace_back(short_lead, long_lead);
  }
  std::vector<std::vector<double>> diffs;
  for (const auto& [a, b] : pairs) {
    const LatentVector da = ae.encode(a), db = ae.encode(b);
    diffs.emplace_back();
    for (int j = 0; j < 12; ++j) diffs.back().push_back(db[j] - da[j]);
  }
  std::vector<double> oracle(12, 0.0);
  for (int j = 0; j < 12; ++j) {
    long double acc = 0.0L;
    for (const auto& d : diffs) acc += static_cast<long double>(d[static_cast<std::size_t>(j)]) * d[static_cast<std::size_t>(j)];
    oracle[static_cast<std::size_t>(j)] = static_cast<double>(0.5L * acc / diffs.size());
  }
  CHECK(rel_err(nmc_latent_b(ae, pairs).variances, oracle) <= 1e-10);
}

TEST_CASE("ensemble_cov_diag: identical, two-member, random oracle") {
  Rng rng(3);
  const LatentVector z = random_vector(12, rng);
  CHECK(ensemble_cov_diag({z, z, z}).variances.maxCoeff() <= 1e-30);
  const LatentVector d = random_vector(12, rng);
  CHECK((ensemble_cov_diag({z, z + d}).variances - 0.5 * d.cwiseAbs2()).norm() <= 1e-14);
  CHECK_THROWS_AS(ensemble_cov_diag({z}), ContractError);

  for (int trial = 0; trial < 20; ++trial) {
    std::vector<LatentVector> members;
    for (int m = 0; m < 9; ++m) members.push_back(random_vector(12, rng, 2.0) + Eigen::VectorXd::Constant(12, 5.0));
    std::vector<double> oracle(12);
    for (int j = 0; j < 12; ++j) {
      double mean = 0.0;
      for (const auto& m : members) mean += m[j];
      mean /= 9.0;
      double ss = 0.0;
      for (const auto& m : members) ss += (m[j] - mean) * (m[j] - mean);
      oracle[static_cast<std::size_t>(j)] = ss / 8.0;
    }
    CHECK(rel_err(ensemble_cov_diag(members).variances, oracle) <= 1e-12);
  }
}

TEST_CASE("clim_latent_r: naive oracle with the same noise stream, and archive size") {
  const auto& ae = linear_ae();
  const auto& o2l = small_o2l();
  const auto net = ObservationNetwork::every_kth(40, 3, 0, ae.scale, 0.03);
  const std::vector<StateVector> arch(archive().begin(), archive().begin() + 600);
  Rng r1(10), r2(10);
  const DiagonalCovariance got = clim_latent_r(o2l, ae, arch, net, r1);
  std::vector<double> oracle(12, 0.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const StateVector& x : arch) {
    ObservationSet obs;
    obs.network = net;
    obs.values = observations::apply_H(x, net);
    obs.mask = Eigen::VectorXd::Zero(40);
    for (std::size_t k = 0; k < net.size(); ++k) {
      obs.values[static_cast<Eigen::Index>(k)] += net.noise_std[k] * normal(r2);
      obs.mask[net.observed_indices[k]] = 1.0;
    }
    const LatentVector e = latent::o2l_forward(o2l, obs) - ae.encode(x);
    for (int j = 0; j < 12; ++j) oracle[static_cast<std::size_t>(j)] += 0.5 * e[j] * e[j] / 600.0;
  }
  CHECK(rel_err(got.variances, oracle) <= 1e-12);
  CHECK_THROWS_AS(clim_latent_r(o2l, ae, std::vector<StateVector>(arch.begin(), arch.begin() + 499), net, r1),
                  InsufficientSample);
}

TEST_CASE("clim_latent_r: perfect observation-to-latent map gives zero") {
  const auto& ae = linear_ae();
  // A linear O2L equal to the encoder applied to a fully observed, noise-free image.
  latent::O2LModel exact;
  exact.n_x = 40;
  exact.n_z = 12;
  exact.mean = ae.mean;
  exact.scale = ae.scale;
  latent::DenseLayer layer;
  layer.weights = diffcore::RowMatrix::Zero(80, 12);
  layer.weights.topRows(40) = ae.encoder.front().weights;
  layer.bias = Eigen::VectorXd::Zero(12);
  exact.layers = {layer};
  const auto net = ObservationNetwork::every_kth(40, 1, 0, ae.scale, 0.0);
  Rng rng(1);
  const std::vector<StateVector> arch(archive().begin(), archive().begin() + 500);
  CHECK(clim_latent_r(exact, ae, arch, net, rng).variances.maxCoeff() <= 1e-24);
}

TEST_CASE("clim_latent_r: doubling the noise does not lower any dimension") {
  const auto& ae = linear_ae();
  const auto& o2l = small_o2l();
  const auto net1 = ObservationNetwork::every_kth(40, 3, 0, ae.scale, 0.03);
  const auto net2 = ObservationNetwork::every_kth(40, 3, 0, ae.scale, 0.06);
  Rng r1(21), r2(21);  // paired noise draws
  const DiagonalCovariance a = clim_latent_r(o2l, ae, archive(), net1, r1);
  const DiagonalCovariance b = clim_latent_r(o2l, ae, archive(), net2, r2);
  for (int j = 0; j < 12; ++j) CHECK(b.variances[j] >= a.variances[j]);
}

TEST_CASE("ensemble_latent_r: uncentered formula, centered flag, oracle") {
  const auto& ae = linear_ae();
  const auto& o2l = small_o2l();
  const auto net0 = ObservationNetwork::every_kth(40, 3, 0, ae.scale, 0.0);
  Eigen::VectorXd mask = Eigen::VectorXd::Zero(40);
  for (int i : net0.observed_indices) mask[i] = 1.0;

  EnsembleSet same;
  for (int m = 0; m < 3; ++m) same.members.push_back(archive()[7]);
  Rng rng(2);
  const DiagonalCovariance r = ensemble_latent_r(o2l, ae, same, net0, mask, rng);
  ObservationSet obs;
  obs.network = net0;
  obs.values = observations::apply_H(archive()[7], net0);
  obs.mask = mask;
  const LatentVector e = latent::o2l_forward(o2l, obs) - ae.encode(archive()[7]);
  CHECK((r.variances - e.cwiseAbs2() * 3.0 / 2.0).norm() <= 1e-12 * e.squaredNorm());
  CHECK(ensemble_latent_r(o2l, ae, same, net0, mask, rng, true).variances.norm() <= 1e-20);

  // Oracle for random members with noise, using the same draw order.
  const auto net = ObservationNetwork::every_kth(40, 3, 0, ae.scale, 0.03);
  EnsembleSet ens;
  for (int m = 0; m < 6; ++m) ens.members.push_back(archive()[static_cast<std::size_t>(100 + 37 * m)]);
  mask[net.observed_indices[2]] = 0.0;
  Rng r1(8), r2(8);
  const DiagonalCovariance got = ensemble_latent_r(o2l, ae, ens, net, mask, r1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> oracle(12, 0.0);
  for (const StateVector& x : ens.members) {
    ObservationSet o;
    o.network = net;
    o.values = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(net.size()));
    o.mask = mask;
    for (std::size_t k = 0; k < net.size(); ++k) {
      const double eps = normal(r2);
      if (mask[net.observed_indices[k]] > 0.0) o.values[static_cast<Eigen::Index>(k)] = x[net.observed_indices[k]] + net.noise_std[k] * eps;
    }
    const LatentVector d = latent::o2l_forward(o2l, o) - ae.encode(x);
    for (int j = 0; j < 12; ++j) oracle[static_cast<std::size_t>(j)] += d[j] * d[j] / 5.0;
  }
  CHECK(rel_err(got.variances, oracle) <= 1e-12);
  EnsembleSet one;
  one.members = {archive()[0]};
  CHECK_THROWS_AS(ensemble_latent_r(o2l, ae, one, net, mask, rng), ContractError);
}

TEST_CASE("hybrid_blend, inflate, floor") {
  const DiagonalCovariance clim{Eigen::VectorXd::Constant(1, 2.0)};
  const DiagonalCovariance ens{Eigen::VectorXd::Constant(1, 4.0)};
  CHECK(hybrid_blend(clim, ens, 0.0).variances == clim.variances);
  CHECK(hybrid_blend(clim, ens, 1.0).variances == ens.variances);
  CHECK(hybrid_blend(clim, ens, 0.5).variances[0] == 3.0);
  CHECK_THROWS_AS(hybrid_blend(clim, ens, 1.5), ContractError);
  double previous = 0.0;
  for (double w = 0.0; w <= 1.0; w += 0.1) {
    const double v = hybrid_blend(clim, ens, w).variances[0];
    CHECK(v >= previous);
    previous = v;
  }
  CHECK(inflate(ens, 1.0).variances == ens.variances);
  CHECK(inflate(ens, 2.0).variances[0] == 8.0);
  CHECK(floor(DiagonalCovariance{Eigen::VectorXd::Constant(1, 1e-30)}, 1e-8).variances[0] == 1e-8);
  CHECK_THROWS_AS(inflate(ens, 0.0), ContractError);
}

TEST_CASE("time-lagged ensemble") {
  ModelConfig c;
  const StateVector x0 = archive()[0];
  // A perfect archive: every analysis lies on one model trajectory.
  AnalysisArchive perfect;
  StateVector x = x0;
  for (long t = 0; t <= 10; ++t) {
    perfect[t] = x;
    x = dynamics::forecast_state(x, 2, c);
  }
  const EnsembleSet ens = assemble_time_lagged_ensemble(perfect, c, 10, 3);
  REQUIRE(ens.members.size() == 3);
  CHECK(ens.lead_times == std::vector<int>{1, 2, 3});
  for (const auto& m : ens.members) CHECK((m - perfect.at(10)).norm() <= 1e-9);
  std::vector<LatentVector> members(ens.members.begin(), ens.members.end());
  CHECK(ensemble_cov_diag(members).variances.maxCoeff() <= 1e-18);

  AnalysisArchive sparse{{8, x0}, {9, x0}};
  CHECK(assemble_time_lagged_ensemble(sparse, c, 10, 6).members.size() == 2);
  AnalysisArchive tiny{{9, x0}};
  CHECK_THROWS_AS(assemble_time_lagged_ensemble(tiny, c, 10, 3), SpinUpRequired);
}

TEST_CASE("Gaspari-Cohn taper") {
  CHECK(gaspari_cohn(0.0, 4.0) == 1.0);
  CHECK(gaspari_cohn(4.0, 4.0) == 0.0);
  CHECK(gaspari_cohn(7.0, 4.0) == 0.0);
  // The two polynomial pieces meet at half the support with value 5/24.
  CHECK(gaspari_cohn(2.0 - 1e-9, 4.0) == doctest::Approx(gaspari_cohn(2.0 + 1e-9, 4.0)).epsilon(1e-7));
  CHECK(gaspari_cohn(2.0, 4.0) == doctest::Approx(5.0 / 24.0).epsilon(1e-12));
  double previous = 1.0;
  for (double d = 0.0; d <= 5.0; d += 0.01) {
    const double g = gaspari_cohn(d, 4.0);
    CHECK(g >= 0.0);
    CHECK(g <= 1.0);
    CHECK(g <= previous + 1e-15);
    CHECK(g == gaspari_cohn(-d, 4.0));
    previous = g;
  }
  CHECK(cyclic_distance(0, 39, 40) == 1);
  CHECK(cyclic_distance(5, 25, 40) == 20);
}

TEST_CASE("model-space B: radius limits and PSD") {
  Rng rng(6);
  std::vector<StateVector> members;
  for (int m = 0; m < 30; ++m) members.push_back(archive()[static_cast<std::size_t>(50 * m)]);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(40);
  for (const auto& x : members) mean += x;
  mean /= 30.0;
  Eigen::MatrixXd raw = Eigen::MatrixXd::Zero(40, 40);
  for (const auto& x : members) raw += (x - mean) * (x - mean).transpose();
  raw /= 29.0;
  RidgeSettings none;
  none.relative_ridge = 0.0;

  const FullCovariance diag = model_space_b_ensemble(members, 0.0, none);
  CHECK((diag.matrix - Eigen::MatrixXd(raw.diagonal().asDiagonal())).norm() <= 1e-12 * raw.norm());
  const FullCovariance full = model_space_b_ensemble(members, std::numeric_limits<double>::infinity(), none);
  CHECK((full.matrix - raw).norm() <= 1e-10 * raw.norm());

  const FullCovariance loc = model_space_b_ensemble(members, 4.0);
  CHECK((loc.matrix - loc.matrix.transpose()).norm() <= 1e-12);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(loc.matrix);
  CHECK(eig.eigenvalues().minCoeff() > 0.0);
  CHECK(loc.matrix(0, 5) == 0.0);
  CHECK(loc.matrix(0, 39) != 0.0);

  std::vector<ForecastPair> pairs;
  for (int k = 0; k < 20; ++k) pairs.emplace_back(archive()[static_cast<std::size_t>(k)], archive()[static_cast<std::size_t>(k + 1)]);
  const FullCovariance nmc = model_space_b_nmc(pairs, 6.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig2(nmc.matrix);
  CHECK(eig2.eigenvalues().minCoeff() > 0.0);
}

TEST_CASE("decorrelation diagnostic: independent and perfectly correlated errors") {
  Rng rng(4);
  const int n = 400, dim = 12;
  // Null oracle: E|r| for independent Gaussian columns is close to sqrt(2 / (pi (n - 1))).
  double mean_report = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Eigen::VectorXd> samples;
    for (int s = 0; s < n; ++s) samples.push_back(random_vector(dim, rng));
    mean_report += latent_decorrelation_report(samples) / 20.0;
  }
  CHECK(mean_report == doctest::Approx(std::sqrt(2.0 / (M_PI * (n - 1)))).epsilon(0.05));

  std::vector<Eigen::VectorXd> correlated;
  for (int s = 0; s < 150; ++s) {
    const double a = random_vector(1, rng)[0];
    Eigen::VectorXd v(dim);
    for (int j = 0; j < dim; ++j) v[j] = (j % 2 == 0 ? 1.0 : -2.0) * a;
    correlated.push_back(v);
  }
  CHECK(latent_decorrelation_report(correlated) == doctest::Approx(1.0));
  CHECK_THROWS_AS(latent_decorrelation_report(std::vector<Eigen::VectorXd>(correlated.begin(), correlated.begin() + 50)),
                  InsufficientSample);
}

TEST_CASE("covariance JSON round trip") {
  Rng rng(9);
  const DiagonalCovariance d{random_vector(12, rng).cwiseAbs()};
  DiagonalCovariance d2;
  CHECK(covariance_from_json(nlohmann::json::parse(json_io::dump(to_json(d, "b_clim"))), &d2, nullptr) == "b_clim");
  CHECK(d2.variances == d.variances);

  std::vector<StateVector> members;
  for (int m = 0; m < 10; ++m) members.push_back(archive()[static_cast<std::size_t>(m * 13)]);
  const FullCovariance f = model_space_b_ensemble(members, 4.0);
  FullCovariance f2;
  CHECK(covariance_from_json(nlohmann::json::parse(json_io::dump(to_json(f, "b_model"))), nullptr, &f2) == "b_model");
  CHECK(f2.matrix == f.matrix);
  CHECK_THROWS_AS(covariance_from_json(to_json(f, "x"), &d2, nullptr), ConfigurationError);
}
