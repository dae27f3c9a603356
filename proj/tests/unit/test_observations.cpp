#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "hloba/error.hpp"
#include "hloba/observations.hpp"

using namespace hloba;

namespace {

const Eigen::VectorXd kUnitStd = Eigen::VectorXd::Ones(40);

StateVector ramp(int n) {
  StateVector x(n);
  for (int i = 0; i < n; ++i) x[i] = 0.5 * i - 3.0;
  return x;
}

}  // namespace

TEST_CASE("network construction") {
  const auto net = ObservationNetwork::every_kth(40, 3, 0, kUnitStd, 0.03);
  CHECK(net.size() == 14);
  CHECK(net.observed_indices.front() == 0);
  CHECK(net.observed_indices.back() == 39);
  CHECK(net.noise_std[5] == doctest::Approx(0.03));
  CHECK_THROWS_AS(ObservationNetwork::from_indices(40, {3, 40}, kUnitStd, 0.03), ConfigurationError);
  CHECK(ObservationNetwork::from_indices(40, {5, 1, 5}, kUnitStd, 0.1).observed_indices == std::vector<int>{1, 5});
}

TEST_CASE("apply_H: full network, empty network, linearity") {
  const StateVector x = ramp(40);
  const StateVector y = ramp(40).reverse();
  const auto full = ObservationNetwork::every_kth(40, 1, 0, kUnitStd, 0.03);
  CHECK(observations::apply_H(x, full) == x);
  const auto empty = ObservationNetwork::from_indices(40, {}, kUnitStd, 0.03);
  CHECK(observations::apply_H(x, empty).size() == 0);
  const auto net = ObservationNetwork::every_kth(40, 3, 1, kUnitStd, 0.03);
  const Eigen::VectorXd lhs = observations::apply_H(2.5 * x - 1.5 * y, net);
  const Eigen::VectorXd rhs = 2.5 * observations::apply_H(x, net) - 1.5 * observations::apply_H(y, net);
  CHECK((lhs - rhs).norm() <= 1e-14);
  CHECK_THROWS_AS(observations::apply_H(ramp(39), net), ConfigurationError);
}

TEST_CASE("synthesize: zero noise is exact, mask is one on the network only") {
  const auto net = ObservationNetwork::every_kth(40, 3, 0, kUnitStd, 0.0);
  Rng rng(1);
  const ObservationSet obs = observations::synthesize(ramp(40), net, rng, 7);
  CHECK(obs.values == observations::apply_H(ramp(40), net));
  CHECK(obs.mask.sum() == 14.0);
  CHECK(obs.cycle_time == 7);
  CHECK_NOTHROW(obs.check_consistency());
}

TEST_CASE("synthesize: Monte-Carlo standard deviation matches the requested level") {
  Eigen::VectorXd clim(40);
  for (int i = 0; i < 40; ++i) clim[i] = 1.0 + 0.1 * i;
  const double c = 0.03;
  const auto net = ObservationNetwork::every_kth(40, 3, 0, clim, c);
  const StateVector truth = ramp(40);
  const Eigen::VectorXd h = observations::apply_H(truth, net);
  Rng rng(99);
  const int draws = 10000;
  Eigen::VectorXd sum_sq = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(net.size()));
  for (int d = 0; d < draws; ++d) {
    const Eigen::VectorXd dep = observations::synthesize(truth, net, rng).values - h;
    sum_sq += dep.cwiseAbs2();
  }
  for (std::size_t k = 0; k < net.size(); ++k) {
    const double sample_std = std::sqrt(sum_sq[static_cast<Eigen::Index>(k)] / draws);
    CHECK(std::abs(sample_std / (c * clim[net.observed_indices[k]]) - 1.0) <= 0.03);
  }
}

TEST_CASE("qc_filter: pass-through, zero threshold, constructed outlier") {
  const auto net = ObservationNetwork::every_kth(40, 3, 0, kUnitStd, 0.03);
  Rng rng(3);
  const StateVector truth = ramp(40);
  const ObservationSet obs = observations::synthesize(truth, net, rng);

  const ObservationSet kept = observations::qc_filter(obs, truth, Eigen::VectorXd::Constant(40, 1.0));
  CHECK(kept.values == obs.values);
  CHECK(kept.mask == obs.mask);

  const ObservationSet none = observations::qc_filter(obs, truth, Eigen::VectorXd::Zero(40));
  CHECK(none.active_count() == 0);
  CHECK(none.values.isZero(0.0));

  ObservationSet bad = obs;
  bad.values[4] += 10.0;
  const ObservationSet filtered = observations::qc_filter(bad, truth, Eigen::VectorXd::Constant(40, 1.0));
  CHECK(filtered.active_count() == 13);
  CHECK(filtered.mask[net.observed_indices[4]] == 0.0);
  CHECK(filtered.values[4] == 0.0);
  for (std::size_t k = 0; k < net.size(); ++k) {
    if (k != 4) CHECK(filtered.values[static_cast<Eigen::Index>(k)] == bad.values[static_cast<Eigen::Index>(k)]);
  }
  CHECK_NOTHROW(filtered.check_consistency());
}

TEST_CASE("split_withheld: rounding and partition") {
  const auto net = ObservationNetwork::every_kth(40, 3, 0, kUnitStd, 0.03);
  Rng rng(5);
  ObservationSet obs = observations::synthesize(ramp(40), net, rng);
  obs = observations::qc_filter(obs, ramp(40), [&] {
    Eigen::VectorXd t = Eigen::VectorXd::Constant(40, 1.0);
    t[net.observed_indices[2]] = 0.0;  // 13 active points remain
    return t;
  }());
  REQUIRE(obs.active_count() == 13);

  auto [a0, w0] = observations::split_withheld(obs, 0.0, rng);
  CHECK(w0.active_count() == 0);
  CHECK(a0.active_count() == 13);

  auto [a, w] = observations::split_withheld(obs, 0.1, rng);
  CHECK(w.active_count() == 1);
  CHECK(a.active_count() == 12);
  for (std::size_t k = 0; k < net.size(); ++k) {
    CHECK(!(a.active(k) && w.active(k)));
    CHECK((a.active(k) || w.active(k)) == obs.active(k));
  }
  CHECK_NOTHROW(a.check_consistency());
  CHECK_NOTHROW(w.check_consistency());

  Rng r1(42), r2(42);
  CHECK(observations::split_withheld(obs, 0.3, r1).second.mask == observations::split_withheld(obs, 0.3, r2).second.mask);
  CHECK_THROWS_AS(observations::split_withheld(obs, 1.0, rng), ContractError);
}

TEST_CASE("mask/value consistency is enforced") {
  const auto net = ObservationNetwork::every_kth(40, 3, 0, kUnitStd, 0.03);
  Rng rng(8);
  ObservationSet obs = observations::synthesize(ramp(40), net, rng);
  obs.mask[net.observed_indices[0]] = 0.0;
  CHECK_THROWS_AS(obs.check_consistency(), ContractError);
  obs.values[0] = 0.0;
  CHECK_NOTHROW(obs.check_consistency());
  obs.mask[1] = 0.5;  // index 1 is off the network
  CHECK_THROWS_AS(obs.check_consistency(), ContractError);
}

TEST_CASE("CSV round trip is value-exact") {
  Eigen::VectorXd clim = Eigen::VectorXd::Constant(40, 3.7);
  const auto net = ObservationNetwork::every_kth(40, 3, 2, clim, 0.1);
  Rng rng(17);
  std::stringstream ss;
  observations::write_csv_header(ss);
  std::vector<std::pair<ObservationSet, ObservationSet>> written;
  for (long t = 0; t < 3; ++t) {
    auto [a, w] = observations::split_withheld(observations::synthesize(ramp(40), net, rng, t), 0.25, rng);
    observations::write_csv_rows(ss, a, w);
    written.emplace_back(a, w);
  }
  const auto back = observations::read_csv(ss, net);
  REQUIRE(back.size() == 3);
  for (long t = 0; t < 3; ++t) {
    CHECK(back.at(t).first.values == written[static_cast<std::size_t>(t)].first.values);
    CHECK(back.at(t).second.values == written[static_cast<std::size_t>(t)].second.values);
    CHECK(back.at(t).second.mask == written[static_cast<std::size_t>(t)].second.mask);
  }
  std::stringstream bad("time,index\n");
  CHECK_THROWS_AS(observations::read_csv(bad, net), ContractError);
}
