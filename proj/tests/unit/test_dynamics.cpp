#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "hloba/dynamics.hpp"
#include "hloba/error.hpp"

using namespace hloba;

namespace {

ModelConfig config_with(int n_x, double forcing, double dt = 0.05) {
  ModelConfig c;
  c.n_x = n_x;
  c.forcing = forcing;
  c.dt = dt;
  return c;
}

StateVector random_state(int n, unsigned seed, double scale = 3.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  StateVector x(n);
  for (int i = 0; i < n; ++i) x[i] = 2.0 + normal(rng);
  return x;
}

// Straight-line RK4 over std::vector, written independently of the library.
std::vector<double> naive_rk4(const std::vector<double>& x, double forcing, double dt) {
  const int n = static_cast<int>(x.size());
  auto f = [&](const std::vector<double>& s) {
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) {
      const double xp1 = s[(i + 1) % n];
      const double xm1 = s[(i - 1 + n) % n];
      const double xm2 = s[(i - 2 + n) % n];
      out[i] = (xp1 - xm2) * xm1 - s[i] + forcing;
    }
    return out;
  };
  auto axpy = [&](const std::vector<double>& a, double c, const std::vector<double>& b) {
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) out[i] = a[i] + c * b[i];
    return out;
  };
  const auto k1 = f(x);
  const auto k2 = f(axpy(x, dt / 2, k1));
  const auto k3 = f(axpy(x, dt / 2, k2));
  const auto k4 = f(axpy(x, dt, k3));
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) out[i] = x[i] + dt / 6 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
  return out;
}

}  // namespace

TEST_CASE("tendency: forcing-only and uniform states") {
  const ModelConfig c = config_with(4, 8.0);
  CHECK(dynamics::tendency(StateVector::Zero(4), c).isApprox(StateVector::Constant(4, 8.0)));
  CHECK(dynamics::tendency(StateVector::Ones(4), c).isApprox(StateVector::Constant(4, 7.0)));
}

TEST_CASE("tendency: hand-evaluated right-hand side for n_x=5") {
  const ModelConfig c = config_with(5, 8.0);
  StateVector x(5);
  x << 1, 2, 3, 4, 5;
  // i=0: (x1-x3)x4 - x0 + 8 = (2-4)5 - 1 + 8, and so on around the ring.
  StateVector expected(5);
  expected << -3, 4, 11, 13, -5;
  const StateVector got = dynamics::tendency(x, c);
  for (int i = 0; i < 5; ++i) CHECK(got[i] == doctest::Approx(expected[i]).epsilon(1e-15));
}

TEST_CASE("tendency: dimension mismatch is a configuration error") {
  CHECK_THROWS_AS(dynamics::tendency(StateVector::Zero(6), config_with(5, 8.0)), ConfigurationError);
}

TEST_CASE("model config invariants") {
  CHECK_THROWS_AS(config_with(3, 8.0).validate(), ConfigurationError);
  CHECK_THROWS_AS(config_with(40, 8.0, 0.0).validate(), ConfigurationError);
  ModelConfig c;
  c.steps_per_da_interval = 0;
  CHECK_THROWS_AS(c.validate(), ConfigurationError);
  CHECK_NOTHROW(ModelConfig{}.validate());
}

TEST_CASE("rk4_step: fixed point, independent oracle, consistency order") {
  const ModelConfig zero_forcing = config_with(40, 0.0);
  CHECK(dynamics::rk4_step(StateVector::Zero(40), zero_forcing).isZero(0.0));

  const ModelConfig c = config_with(40, 8.0);
  const StateVector x = random_state(40, 7);
  const StateVector got = dynamics::rk4_step(x, c);
  const std::vector<double> ref = naive_rk4(std::vector<double>(x.data(), x.data() + 40), 8.0, 0.05);
  for (int i = 0; i < 40; ++i) CHECK(std::abs(got[i] - ref[i]) <= 1e-12 * std::max(1.0, std::abs(ref[i])));

  // One RK4 step departs from forward Euler by O(dt^2).
  double previous = 0.0;
  for (double dt : {1e-2, 5e-3, 2.5e-3}) {
    const ModelConfig cd = config_with(40, 8.0, dt);
    const double diff = (dynamics::rk4_step(x, cd) - (x + dt * dynamics::tendency(x, cd))).norm();
    if (previous > 0.0) CHECK(previous / diff == doctest::Approx(4.0).epsilon(0.05));
    previous = diff;
  }
}

TEST_CASE("rk4: global error on the linear F=0 system scales as dt^4") {
  // A uniform state with F=0 has vanishing advection, so x' = -x exactly.
  const double horizon = 1.0;
  std::vector<double> errors;
  for (double dt : {0.1, 0.05, 0.025}) {
    const ModelConfig c = config_with(40, 0.0, dt);
    const auto steps = static_cast<std::size_t>(std::lround(horizon / dt));
    const StateVector end = dynamics::forecast_state(StateVector::Constant(40, 2.0), steps, c);
    errors.push_back(std::abs(end[0] - 2.0 * std::exp(-horizon)));
  }
  CHECK(errors[0] / errors[1] == doctest::Approx(16.0).epsilon(0.05));
  CHECK(errors[1] / errors[2] == doctest::Approx(16.0).epsilon(0.05));
}

TEST_CASE("forecast: identity, semigroup, composition, determinism") {
  const ModelConfig c = config_with(40, 8.0);
  const StateVector x = random_state(40, 11);

  const Trajectory t0 = dynamics::forecast(x, 0, c);
  REQUIRE(t0.size() == 1);
  CHECK(t0.front() == x);

  const StateVector ab = dynamics::forecast(x, 17, c).back();
  const StateVector a_then_b = dynamics::forecast(dynamics::forecast(x, 9, c).back(), 8, c).back();
  CHECK((ab - a_then_b).norm() == 0.0);

  StateVector stepped = x;
  for (int i = 0; i < 12; ++i) stepped = dynamics::rk4_step(stepped, c);
  CHECK(stepped == dynamics::forecast(x, 12, c).back());
  CHECK(dynamics::forecast_state(x, 12, c) == stepped);

  const Trajectory r1 = dynamics::forecast(x, 50, c);
  const Trajectory r2 = dynamics::forecast(x, 50, c);
  for (std::size_t i = 0; i < r1.size(); ++i) CHECK(r1.states[i] == r2.states[i]);
}

TEST_CASE("forecast: nearby states separate under chaotic dynamics") {
  const ModelConfig c = config_with(40, 8.0);
  const StateVector x = dynamics::forecast_state(random_state(40, 3), 1000, c);
  StateVector y = x;
  y[0] += 1e-8;
  const double initial = (x - y).norm();
  const double final = (dynamics::forecast_state(x, 200, c) - dynamics::forecast_state(y, 200, c)).norm();
  CHECK(final > 100.0 * initial);
}

TEST_CASE("integration blowup is reported with the offending step") {
  ModelConfig c = config_with(40, 8.0, 0.5);
  const StateVector x = random_state(40, 5, 10.0);
  try {
    dynamics::forecast(x, 1000, c);
    FAIL("expected IntegrationBlowup");
  } catch (const IntegrationBlowup& e) {
    CHECK(e.step() >= 1);
  }
  StateVector bad = x;
  bad[3] = std::nan("");
  CHECK_THROWS_AS(dynamics::rk4_step(bad, c), IntegrationBlowup);
}

TEST_CASE("forecast_gradient: identity, linear oracle, finite differences") {
  const ModelConfig c = config_with(40, 8.0);
  const StateVector x = dynamics::forecast_state(random_state(40, 21), 500, c);
  const StateVector w = random_state(40, 22, 1.0);

  CHECK(dynamics::forecast_gradient(x, 0, w, c) == w);

  // F=0 at the origin: the linearisation is x' = -x, so each RK4 step multiplies by R(-dt).
  const ModelConfig linear = config_with(40, 0.0);
  const double z = -linear.dt;
  const double amplification = 1 + z + z * z / 2 + z * z * z / 6 + z * z * z * z / 24;
  const StateVector lin = dynamics::forecast_gradient(StateVector::Zero(40), 6, w, linear);
  CHECK((lin - std::pow(amplification, 6) * w).norm() <= 1e-14 * w.norm());

  for (std::size_t n : {1u, 5u, 10u, 20u}) {
    const StateVector g = dynamics::forecast_gradient(x, n, w, c);
    StateVector fd(40);
    const double h = 1e-5;
    for (int i = 0; i < 40; ++i) {
      StateVector up = x, down = x;
      up[i] += h;
      down[i] -= h;
      fd[i] = (w.dot(dynamics::forecast_state(up, n, c)) - w.dot(dynamics::forecast_state(down, n, c))) / (2 * h);
    }
    INFO("n_steps = " << n);
    CHECK((g - fd).norm() / fd.norm() <= 1e-5);
  }
}

TEST_CASE("forecast_gradient: reverse storage cap") {
  ModelConfig c = config_with(40, 8.0);
  c.max_reverse_steps = 8;
  const StateVector x = random_state(40, 1);
  CHECK_NOTHROW(dynamics::forecast_gradient(x, 8, x, c));
  CHECK_THROWS_AS(dynamics::forecast_gradient(x, 9, x, c), ResourceError);
}
