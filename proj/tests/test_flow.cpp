#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "flowrl/flow.hpp"
#include "flowrl/rng.hpp"

using namespace flowrl;

namespace {

Vector vec(std::initializer_list<double> vals) {
  Vector v(static_cast<Eigen::Index>(vals.size()));
  Eigen::Index i = 0;
  for (const double x : vals) v[i++] = x;
  return v;
}

Vector random_vec(Rng& rng, int dim) {
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.normal();
  return v;
}

}  // namespace

TEST_CASE("interpolate hits endpoints exactly and midpoint by hand") {
  const Vector x0 = vec({1.0, -2.0});
  const Vector x1 = vec({3.0, 4.0});
  REQUIRE(interpolate(x0, x1, 0.0) == x0);
  REQUIRE(interpolate(x0, x1, 1.0) == x1);
  const Vector mid = interpolate(x0, x1, 0.5);
  REQUIRE(mid[0] == 2.0);
  REQUIRE(mid[1] == 1.0);
}

TEST_CASE("interpolate validates inputs") {
  const Vector a = vec({0.0}), b2 = vec({0.0, 0.0});
  REQUIRE_THROWS_AS(interpolate(a, a, -0.1), std::invalid_argument);
  REQUIRE_THROWS_AS(interpolate(a, a, 1.1), std::invalid_argument);
  REQUIRE_THROWS_AS(interpolate(a, b2, 0.5), std::invalid_argument);
  REQUIRE_THROWS_AS(target_velocity(a, b2), std::invalid_argument);
}

TEST_CASE("target velocity is the endpoint difference") {
  const Vector x0 = vec({1.0, 2.0});
  const Vector x1 = vec({4.0, 0.0});
  const Vector v = target_velocity(x0, x1);
  REQUIRE(v[0] == 3.0);
  REQUIRE(v[1] == -2.0);
}

TEST_CASE("fm_loss is zero for the exact conditional target and d for unit error") {
  Rng rng(11);
  std::vector<FlowSample> batch;
  for (int i = 0; i < 8; ++i)
    batch.push_back({random_vec(rng, 3), random_vec(rng, 3), rng.uniform()});

  // A field that looks up the sample's own target by matching the state.
  const FlowSample& s0 = batch[0];
  std::vector<FlowSample> single = {s0};
  const auto exact = [&](const Vector&, double) {
    return target_velocity(s0.x0, s0.x1);
  };
  REQUIRE(fm_loss(exact, single) == 0.0);

  const auto off_by_one = [&](const Vector& x, double t) {
    Vector v = target_velocity(s0.x0, s0.x1);
    (void)x;
    (void)t;
    v.array() += 1.0;
    return v;
  };
  REQUIRE(fm_loss(off_by_one, single) == Catch::Approx(3.0).margin(1e-12));

  REQUIRE_THROWS_AS(fm_loss(exact, std::vector<FlowSample>{}),
                    std::invalid_argument);
}

TEST_CASE("one_step_decode returns the state unchanged at t = 0") {
  const Vector z = vec({5.0, -1.0});
  const auto field = [](const Vector& x, double) { return Vector(x); };
  REQUIRE(one_step_decode(field, z, 0.0) == z);
  REQUIRE_THROWS_AS(one_step_decode(field, z, 1.5), std::invalid_argument);
}

TEST_CASE("one_step_decode recovers the point mass under its exact field") {
  Rng rng(21);
  const Vector x0 = vec({0.7, -0.3, 2.0});
  const DiracField field{x0};
  for (int i = 0; i < 200; ++i) {
    const Vector z = random_vec(rng, 3);
    const double t = rng.uniform();
    const Vector decoded = one_step_decode(field, z, t);
    REQUIRE((decoded - x0).norm() < 1e-9);
  }
}

TEST_CASE("euler integration of the point-mass field lands on the point at any step count") {
  Rng rng(31);
  const Vector x0 = vec({1.0, 2.0});
  const DiracField field{x0};
  for (const int steps : {1, 2, 5, 10, 40}) {
    for (int rep = 0; rep < 50; ++rep) {
      const Vector x1 = random_vec(rng, 2);
      const Vector out = euler_sample(field, x1, steps);
      REQUIRE((out - x0).norm() < 1e-9);
    }
  }
  REQUIRE_THROWS_AS(euler_sample(field, x0, 0), std::invalid_argument);
  REQUIRE_THROWS_AS(field(x0, 0.0), std::invalid_argument);
}

TEST_CASE("gaussian marginal field transports the latent onto the data law") {
  // Data N(b, s^2 I): integrating the exact marginal field from latent
  // samples must reproduce the data mean and spread.
  const Vector b = vec({2.0, -1.0});
  const double s = 0.5;
  const AffineGaussianField field{b, s};
  Rng rng(41);
  const int n = 4000, steps = 200;
  Vector sum = Vector::Zero(2), sumsq = Vector::Zero(2);
  for (int i = 0; i < n; ++i) {
    const Vector x1 = random_vec(rng, 2);
    const Vector x = euler_sample(field, x1, steps);
    sum += x;
    sumsq += x.cwiseProduct(x);
  }
  const Vector mean = sum / n;
  for (int k = 0; k < 2; ++k) {
    const double var = sumsq[k] / n - mean[k] * mean[k];
    REQUIRE(std::abs(mean[k] - b[k]) < 0.05);
    REQUIRE(std::abs(std::sqrt(var) - s) < 0.05);
  }
}

TEST_CASE("gaussian marginal field is symmetric at the balanced midpoint") {
  // With unit data scale and b = 0 the field vanishes at t = 1/2.
  const AffineGaussianField field{Vector::Zero(2), 1.0};
  const Vector x = vec({3.0, -4.0});
  REQUIRE(field(x, 0.5).norm() == 0.0);
}
