#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <vector>

#include "flowrl/rewards.hpp"
#include "flowrl/rng.hpp"

using namespace flowrl;

namespace {

Vector vec(std::initializer_list<double> vals) {
  Vector v(static_cast<Eigen::Index>(vals.size()));
  Eigen::Index i = 0;
  for (const double x : vals) v[i++] = x;
  return v;
}

Vector random_vec(Rng& rng, int dim, double scale = 1.0) {
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v[i] = scale * rng.normal();
  return v;
}

}  // namespace

TEST_CASE("negative squared distance peaks at the target") {
  const Reward r = make_neg_sq_dist(vec({1.0, 2.0}));
  REQUIRE(r(vec({1.0, 2.0})) == 0.0);
  REQUIRE(r(vec({3.0, 2.0})) == -4.0);
  REQUIRE(r(vec({0.0, 0.0})) == -5.0);
  REQUIRE(r.upper_bound == 0.0);
  REQUIRE_THROWS_AS(r(vec({1.0})), std::invalid_argument);
}

TEST_CASE("single gaussian log density matches the closed form at its mean") {
  const Reward r = make_mixture_logdensity({{1.0, vec({0.0}), 1.0}});
  const double expected = -0.5 * std::log(2.0 * std::numbers::pi);
  REQUIRE(r(vec({0.0})) == Catch::Approx(expected).epsilon(1e-12));
  REQUIRE(r(vec({0.0})) == Catch::Approx(-0.9189385332046727).epsilon(1e-12));
  // One standard deviation out costs exactly 1/2 nat.
  REQUIRE(r(vec({1.0})) == Catch::Approx(expected - 0.5).epsilon(1e-12));
  REQUIRE(r.upper_bound == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("mixture log density is symmetric across equal modes") {
  const Reward r = make_mixture_logdensity(
      {{0.5, vec({-2.0, 0.0}), 0.7}, {0.5, vec({2.0, 0.0}), 0.7}});
  REQUIRE(r(vec({-2.0, 0.0})) == Catch::Approx(r(vec({2.0, 0.0}))).epsilon(1e-14));
  REQUIRE(r(vec({-2.0, 0.0})) > r(vec({0.0, 0.0})));
  REQUIRE(r(vec({-2.0, 0.0})) > r(vec({-2.0, 3.5})));
}

TEST_CASE("mixture weights only matter up to scale") {
  const auto a = make_mixture_logdensity(
      {{1.0, vec({0.0}), 1.0}, {1.0, vec({4.0}), 0.5}});
  const auto b = make_mixture_logdensity(
      {{2.0, vec({0.0}), 1.0}, {2.0, vec({4.0}), 0.5}});
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const Vector x = random_vec(rng, 1, 3.0);
    REQUIRE(a(x) == b(x));
  }
}

TEST_CASE("mixture log density stays finite far from all modes") {
  const Reward r = make_mixture_logdensity(
      {{0.5, vec({0.0}), 1.0}, {0.5, vec({1.0}), 2.0}});
  const double far = r(vec({1e4}));
  REQUIRE(std::isfinite(far));
  REQUIRE(far < -1e6);
}

TEST_CASE("mixture construction validates its components") {
  REQUIRE_THROWS_AS(make_mixture_logdensity({}), std::invalid_argument);
  REQUIRE_THROWS_AS(make_mixture_logdensity({{0.0, vec({0.0}), 1.0}}),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(make_mixture_logdensity({{1.0, vec({0.0}), 0.0}}),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(
      make_mixture_logdensity({{1.0, vec({0.0}), 1.0}, {1.0, vec({0.0, 1.0}), 1.0}}),
      std::invalid_argument);
}

TEST_CASE("ring reward vanishes on the ring and is rotation invariant") {
  const Vector center = vec({1.0, -1.0});
  const Reward r = make_ring(center, 2.0, 0.5);
  REQUIRE(r(center + vec({2.0, 0.0})) == 0.0);
  REQUIRE(r(center) == Catch::Approx(-16.0).epsilon(1e-12));

  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    const Vector x = random_vec(rng, 2, 2.0);
    const double theta = 2.0 * std::numbers::pi * rng.uniform();
    Eigen::Matrix2d rot;
    rot << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
    const Vector rotated = center + rot * x;
    REQUIRE(std::abs(r(center + x) - r(rotated)) < 1e-9);
  }
  REQUIRE_THROWS_AS(make_ring(center, 0.0, 1.0), std::invalid_argument);
  REQUIRE_THROWS_AS(make_ring(center, 1.0, -1.0), std::invalid_argument);
}

TEST_CASE("registry constructs every named reward and rejects unknown names") {
  RewardParams p;
  p.target = vec({0.0, 0.0});
  p.components = {{1.0, vec({0.0, 0.0}), 1.0}};
  p.center = vec({0.0, 0.0});
  p.radius = 1.5;
  p.width = 0.3;
  for (const auto& name : reward_names()) {
    const Reward r = registry_lookup(name, p);
    REQUIRE(r.name == name);
    REQUIRE(std::isfinite(r(vec({0.3, -0.2}))));
    REQUIRE(std::isfinite(r.upper_bound));
  }
  try {
    registry_lookup("bogus", p);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const auto& name : reward_names())
      REQUIRE(msg.find(name) != std::string::npos);
  }
  REQUIRE_THROWS_AS(registry_lookup("neg_sq_dist", RewardParams{}), ConfigError);
}

TEST_CASE("rewards are pure: repeated evaluation is bit-identical") {
  RewardParams p;
  p.target = vec({0.5, -0.5});
  p.components = {{0.3, vec({1.0, 0.0}), 0.8}, {0.7, vec({-1.0, 0.0}), 1.2}};
  p.center = vec({0.0, 0.0});
  Rng rng(31);
  for (const auto& name : reward_names()) {
    const Reward r = registry_lookup(name, p);
    const Vector x = random_vec(rng, 2, 2.0);
    const double first = r(x);
    for (int i = 0; i < 1000; ++i) REQUIRE(r(x) == first);
  }
}

TEST_CASE("random probes never exceed the documented upper bound") {
  RewardParams p;
  p.target = vec({0.5, -0.5});
  p.components = {{0.6, vec({2.0, 1.5}), 0.25}, {0.4, vec({0.0, 0.0}), 3.0}};
  p.center = vec({1.0, 1.0});
  p.radius = 2.0;
  p.width = 0.5;
  Rng rng(47);
  for (const auto& name : reward_names()) {
    const Reward r = registry_lookup(name, p);
    for (int i = 0; i < 1000; ++i) {
      const Vector x = random_vec(rng, 2, 4.0);
      REQUIRE(r(x) <= r.upper_bound + 1e-12);
    }
  }
}

TEST_CASE("mixture sampling reproduces component statistics") {
  const std::vector<MixtureComponent> comps = {{0.3, vec({-5.0}), 0.1},
                                               {0.7, vec({5.0}), 0.1}};
  Rng rng(61);
  int left = 0;
  const int n = 20000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vector x = sample_mixture(comps, rng);
    if (x[0] < 0.0) ++left;
    sum += x[0];
  }
  REQUIRE(std::abs(static_cast<double>(left) / n - 0.3) < 0.02);
  REQUIRE(std::abs(sum / n - (0.3 * -5.0 + 0.7 * 5.0)) < 0.1);
}

TEST_CASE("mixture sampling consumes a fixed number of draws per sample") {
  const std::vector<MixtureComponent> comps = {{0.5, vec({0.0, 0.0}), 1.0},
                                               {0.5, vec({9.0, 9.0}), 1.0}};
  Rng a(7), b(7);
  sample_mixture(comps, a);
  // One uniform for the component, two normals (four uniforms) for dim 2.
  for (int i = 0; i < 5; ++i) b.next_u64();
  REQUIRE(a.next_u64() == b.next_u64());
}
