#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "flowrl/errors.hpp"
#include "flowrl/flow.hpp"
#include "flowrl/rng.hpp"

namespace flowrl {

// Weighted isotropic Gaussian component, used both for synthetic task
// distributions and for density-based rewards.
struct MixtureComponent {
  double weight = 1.0;
  Vector mean;
  double std = 1.0;
};

// A reward is a pure deterministic map from a point to a score, together with
// a finite upper bound on the scores it can emit (useful for sanity checks
// and for plotting a ceiling).
struct Reward {
  std::string name;
  double upper_bound = 0.0;
  std::function<double(const Vector&)> fn;

  double operator()(const Vector& x) const { return fn(x); }
};

// Negative squared distance to a target point; maximum 0 at the target.
inline Reward make_neg_sq_dist(Vector target) {
  Reward r;
  r.name = "neg_sq_dist";
  r.upper_bound = 0.0;
  r.fn = [target = std::move(target)](const Vector& x) {
    if (x.size() != target.size())
      throw std::invalid_argument("neg_sq_dist: dimension mismatch");
    return -(x - target).squaredNorm();
  };
  return r;
}

// Log density of a Gaussian mixture, evaluated with log-sum-exp. Weights are
// normalized internally, so only their ratios matter. The upper bound is
// log(sum_k w_k (2 pi std_k^2)^(-d/2)): each component's density is maximal
// at its own mean, so the sum of those maxima bounds the mixture density.
inline Reward make_mixture_logdensity(std::vector<MixtureComponent> comps) {
  if (comps.empty())
    throw std::invalid_argument("mixture_logdensity: need at least one component");
  double wsum = 0.0;
  const Eigen::Index d = comps.front().mean.size();
  for (const auto& c : comps) {
    if (c.weight <= 0.0)
      throw std::invalid_argument("mixture_logdensity: weights must be positive");
    if (c.std <= 0.0)
      throw std::invalid_argument("mixture_logdensity: stds must be positive");
    if (c.mean.size() != d)
      throw std::invalid_argument("mixture_logdensity: component dims differ");
    wsum += c.weight;
  }
  for (auto& c : comps) c.weight /= wsum;

  double peak_density = 0.0;
  for (const auto& c : comps)
    peak_density += c.weight * std::pow(2.0 * std::numbers::pi * c.std * c.std,
                                        -0.5 * static_cast<double>(d));
  Reward r;
  r.name = "mixture_logdensity";
  r.upper_bound = std::log(peak_density);
  r.fn = [comps = std::move(comps)](const Vector& x) {
    if (x.size() != comps.front().mean.size())
      throw std::invalid_argument("mixture_logdensity: dimension mismatch");
    const double d = static_cast<double>(x.size());
    double max_term = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(comps.size());
    for (std::size_t k = 0; k < comps.size(); ++k) {
      const auto& c = comps[k];
      const double q = (x - c.mean).squaredNorm() / (c.std * c.std);
      terms[k] = std::log(c.weight) -
                 0.5 * d * std::log(2.0 * std::numbers::pi * c.std * c.std) -
                 0.5 * q;
      if (terms[k] > max_term) max_term = terms[k];
    }
    double acc = 0.0;
    for (const double term : terms) acc += std::exp(term - max_term);
    return max_term + std::log(acc);
  };
  return r;
}

// Negative squared ring residual: -((|x - center| - radius) / width)^2, with
// maximum 0 anywhere on the ring.
inline Reward make_ring(Vector center, double radius, double width) {
  if (radius <= 0.0) throw std::invalid_argument("ring: radius must be positive");
  if (width <= 0.0) throw std::invalid_argument("ring: width must be positive");
  Reward r;
  r.name = "ring";
  r.upper_bound = 0.0;
  r.fn = [center = std::move(center), radius, width](const Vector& x) {
    if (x.size() != center.size())
      throw std::invalid_argument("ring: dimension mismatch");
    const double resid = ((x - center).norm() - radius) / width;
    return -resid * resid;
  };
  return r;
}

// Parameter bundle a config supplies when instantiating a reward by name.
struct RewardParams {
  Vector target;                          // neg_sq_dist
  std::vector<MixtureComponent> components;  // mixture_logdensity
  Vector center;                          // ring
  double radius = 1.0;                    // ring
  double width = 1.0;                     // ring
};

inline const std::vector<std::string>& reward_names() {
  static const std::vector<std::string> names = {"neg_sq_dist",
                                                 "mixture_logdensity", "ring"};
  return names;
}

inline Reward registry_lookup(const std::string& name, const RewardParams& p) {
  if (name == "neg_sq_dist") {
    if (p.target.size() == 0)
      throw ConfigError("neg_sq_dist: reward.target is required");
    return make_neg_sq_dist(p.target);
  }
  if (name == "mixture_logdensity") {
    if (p.components.empty())
      throw ConfigError("mixture_logdensity: reward.components is required");
    return make_mixture_logdensity(p.components);
  }
  if (name == "ring") {
    if (p.center.size() == 0)
      throw ConfigError("ring: reward.center is required");
    return make_ring(p.center, p.radius, p.width);
  }
  std::string msg = "unknown reward '" + name + "'; available:";
  for (const auto& n : reward_names()) msg += " " + n;
  throw ConfigError(msg);
}

// Draw one point from a Gaussian mixture. Consumes exactly one uniform (for
// the component index) plus dim normals, regardless of which component wins,
// so paired runs stay aligned.
inline Vector sample_mixture(const std::vector<MixtureComponent>& comps,
                             Rng& rng) {
  if (comps.empty())
    throw std::invalid_argument("sample_mixture: empty mixture");
  double wsum = 0.0;
  for (const auto& c : comps) wsum += c.weight;
  const double u = rng.uniform() * wsum;
  std::size_t pick = comps.size() - 1;
  double acc = 0.0;
  for (std::size_t k = 0; k < comps.size(); ++k) {
    acc += comps[k].weight;
    if (u <= acc) {
      pick = k;
      break;
    }
  }
  const auto& c = comps[pick];
  Vector x(c.mean.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = rng.normal();
  return c.mean + c.std * x;
}

}  // namespace flowrl
