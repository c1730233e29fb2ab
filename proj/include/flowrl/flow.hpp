#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <vector>

namespace flowrl {

using Vector = Eigen::VectorXd;

// One supervised pair for flow matching: endpoint x0 of the data
// distribution, endpoint x1 of the latent distribution, and the time at which
// the pair is interpolated.
struct FlowSample {
  Vector x0;
  Vector x1;
  double t = 0.0;
};

inline void check_unit_interval(double t, const char* where) {
  if (!(t >= 0.0 && t <= 1.0))
    throw std::invalid_argument(std::string(where) + ": t must lie in [0,1]");
}

// Linear interpolation path: x_t = (1 - t) * x0 + t * x1.
inline Vector interpolate(const Vector& x0, const Vector& x1, double t) {
  check_unit_interval(t, "interpolate");
  if (x0.size() != x1.size())
    throw std::invalid_argument("interpolate: dimension mismatch");
  return (1.0 - t) * x0 + t * x1;
}

// Regression target for the velocity field along the linear path.
inline Vector target_velocity(const Vector& x0, const Vector& x1) {
  if (x0.size() != x1.size())
    throw std::invalid_argument("target_velocity: dimension mismatch");
  return x1 - x0;
}

// Mean squared error between the field and the interpolation targets.
template <typename Field>
double fm_loss(const Field& field, const std::vector<FlowSample>& batch) {
  if (batch.empty()) throw std::invalid_argument("fm_loss: empty batch");
  double total = 0.0;
  for (const FlowSample& s : batch) {
    const Vector xt = interpolate(s.x0, s.x1, s.t);
    const Vector v = field(xt, s.t);
    total += (target_velocity(s.x0, s.x1) - v).squaredNorm();
  }
  return total / static_cast<double>(batch.size());
}

// Single extrapolation step to t = 0: the field's estimate of the clean
// endpoint from state z at time t. At t = 0 the state is already the
// estimate.
template <typename Field>
Vector one_step_decode(const Field& field, const Vector& z, double t) {
  check_unit_interval(t, "one_step_decode");
  if (t == 0.0) return z;
  return z - t * field(z, t);
}

// Deterministic probability-flow integration from t = 1 to t = 0 with uniform
// Euler steps of size -1/steps.
template <typename Field>
Vector euler_sample(const Field& field, const Vector& x1, int steps) {
  if (steps <= 0) throw std::invalid_argument("euler_sample: steps must be positive");
  Vector x = x1;
  const double dt = -1.0 / static_cast<double>(steps);
  for (int k = 0; k < steps; ++k) {
    const double t = 1.0 + static_cast<double>(k) * dt;
    x += dt * field(x, t);
  }
  return x;
}

// Exact field for a point-mass data distribution at x0: v(x, t) = (x - x0)/t.
// Euler integration of this field reaches x0 exactly in any number of steps.
struct DiracField {
  Vector x0;

  Vector operator()(const Vector& x, double t) const {
    if (t <= 0.0)
      throw std::invalid_argument("DiracField: t must be positive");
    return (x - x0) / t;
  }
};

// Exact marginal field when the data distribution is N(b, s^2 I) and the
// latent is N(0, I). With D(t) = (1-t)^2 s^2 + t^2,
//   v(x, t) = ((t - (1-t) s^2) / D(t)) * (x - (1-t) b) - b.
struct AffineGaussianField {
  Vector b;
  double s = 1.0;

  Vector operator()(const Vector& x, double t) const {
    const double d = (1.0 - t) * (1.0 - t) * s * s + t * t;
    if (d <= 0.0)
      throw std::invalid_argument("AffineGaussianField: degenerate marginal");
    const double coef = (t - (1.0 - t) * s * s) / d;
    return coef * (x - (1.0 - t) * b) - b;
  }
};

}  // namespace flowrl
