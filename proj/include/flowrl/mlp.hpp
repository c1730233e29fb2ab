#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "flowrl/csv.hpp"
#include "flowrl/errors.hpp"
#include "flowrl/flow.hpp"
#include "flowrl/rng.hpp"

namespace flowrl {

// Fully connected tanh network mapping (x, t) -> velocity. Parameters live in
// one flat buffer (per layer: row-major weight matrix, then bias) so the
// optimizer, EMA tracking, and checkpoints all share a single layout.
class Mlp {
 public:
  using MatMap = Eigen::Map<
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                                     Eigen::Dynamic,
                                                     Eigen::RowMajor>>;
  using VecMap = Eigen::Map<Eigen::VectorXd>;
  using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

  Mlp(std::vector<int> dims, std::uint64_t seed)
      : dims_(std::move(dims)), seed_(seed) {
    if (dims_.size() < 2)
      throw std::invalid_argument("Mlp: need at least input and output dims");
    for (const int d : dims_)
      if (d <= 0) throw std::invalid_argument("Mlp: dims must be positive");
    std::size_t total = 0;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      offsets_.push_back(total);
      total += static_cast<std::size_t>(dims_[l] + 1) * dims_[l + 1];
    }
    params_.assign(total, 0.0);
    init_weights_();
  }

  [[nodiscard]] int input_dim() const { return dims_.front() - 1; }
  [[nodiscard]] int output_dim() const { return dims_.back(); }
  [[nodiscard]] const std::vector<int>& dims() const { return dims_; }
  [[nodiscard]] std::uint64_t seed() const { return seed_; }
  [[nodiscard]] std::size_t n_params() const { return params_.size(); }
  [[nodiscard]] std::vector<double>& params() { return params_; }
  [[nodiscard]] const std::vector<double>& params() const { return params_; }

  // Velocity field interface: append t to x and run the network.
  Vector operator()(const Vector& x, double t) const {
    return forward_(x, t, nullptr);
  }

  // Forward pass that retains per-layer inputs for a later vjp call.
  Vector forward_traced(const Vector& x, double t,
                        std::vector<Vector>& acts) const {
    return forward_(x, t, &acts);
  }

  // Accumulate d(loss)/d(params) into grad given d(loss)/d(output), using the
  // activations captured by forward_traced. grad must have n_params entries.
  void vjp(const std::vector<Vector>& acts, const Vector& output_cotangent,
           std::vector<double>& grad) const {
    if (grad.size() != params_.size())
      throw std::invalid_argument("Mlp::vjp: grad buffer size mismatch");
    const std::size_t layers = dims_.size() - 1;
    Vector delta = output_cotangent;
    for (std::size_t l = layers; l-- > 0;) {
      const int in = dims_[l];
      const int out = dims_[l + 1];
      ConstMatMap w(params_.data() + offsets_[l], out, in);
      MatMap gw(grad.data() + offsets_[l], out, in);
      VecMap gb(grad.data() + offsets_[l] +
                    static_cast<std::size_t>(in) * out,
                out);
      gw.noalias() += delta * acts[l].transpose();
      gb += delta;
      if (l > 0) {
        Vector back = w.transpose() * delta;
        delta = back.cwiseProduct(
            (1.0 - acts[l].array().square()).matrix());
      }
    }
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "MLP";
    for (const int d : dims_) out << ' ' << d;
    out << '\n';
    out << "seed " << seed_ << '\n';
    out << "params " << params_.size() << '\n';
    for (const double v : params_) out << format_double(v) << '\n';
  }

  static Mlp load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("checkpoint not found: " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("MLP", 0) != 0)
      throw std::runtime_error(path + ": not a checkpoint file");
    std::istringstream head(line.substr(3));
    std::vector<int> dims;
    int d = 0;
    while (head >> d) dims.push_back(d);
    std::string word;
    std::uint64_t seed = 0;
    if (!(in >> word >> seed) || word != "seed")
      throw std::runtime_error(path + ": missing seed line");
    std::size_t count = 0;
    if (!(in >> word >> count) || word != "params")
      throw std::runtime_error(path + ": missing params line");
    Mlp mlp(dims, seed);
    if (count != mlp.n_params())
      throw std::runtime_error(path + ": parameter count mismatch");
    for (std::size_t i = 0; i < count; ++i) {
      std::string tok;
      if (!(in >> tok))
        throw std::runtime_error(path + ": truncated parameter block");
      mlp.params_[i] = parse_double(tok);
    }
    return mlp;
  }

 private:
  Vector forward_(const Vector& x, double t, std::vector<Vector>* trace) const {
    if (x.size() != input_dim())
      throw std::invalid_argument("Mlp: input dimension mismatch");
    Vector a(dims_.front());
    a.head(x.size()) = x;
    a[a.size() - 1] = t;
    if (trace) {
      trace->clear();
      trace->push_back(a);
    }
    const std::size_t layers = dims_.size() - 1;
    for (std::size_t l = 0; l < layers; ++l) {
      const int in = dims_[l];
      const int out = dims_[l + 1];
      ConstMatMap w(params_.data() + offsets_[l], out, in);
      ConstVecMap b(params_.data() + offsets_[l] +
                        static_cast<std::size_t>(in) * out,
                    out);
      Vector z = w * a + b;
      if (l + 1 < layers) z = z.array().tanh().matrix();
      a = std::move(z);
      if (trace && l + 1 < layers) trace->push_back(a);
    }
    return a;
  }

  void init_weights_() {
    Rng rng = Rng(seed_).derive(stream::kInit);
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      const int in = dims_[l];
      const int out = dims_[l + 1];
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      MatMap w(params_.data() + offsets_[l], out, in);
      for (int r = 0; r < out; ++r)
        for (int c = 0; c < in; ++c)
          w(r, c) = (2.0 * rng.uniform() - 1.0) * bound;
      // biases stay zero
    }
  }

  std::vector<int> dims_;
  std::uint64_t seed_ = 0;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

// Flow-matching loss gradient for an Mlp field. Returns the loss and fills
// grad (resized to n_params) with d(loss)/d(params).
inline double fm_loss_grad(const Mlp& mlp, const std::vector<FlowSample>& batch,
                           std::vector<double>& grad) {
  if (batch.empty()) throw std::invalid_argument("fm_loss_grad: empty batch");
  grad.assign(mlp.n_params(), 0.0);
  double total = 0.0;
  std::vector<Vector> acts;
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const FlowSample& s : batch) {
    const Vector xt = interpolate(s.x0, s.x1, s.t);
    const Vector v = mlp.forward_traced(xt, s.t, acts);
    const Vector err = v - target_velocity(s.x0, s.x1);
    total += err.squaredNorm();
    mlp.vjp(acts, (2.0 * scale) * err, grad);
  }
  return total * scale;
}

// Adam with bias correction; state is tied to one parameter vector's size.
class Adam {
 public:
  Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grad) {
    if (params.size() != m_.size() || grad.size() != m_.size())
      throw std::invalid_argument("Adam::step: size mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<double> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace flowrl
