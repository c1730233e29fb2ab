#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowrl/csv.hpp"
#include "flowrl/flow.hpp"
#include "flowrl/rng.hpp"

namespace flowrl {

// Diagonal Gaussian over noise vectors, iteratively refit toward
// high-reward candidates.
struct NoiseDistribution {
  Vector mu;
  Vector sigma;

  static NoiseDistribution standard(Eigen::Index dim) {
    NoiseDistribution d;
    d.mu = Vector::Zero(dim);
    d.sigma = Vector::Ones(dim);
    return d;
  }
};

enum class ReturnMode { Mean, Sample };

struct CemConfig {
  int k = 25;                 // candidates per iteration
  int n = 5;                  // refinement iterations
  double p = 0.48;            // elite fraction
  double sigma_floor = 1e-3;  // lower clamp on refit stds
  ReturnMode return_mode = ReturnMode::Mean;
};

// Where in a stochastic rollout the search happens: the current state, the
// current time, the (negative) step size, and the step's noise scale.
struct PerturbationContext {
  Vector state;
  double t = 1.0;
  double dt = -0.1;
  double sigma_t = 1.0;
};

inline void check_context(const PerturbationContext& ctx) {
  if (!(ctx.dt < 0.0))
    throw std::invalid_argument("PerturbationContext: dt must be negative");
  if (!(ctx.t > 0.0 && ctx.t <= 1.0))
    throw std::invalid_argument("PerturbationContext: t must lie in (0,1]");
  if (ctx.t + ctx.dt < -1e-12)
    throw std::invalid_argument("PerturbationContext: step would pass t=0");
  if (!(ctx.sigma_t >= 0.0))
    throw std::invalid_argument("PerturbationContext: sigma_t must be >= 0");
}

// Per-iteration snapshot of a search, plus CSV dumps for offline inspection.
struct SearchTrace {
  struct Iteration {
    std::vector<double> rewards;     // one per candidate, -inf if non-finite
    std::vector<int> elite_indices;  // rank order (best first)
    Vector mu;
    Vector sigma;
    double best_reward = -std::numeric_limits<double>::infinity();
  };

  std::vector<Iteration> iterations;
  int flagged_candidates = 0;  // rewards replaced by -inf

  [[nodiscard]] double final_sigma_mean() const {
    if (iterations.empty()) return 0.0;
    return iterations.back().sigma.mean();
  }

  [[nodiscard]] double best_reward() const {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& it : iterations) best = std::max(best, it.best_reward);
    return best;
  }

  void write_candidates(const std::string& path) const {
    CsvWriter out(path, {"iter", "candidate_idx", "reward", "selected"});
    for (std::size_t i = 0; i < iterations.size(); ++i) {
      const auto& it = iterations[i];
      std::vector<char> selected(it.rewards.size(), 0);
      for (const int e : it.elite_indices) selected[static_cast<std::size_t>(e)] = 1;
      for (std::size_t c = 0; c < it.rewards.size(); ++c)
        out.row({format_int(static_cast<std::int64_t>(i)),
                 format_int(static_cast<std::int64_t>(c)),
                 format_double(it.rewards[c]),
                 format_int(selected[c])});
    }
  }

  void write_summary(const std::string& path) const {
    CsvWriter out(path, {"iter", "mu_norm", "sigma_norm", "best_reward"});
    for (std::size_t i = 0; i < iterations.size(); ++i) {
      const auto& it = iterations[i];
      out.row({format_int(static_cast<std::int64_t>(i)),
               format_double(it.mu.norm()), format_double(it.sigma.norm()),
               format_double(it.best_reward)});
    }
  }
};

// Thrown when every candidate in an iteration scored non-finite, leaving
// nothing to refit toward.
struct SearchFailure : std::runtime_error {
  explicit SearchFailure(const std::string& msg) : std::runtime_error(msg) {}
};

// K draws m_i = mu + sigma .* n_i with n_i ~ N(0, I). Consumes exactly
// K * dim normals in candidate-major order.
inline std::vector<Vector> sample_candidates(const NoiseDistribution& dist,
                                             int k, Rng& rng) {
  if (k <= 0) throw std::invalid_argument("sample_candidates: k must be positive");
  if (dist.mu.size() != dist.sigma.size())
    throw std::invalid_argument("sample_candidates: mu/sigma size mismatch");
  std::vector<Vector> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    Vector n(dist.mu.size());
    for (Eigen::Index j = 0; j < n.size(); ++j) n[j] = rng.normal();
    out.push_back(dist.mu + dist.sigma.cwiseProduct(n));
  }
  return out;
}

// Apply candidate noise to the rollout state: z = state + sqrt(-dt) * sigma_t * m.
inline Vector perturb(const PerturbationContext& ctx, const Vector& m) {
  check_context(ctx);
  if (m.size() != ctx.state.size())
    throw std::invalid_argument("perturb: dimension mismatch");
  return ctx.state + std::sqrt(-ctx.dt) * ctx.sigma_t * m;
}

// Score each candidate by decoding its perturbed state in one step at the
// post-step time t + dt. Non-finite rewards are replaced by -inf so ranking
// pushes them last; callers can count the replacements.
template <typename Field, typename RewardFn>
std::vector<double> evaluate_candidates(const PerturbationContext& ctx,
                                        const Field& field,
                                        const std::vector<Vector>& candidates,
                                        const RewardFn& reward,
                                        int* flagged = nullptr) {
  check_context(ctx);
  const double t_after = std::max(0.0, ctx.t + ctx.dt);
  std::vector<double> rewards;
  rewards.reserve(candidates.size());
  for (const Vector& m : candidates) {
    const Vector z = perturb(ctx, m);
    const Vector decoded = one_step_decode(field, z, t_after);
    double r = reward(decoded);
    if (!std::isfinite(r)) {
      r = -std::numeric_limits<double>::infinity();
      if (flagged) ++*flagged;
    }
    rewards.push_back(r);
  }
  return rewards;
}

// Number of elites for population size k and fraction p: floor(p * k). The
// small epsilon compensates for products like 0.48 * 25 landing just below an
// integer in floating point.
inline int elite_count(int k, double p) {
  if (k <= 0) throw std::invalid_argument("elite_count: k must be positive");
  if (!(p >= 0.0 && p <= 1.0))
    throw std::invalid_argument("elite_count: p must lie in [0,1]");
  const int t = static_cast<int>(std::floor(p * static_cast<double>(k) + 1e-9));
  if (t < 1)
    throw std::invalid_argument(
        "elite_count: floor(p*k) is 0; increase the elite fraction or the "
        "population size");
  return std::min(t, k);
}

// Indices of the top-T rewards, best first; ties resolve toward the lower
// index. -inf entries are excluded even if that leaves fewer than T elites.
inline std::vector<int> select_top(const std::vector<double>& rewards, double p) {
  const int k = static_cast<int>(rewards.size());
  const int t = elite_count(k, p);
  std::vector<int> order(rewards.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return rewards[static_cast<std::size_t>(a)] >
           rewards[static_cast<std::size_t>(b)];
  });
  std::vector<int> elites;
  for (int i = 0; i < t; ++i) {
    const int idx = order[static_cast<std::size_t>(i)];
    if (std::isinf(rewards[static_cast<std::size_t>(idx)]) &&
        rewards[static_cast<std::size_t>(idx)] < 0.0)
      break;  // sorted order: everything after is -inf too
    elites.push_back(idx);
  }
  return elites;
}

// Pull the candidates at the given indices, in ascending index order, so
// every selection path accumulates sums in the same order and produces
// bitwise-identical statistics.
inline std::vector<Vector> gather_elites(const std::vector<Vector>& candidates,
                                         std::vector<int> indices) {
  std::sort(indices.begin(), indices.end());
  std::vector<Vector> out;
  out.reserve(indices.size());
  for (const int i : indices) out.push_back(candidates[static_cast<std::size_t>(i)]);
  return out;
}

inline Vector elite_mean(const std::vector<Vector>& elites) {
  if (elites.empty())
    throw std::invalid_argument("elite_mean: empty elite set");
  Vector acc = Vector::Zero(elites.front().size());
  for (const Vector& e : elites) acc += e;
  return acc / static_cast<double>(elites.size());
}

// Refit the search distribution to the elites: mean of the elite set and the
// per-dimension population standard deviation (1/T normalization), clamped
// below by sigma_floor.
inline NoiseDistribution update_distribution(const std::vector<Vector>& elites,
                                             double sigma_floor) {
  if (elites.empty())
    throw std::invalid_argument("update_distribution: empty elite set");
  if (sigma_floor < 0.0)
    throw std::invalid_argument("update_distribution: sigma_floor must be >= 0");
  NoiseDistribution dist;
  dist.mu = elite_mean(elites);
  Vector var = Vector::Zero(dist.mu.size());
  for (const Vector& e : elites) {
    const Vector d = e - dist.mu;
    var += d.cwiseProduct(d);
  }
  var /= static_cast<double>(elites.size());
  dist.sigma = var.cwiseSqrt().cwiseMax(sigma_floor);
  return dist;
}

namespace detail {

// Shared skeleton for the searches: per iteration, draw candidates, score
// them, pick an elite set, refit. The elite picker is the only difference
// between reward-guided and random-update variants.
template <typename Field, typename RewardFn, typename PickElites>
Vector run_search(const PerturbationContext& ctx, const Field& field,
                  const RewardFn& reward, const CemConfig& cfg, Rng& rng,
                  SearchTrace* trace, const PickElites& pick_elites) {
  check_context(ctx);
  if (cfg.n <= 0) throw std::invalid_argument("search: n must be positive");
  NoiseDistribution dist = NoiseDistribution::standard(ctx.state.size());
  for (int iter = 0; iter < cfg.n; ++iter) {
    const std::vector<Vector> cands = sample_candidates(dist, cfg.k, rng);
    int flagged = 0;
    const std::vector<double> rewards =
        evaluate_candidates(ctx, field, cands, reward, &flagged);
    if (trace) trace->flagged_candidates += flagged;
    bool any_finite = false;
    for (const double r : rewards)
      if (std::isfinite(r)) {
        any_finite = true;
        break;
      }
    if (!any_finite)
      throw SearchFailure(
          "noise search: all " + std::to_string(cfg.k) +
          " candidates scored non-finite at t=" + std::to_string(ctx.t) +
          " (iteration " + std::to_string(iter) + ")");
    const std::vector<int> elites = pick_elites(rewards, rng);
    dist = update_distribution(gather_elites(cands, elites), cfg.sigma_floor);
    if (trace) {
      SearchTrace::Iteration rec;
      rec.rewards = rewards;
      rec.elite_indices = elites;
      rec.mu = dist.mu;
      rec.sigma = dist.sigma;
      for (const double r : rewards)
        if (std::isfinite(r)) rec.best_reward = std::max(rec.best_reward, r);
      trace->iterations.push_back(std::move(rec));
    }
  }
  if (cfg.return_mode == ReturnMode::Sample) {
    Vector n(dist.mu.size());
    for (Eigen::Index j = 0; j < n.size(); ++j) n[j] = rng.normal();
    return dist.mu + dist.sigma.cwiseProduct(n);
  }
  return dist.mu;
}

}  // namespace detail

// Reward-guided iterative search: elites are the top-P fraction by reward.
template <typename Field, typename RewardFn>
Vector smart_grpo_search(const PerturbationContext& ctx, const Field& field,
                         const RewardFn& reward, const CemConfig& cfg, Rng& rng,
                         SearchTrace* trace = nullptr) {
  return detail::run_search(
      ctx, field, reward, cfg, rng, trace,
      [&cfg](const std::vector<double>& rewards, Rng&) {
        return select_top(rewards, cfg.p);
      });
}

// Single-round variant: draw k candidates from N(0, I), score them once, and
// return the mean of the top t. Equals one iteration of the reward-guided
// search in Mean mode with p = t / k, drawing from the same stream.
template <typename Field, typename RewardFn>
Vector one_shot_search(const PerturbationContext& ctx, const Field& field,
                       const RewardFn& reward, int k, int t, Rng& rng,
                       SearchTrace* trace = nullptr) {
  check_context(ctx);
  if (t <= 0 || t > k)
    throw std::invalid_argument("one_shot_search: need 0 < t <= k");
  const NoiseDistribution dist = NoiseDistribution::standard(ctx.state.size());
  const std::vector<Vector> cands = sample_candidates(dist, k, rng);
  int flagged = 0;
  const std::vector<double> rewards =
      evaluate_candidates(ctx, field, cands, reward, &flagged);
  if (trace) trace->flagged_candidates += flagged;
  const std::vector<int> elites =
      select_top(rewards, static_cast<double>(t) / static_cast<double>(k));
  if (elites.empty())
    throw SearchFailure("one_shot_search: all candidates scored non-finite");
  const Vector mean = elite_mean(gather_elites(cands, elites));
  if (trace) {
    SearchTrace::Iteration rec;
    rec.rewards = rewards;
    rec.elite_indices = elites;
    rec.mu = mean;
    rec.sigma = Vector::Zero(ctx.state.size());
    for (const double r : rewards)
      if (std::isfinite(r)) rec.best_reward = std::max(rec.best_reward, r);
    trace->iterations.push_back(std::move(rec));
  }
  return mean;
}

// Control variant: identical candidate generation and reward spending, but
// the elite set is a uniformly random size-T subset, so the rewards never
// influence the refit. With t == k no selection randomness is consumed and
// the output matches the reward-guided search exactly.
template <typename Field, typename RewardFn>
Vector random_update_search(const PerturbationContext& ctx, const Field& field,
                            const RewardFn& reward, const CemConfig& cfg,
                            Rng& rng, SearchTrace* trace = nullptr) {
  return detail::run_search(
      ctx, field, reward, cfg, rng, trace,
      [&cfg](const std::vector<double>& rewards, Rng& r) {
        const int k = static_cast<int>(rewards.size());
        const int t = elite_count(k, cfg.p);
        std::vector<int> pool(rewards.size());
        std::iota(pool.begin(), pool.end(), 0);
        if (t < k) {
          for (int i = 0; i < t; ++i) {
            const std::uint64_t j =
                static_cast<std::uint64_t>(i) +
                r.below(static_cast<std::uint64_t>(k - i));
            std::swap(pool[static_cast<std::size_t>(i)],
                      pool[static_cast<std::size_t>(j)]);
          }
          pool.resize(static_cast<std::size_t>(t));
        }
        return pool;
      });
}

}  // namespace flowrl
