#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "flowrl/errors.hpp"
#include "flowrl/flow.hpp"
#include "flowrl/mlp.hpp"
#include "flowrl/noise_search.hpp"
#include "flowrl/rewards.hpp"
#include "flowrl/rng.hpp"

namespace flowrl {

// How rollout noise is produced at searched steps.
enum class NoiseSource { Flow, Smart, OneShot, RandomUpdate };

inline NoiseSource noise_source_from_string(const std::string& s) {
  if (s == "flow") return NoiseSource::Flow;
  if (s == "smart") return NoiseSource::Smart;
  if (s == "oneshot") return NoiseSource::OneShot;
  if (s == "randup") return NoiseSource::RandomUpdate;
  throw ConfigError("unknown mode '" + s + "'; available: flow smart oneshot randup");
}

inline std::string to_string(NoiseSource m) {
  switch (m) {
    case NoiseSource::Flow: return "flow";
    case NoiseSource::Smart: return "smart";
    case NoiseSource::OneShot: return "oneshot";
    case NoiseSource::RandomUpdate: return "randup";
  }
  return "?";
}

// Per-step noise scale sigma_t as a function of time.
enum class SigmaSchedule { Linear, Sqrt, Constant };

inline SigmaSchedule sigma_schedule_from_string(const std::string& s) {
  if (s == "linear") return SigmaSchedule::Linear;
  if (s == "sqrt") return SigmaSchedule::Sqrt;
  if (s == "const") return SigmaSchedule::Constant;
  throw ConfigError("unknown sigma schedule '" + s +
                    "'; available: linear sqrt const");
}

inline double sigma_at(SigmaSchedule schedule, double noise_level, double t) {
  switch (schedule) {
    case SigmaSchedule::Linear: return noise_level * t;
    case SigmaSchedule::Sqrt: return noise_level * std::sqrt(t);
    case SigmaSchedule::Constant: return noise_level;
  }
  return noise_level;
}

struct GrpoConfig {
  int group_size = 4;
  double clip_eps = 0.2;
  double kl_beta = 0.04;
  double lr = 1e-3;
  int train_steps = 10;
  int eval_steps = 40;
  double timestep_fraction = 0.99;
  double smart_t_threshold = 0.6;
  double ema_decay = 0.999;
  int epochs = 200;
  std::uint64_t seed = 0;
  double noise_level = 0.7;
  SigmaSchedule sigma_schedule = SigmaSchedule::Linear;
  int updates_per_epoch = 1;
  double divergence_margin = 25.0;
  int divergence_patience = 10;
  int eval_interval = 20;
  int eval_batch = 512;

  // one-round search geometry (used when the noise source is OneShot)
  int one_shot_k = 25;
  int one_shot_t = 12;
};

inline void validate_grpo(const GrpoConfig& cfg) {
  if (cfg.group_size < 2)
    throw std::invalid_argument("GrpoConfig: group_size must be at least 2");
  if (!(cfg.clip_eps > 0.0))
    throw std::invalid_argument("GrpoConfig: clip_eps must be positive");
  if (cfg.kl_beta < 0.0)
    throw std::invalid_argument("GrpoConfig: kl_beta must be >= 0");
  if (!(cfg.lr > 0.0))
    throw std::invalid_argument("GrpoConfig: lr must be positive");
  if (cfg.train_steps < 1 || cfg.eval_steps < 1)
    throw std::invalid_argument("GrpoConfig: step counts must be positive");
  if (!(cfg.timestep_fraction > 0.0 && cfg.timestep_fraction <= 1.0))
    throw std::invalid_argument("GrpoConfig: timestep_fraction must lie in (0,1]");
  if (!(cfg.smart_t_threshold >= 0.0 && cfg.smart_t_threshold <= 1.0))
    throw std::invalid_argument("GrpoConfig: smart_t_threshold must lie in [0,1]");
  if (!(cfg.ema_decay >= 0.0 && cfg.ema_decay < 1.0))
    throw std::invalid_argument("GrpoConfig: ema_decay must lie in [0,1)");
  if (cfg.epochs < 0)
    throw std::invalid_argument("GrpoConfig: epochs must be >= 0");
  if (cfg.noise_level < 0.0)
    throw std::invalid_argument("GrpoConfig: noise_level must be >= 0");
  if (cfg.updates_per_epoch < 1)
    throw std::invalid_argument("GrpoConfig: updates_per_epoch must be positive");
}

// One logged transition of a stochastic rollout.
struct StepRecord {
  double t_before = 0.0;
  double t_after = 0.0;
  double sigma_t = 0.0;
  Vector state_before;
  Vector state_after;
  Vector noise_used;
  double log_prob_current = 0.0;    // behavior log density of state_after
  double log_prob_reference = 0.0;  // same point under the reference field
  bool smart_selected = false;      // noise came from a search
  bool loss_included = true;        // step participates in the surrogate loss
};

struct TrajectoryGroup {
  Vector x1;  // shared latent start for the whole group
  std::vector<std::vector<StepRecord>> steps;  // [group][train_steps]
  std::vector<Vector> finals;
  std::vector<double> rewards;
  int search_invocations = 0;
  double sigma_trace_sum = 0.0;  // summed final sigma means across searches
  int nonfinite_rewards = 0;
};

// Log density of an isotropic Gaussian N(mean, std^2 I) at x.
inline double gaussian_logp(const Vector& x, const Vector& mean, double std) {
  const double d = static_cast<double>(x.size());
  return -(x - mean).squaredNorm() / (2.0 * std * std) - d * std::log(std) -
         0.5 * d * std::log(2.0 * std::numbers::pi);
}

struct SdeResult {
  Vector next;
  double log_prob = 0.0;
  bool degenerate = false;  // sigma_t was zero: deterministic step, logp 0
};

// One stochastic integration step:
//   x' = x + v(x,t) dt + sqrt(-dt) * sigma_t * m,
// with log_prob the Gaussian density of x' around the deterministic move.
template <typename Field>
SdeResult sde_step(const Field& field, const Vector& x, double t, double dt,
                   double sigma_t, const Vector& m) {
  if (!(dt < 0.0)) throw std::invalid_argument("sde_step: dt must be negative");
  if (sigma_t < 0.0)
    throw std::invalid_argument("sde_step: sigma_t must be >= 0");
  if (m.size() != x.size())
    throw std::invalid_argument("sde_step: noise dimension mismatch");
  SdeResult out;
  const Vector mean = x + dt * field(x, t);
  if (sigma_t == 0.0) {
    if (m.squaredNorm() != 0.0)
      throw std::invalid_argument(
          "sde_step: sigma_t is 0 but the noise is nonzero (degenerate density)");
    out.next = mean;
    out.log_prob = 0.0;
    out.degenerate = true;
    return out;
  }
  const double std = std::sqrt(-dt) * sigma_t;
  out.next = mean + std * m;
  out.log_prob = gaussian_logp(out.next, mean, std);
  return out;
}

// Counts of reward-function calls, split by purpose. The exact-budget
// invariant is checked against these.
struct RewardBudget {
  std::int64_t search_calls = 0;
  std::int64_t final_calls = 0;
  std::int64_t eval_calls = 0;
  std::int64_t search_invocations = 0;

  [[nodiscard]] std::int64_t train_calls() const {
    return search_calls + final_calls;
  }
};

// Roll out one group of trajectories from a shared latent start. Noise at
// steps with t <= smart_t_threshold comes from the configured search; all
// other steps (and every step of the flow baseline) use the per-step noise
// substream, so paired runs with different sources see identical baseline
// noise.
template <typename Field, typename RefField, typename RewardFn>
TrajectoryGroup rollout_group(const Field& field, const RefField& reference,
                              const RewardFn& reward, const GrpoConfig& cfg,
                              const CemConfig& cem, NoiseSource source,
                              int dim, int epoch, const Rng& root,
                              RewardBudget* budget = nullptr) {
  validate_grpo(cfg);
  const double dt = -1.0 / static_cast<double>(cfg.train_steps);
  TrajectoryGroup group;

  Rng prompt = root.derive(stream::kPrompt).derive(static_cast<std::uint64_t>(epoch));
  group.x1.resize(dim);
  for (int i = 0; i < dim; ++i) group.x1[i] = prompt.normal();

  auto counted_reward = [&](const Vector& x) {
    if (budget) ++budget->search_calls;
    return reward(x);
  };

  group.steps.resize(static_cast<std::size_t>(cfg.group_size));
  for (int g = 0; g < cfg.group_size; ++g) {
    Vector x = group.x1;
    auto& traj = group.steps[static_cast<std::size_t>(g)];
    traj.reserve(static_cast<std::size_t>(cfg.train_steps));
    for (int k = 0; k < cfg.train_steps; ++k) {
      const double t = 1.0 + static_cast<double>(k) * dt;
      const double sig = sigma_at(cfg.sigma_schedule, cfg.noise_level, t);
      const bool searched =
          source != NoiseSource::Flow && t <= cfg.smart_t_threshold + 1e-12 &&
          sig > 0.0;
      Vector m = Vector::Zero(dim);
      if (searched) {
        PerturbationContext ctx{x, t, dt, sig};
        Rng srng = root.derive(stream::kSearch)
                       .derive(static_cast<std::uint64_t>(epoch))
                       .derive(static_cast<std::uint64_t>(g))
                       .derive(static_cast<std::uint64_t>(k));
        SearchTrace trace;
        if (source == NoiseSource::Smart) {
          m = smart_grpo_search(ctx, field, counted_reward, cem, srng, &trace);
        } else if (source == NoiseSource::OneShot) {
          m = one_shot_search(ctx, field, counted_reward, cfg.one_shot_k,
                              cfg.one_shot_t, srng, &trace);
        } else {
          m = random_update_search(ctx, field, counted_reward, cem, srng,
                                   &trace);
        }
        ++group.search_invocations;
        if (budget) ++budget->search_invocations;
        group.sigma_trace_sum += trace.final_sigma_mean();
      } else if (sig > 0.0) {
        Rng nrng = root.derive(stream::kNoise)
                       .derive(static_cast<std::uint64_t>(epoch))
                       .derive(static_cast<std::uint64_t>(g))
                       .derive(static_cast<std::uint64_t>(k));
        for (int i = 0; i < dim; ++i) m[i] = nrng.normal();
      }

      const SdeResult step = sde_step(field, x, t, dt, sig, m);
      StepRecord rec;
      rec.t_before = t;
      rec.t_after = t + dt;
      rec.sigma_t = sig;
      rec.state_before = x;
      rec.state_after = step.next;
      rec.noise_used = m;
      rec.log_prob_current = step.log_prob;
      if (step.degenerate) {
        rec.log_prob_reference = 0.0;
      } else {
        const Vector ref_mean = x + dt * reference(x, t);
        rec.log_prob_reference =
            gaussian_logp(step.next, ref_mean, std::sqrt(-dt) * sig);
      }
      rec.smart_selected = searched;
      Rng mrng = root.derive(stream::kMask)
                     .derive(static_cast<std::uint64_t>(epoch))
                     .derive(static_cast<std::uint64_t>(g))
                     .derive(static_cast<std::uint64_t>(k));
      rec.loss_included = mrng.uniform() <= cfg.timestep_fraction;
      traj.push_back(std::move(rec));
      x = step.next;
    }
    group.finals.push_back(x);
    if (budget) ++budget->final_calls;
    group.rewards.push_back(reward(x));
  }

  // Non-finite final rewards are pulled just below the worst finite member so
  // advantages stay finite; if nothing is finite, the whole group flattens.
  double worst = std::numeric_limits<double>::infinity();
  bool any_finite = false;
  for (const double r : group.rewards)
    if (std::isfinite(r)) {
      worst = std::min(worst, r);
      any_finite = true;
    }
  for (double& r : group.rewards)
    if (!std::isfinite(r)) {
      ++group.nonfinite_rewards;
      r = any_finite ? worst - 1.0 : -1.0;
    }
  return group;
}

// Group-relative advantages: center by the group mean, scale by the group
// population std plus a small constant.
inline Vector group_advantages(const std::vector<double>& rewards) {
  if (rewards.empty())
    throw std::invalid_argument("group_advantages: empty group");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (const double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (const double r : rewards) var += (r - mean) * (r - mean);
  var /= n;
  const double scale = std::sqrt(var) + 1e-8;
  Vector adv(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i)
    adv[static_cast<Eigen::Index>(i)] = (rewards[i] - mean) / scale;
  return adv;
}

struct GrpoLossResult {
  double loss = 0.0;
  std::vector<double> grad;
  double kl = 0.0;
};

// Clipped surrogate objective with a closed-form Gaussian KL penalty toward
// the reference field, averaged over the loss-included steps of the group.
// Per step, with ratio r = exp(logp_now - logp_behavior) and advantage A:
//   surrogate = min(r A, clip(r, 1-eps, 1+eps) A),   loss += -surrogate
//   kl_hat    = |(v - v_ref) dt|^2 / (2 (-dt) sigma_t^2)
// Gradients flow through the unclipped branch only when it is the active
// minimum, mirroring the usual clipped-objective subgradient.
inline GrpoLossResult grpo_loss(const TrajectoryGroup& group,
                                const Vector& advantages, const Mlp& current,
                                const Mlp& reference, const GrpoConfig& cfg) {
  if (advantages.size() != static_cast<Eigen::Index>(group.steps.size()))
    throw std::invalid_argument("grpo_loss: advantage count mismatch");
  GrpoLossResult out;
  out.grad.assign(current.n_params(), 0.0);

  std::int64_t included = 0;
  for (const auto& traj : group.steps)
    for (const auto& rec : traj)
      if (rec.loss_included && rec.sigma_t > 0.0) ++included;
  if (included == 0) return out;
  const double inv_m = 1.0 / static_cast<double>(included);

  double loss_pg = 0.0;
  double kl_sum = 0.0;
  std::vector<Vector> acts;
  for (std::size_t g = 0; g < group.steps.size(); ++g) {
    const double a = advantages[static_cast<Eigen::Index>(g)];
    for (const StepRecord& rec : group.steps[g]) {
      if (!rec.loss_included || rec.sigma_t <= 0.0) continue;
      if (!std::isfinite(rec.log_prob_current))
        throw std::invalid_argument(
            "grpo_loss: behavior log-prob missing; trajectories must be "
            "replayed from records, never resampled");
      const double dt = rec.t_after - rec.t_before;
      const double std = std::sqrt(-dt) * rec.sigma_t;
      const double s2 = std * std;

      const Vector v = current.forward_traced(rec.state_before, rec.t_before, acts);
      const Vector mean = rec.state_before + dt * v;
      const double logp = gaussian_logp(rec.state_after, mean, std);
      const double ratio = std::exp(logp - rec.log_prob_current);
      const double clipped =
          std::clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
      const double s1 = ratio * a;
      const double s2post = clipped * a;
      loss_pg += -std::min(s1, s2post);

      Vector cot = Vector::Zero(v.size());
      if (s1 <= s2post) {
        // d(-r A)/d v = -A r (x' - mean)/s^2 * dt
        cot += (-a * ratio / s2 * dt) * (rec.state_after - mean);
      }
      const Vector vref = reference(rec.state_before, rec.t_before);
      const Vector dmean = dt * (v - vref);
      kl_sum += dmean.squaredNorm() / (2.0 * s2);
      cot += (cfg.kl_beta * dt / s2) * dmean;

      current.vjp(acts, inv_m * cot, out.grad);
    }
  }
  out.loss = (loss_pg + cfg.kl_beta * kl_sum) * inv_m;
  out.kl = kl_sum * inv_m;
  return out;
}

// In-place exponential moving average of parameters.
inline void ema_update(std::vector<double>& ema,
                       const std::vector<double>& current, double decay) {
  if (ema.size() != current.size())
    throw std::invalid_argument("ema_update: size mismatch");
  if (!(decay >= 0.0 && decay <= 1.0))
    throw std::invalid_argument("ema_update: decay must lie in [0,1]");
  for (std::size_t i = 0; i < ema.size(); ++i)
    ema[i] = decay * ema[i] + (1.0 - decay) * current[i];
}

struct MetricsRow {
  int epoch = 0;
  std::string phase;  // "train" or "eval"
  double mean_reward = 0.0;
  double std_reward = 0.0;
  double loss = 0.0;
  double kl = 0.0;
  double mean_sigma_trace = 0.0;
  std::int64_t smart_invocations = 0;
  std::int64_t wall_ms = 0;
};

struct TrainResult {
  Mlp policy;
  Mlp ema;
  std::vector<MetricsRow> metrics;
  RewardBudget budget;
};

using MetricsSink = std::function<void(const MetricsRow&)>;

// Full reinforcement loop: per epoch, roll out one group with the configured
// noise source, compute group advantages, take policy-gradient steps, update
// the EMA copy, and periodically evaluate the EMA policy with deterministic
// integration. Aborts (exit code 3 at the CLI) when the train reward stays
// more than divergence_margin below the first epoch's reward for
// divergence_patience consecutive epochs.
template <typename RewardFn>
TrainResult train(const Mlp& pretrained, const RewardFn& reward,
                  const GrpoConfig& cfg, const CemConfig& cem,
                  NoiseSource source, const MetricsSink& sink = nullptr) {
  validate_grpo(cfg);
  TrainResult result{pretrained, pretrained, {}, {}};
  Mlp& policy = result.policy;
  Mlp& ema = result.ema;
  Mlp reference = pretrained;
  Adam opt(policy.n_params(), cfg.lr);
  const Rng root(cfg.seed);

  double initial_reward = 0.0;
  int divergence_streak = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const TrajectoryGroup group =
        rollout_group(policy, reference, reward, cfg, cem, source,
                      policy.input_dim(), epoch, root, &result.budget);
    const Vector adv = group_advantages(group.rewards);

    double loss = 0.0;
    double kl = 0.0;
    for (int u = 0; u < cfg.updates_per_epoch; ++u) {
      const GrpoLossResult step = grpo_loss(group, adv, policy, reference, cfg);
      opt.step(policy.params(), step.grad);
      loss = step.loss;
      kl = step.kl;
    }
    ema_update(ema.params(), policy.params(), cfg.ema_decay);

    double mean_r = 0.0;
    for (const double r : group.rewards) mean_r += r;
    mean_r /= static_cast<double>(group.rewards.size());
    double var_r = 0.0;
    for (const double r : group.rewards) var_r += (r - mean_r) * (r - mean_r);
    var_r /= static_cast<double>(group.rewards.size());

    MetricsRow row;
    row.epoch = epoch;
    row.phase = "train";
    row.mean_reward = mean_r;
    row.std_reward = std::sqrt(var_r);
    row.loss = loss;
    row.kl = kl;
    row.mean_sigma_trace =
        group.search_invocations > 0
            ? group.sigma_trace_sum / static_cast<double>(group.search_invocations)
            : 0.0;
    row.smart_invocations = group.search_invocations;
    result.metrics.push_back(row);
    if (sink) sink(row);

    if (epoch == 0) initial_reward = mean_r;
    if (mean_r < initial_reward - cfg.divergence_margin) {
      if (++divergence_streak >= cfg.divergence_patience)
        throw DivergenceAbort(
            "training diverged: mean reward " + format_double(mean_r) +
            " stayed more than " + format_double(cfg.divergence_margin) +
            " below the initial " + format_double(initial_reward) + " for " +
            std::to_string(cfg.divergence_patience) + " epochs (epoch " +
            std::to_string(epoch) + ")");
    } else {
      divergence_streak = 0;
    }

    if (cfg.eval_interval > 0 && (epoch + 1) % cfg.eval_interval == 0) {
      Rng erng = root.derive(stream::kEval)
                     .derive(static_cast<std::uint64_t>(epoch));
      double emean = 0.0;
      double esq = 0.0;
      for (int b = 0; b < cfg.eval_batch; ++b) {
        Vector x1(ema.input_dim());
        for (int i = 0; i < x1.size(); ++i) x1[i] = erng.normal();
        const Vector x0 = euler_sample(ema, x1, cfg.eval_steps);
        ++result.budget.eval_calls;
        const double r = reward(x0);
        emean += r;
        esq += r * r;
      }
      emean /= static_cast<double>(cfg.eval_batch);
      esq /= static_cast<double>(cfg.eval_batch);
      MetricsRow erow;
      erow.epoch = epoch;
      erow.phase = "eval";
      erow.mean_reward = emean;
      erow.std_reward = std::sqrt(std::max(0.0, esq - emean * emean));
      result.metrics.push_back(erow);
      if (sink) sink(erow);
    }
  }
  return result;
}

}  // namespace flowrl
