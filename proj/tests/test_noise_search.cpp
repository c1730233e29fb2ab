#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <limits>
#include <vector>

#include "flowrl/noise_search.hpp"

namespace fs = std::filesystem;
using namespace flowrl;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Field with zero velocity everywhere: one-step decoding returns the state
// unchanged, which makes reward arithmetic transparent.
struct ZeroField {
  Vector operator()(const Vector& x, double) const {
    return Vector::Zero(x.size());
  }
};

Vector scalar(double v) {
  Vector x(1);
  x[0] = v;
  return x;
}

PerturbationContext quadratic_ctx() {
  PerturbationContext ctx;
  ctx.state = scalar(0.0);
  ctx.t = 0.5;
  ctx.dt = -0.04;
  ctx.sigma_t = 1.0;
  return ctx;
}

double quadratic_reward(const Vector& z) {
  return -(z[0] - 1.0) * (z[0] - 1.0);
}

}  // namespace

TEST_CASE("candidate sampling is deterministic, scaled, and shaped") {
  NoiseDistribution dist;
  dist.mu = scalar(2.0);
  dist.sigma = scalar(0.0);
  Rng rng(1);
  const auto cands = sample_candidates(dist, 5, rng);
  REQUIRE(cands.size() == 5);
  for (const auto& c : cands) REQUIRE(c[0] == 2.0);

  Rng a(2), b(2);
  const auto ca = sample_candidates(NoiseDistribution::standard(3), 4, a);
  const auto cb = sample_candidates(NoiseDistribution::standard(3), 4, b);
  for (int i = 0; i < 4; ++i) REQUIRE(ca[i] == cb[i]);
  REQUIRE_THROWS_AS(sample_candidates(dist, 0, rng), std::invalid_argument);
}

TEST_CASE("candidate sampling matches standard moments at large population") {
  Rng rng(3);
  const auto cands = sample_candidates(NoiseDistribution::standard(1), 10000, rng);
  double sum = 0.0, sumsq = 0.0;
  for (const auto& c : cands) {
    sum += c[0];
    sumsq += c[0] * c[0];
  }
  const double mean = sum / 10000.0;
  const double var = sumsq / 10000.0 - mean * mean;
  REQUIRE(std::abs(mean) < 0.05);
  REQUIRE(std::abs(std::sqrt(var) - 1.0) < 0.05);
}

TEST_CASE("perturbation applies the step-scaled noise exactly") {
  PerturbationContext ctx;
  ctx.state = scalar(0.0);
  ctx.t = 0.5;
  ctx.dt = -0.25;  // sqrt(0.25) = 0.5 exactly
  ctx.sigma_t = 2.0;
  REQUIRE(perturb(ctx, scalar(1.0))[0] == 1.0);
  REQUIRE(perturb(ctx, scalar(0.0))[0] == 0.0);
  REQUIRE(perturb(ctx, scalar(-3.0))[0] == -3.0);
  REQUIRE_THROWS_AS(perturb(ctx, Vector::Zero(2)), std::invalid_argument);
}

TEST_CASE("context validation rejects bad rollout positions") {
  PerturbationContext ctx = quadratic_ctx();
  ctx.dt = 0.1;
  REQUIRE_THROWS_AS(check_context(ctx), std::invalid_argument);
  ctx = quadratic_ctx();
  ctx.t = 0.0;
  REQUIRE_THROWS_AS(check_context(ctx), std::invalid_argument);
  ctx = quadratic_ctx();
  ctx.t = 1.2;
  REQUIRE_THROWS_AS(check_context(ctx), std::invalid_argument);
  ctx = quadratic_ctx();
  ctx.dt = -0.9;  // would step past t = 0
  REQUIRE_THROWS_AS(check_context(ctx), std::invalid_argument);
  ctx = quadratic_ctx();
  ctx.sigma_t = -1.0;
  REQUIRE_THROWS_AS(check_context(ctx), std::invalid_argument);
}

TEST_CASE("evaluation scores the one-step decode of each perturbed state") {
  const PerturbationContext ctx = quadratic_ctx();
  const ZeroField field;
  const std::vector<Vector> cands = {scalar(0.0), scalar(5.0), scalar(-5.0)};
  const auto rewards = evaluate_candidates(ctx, field, cands, quadratic_reward);
  REQUIRE(rewards.size() == 3);
  // decode(z) = z with a zero field, z = 0.2 * m.
  REQUIRE(rewards[0] == Catch::Approx(-1.0).epsilon(1e-14));
  REQUIRE(rewards[1] == Catch::Approx(0.0).margin(1e-14));
  REQUIRE(rewards[2] == Catch::Approx(-4.0).epsilon(1e-14));
}

TEST_CASE("evaluation under the exact point-mass field gives zero regret") {
  PerturbationContext ctx;
  ctx.state = scalar(0.4);
  ctx.t = 0.8;
  ctx.dt = -0.2;
  ctx.sigma_t = 0.7;
  const Vector x0 = scalar(1.5);
  const DiracField field{x0};
  Rng rng(9);
  const auto cands = sample_candidates(NoiseDistribution::standard(1), 20, rng);
  const auto rewards = evaluate_candidates(
      ctx, field, cands, [&](const Vector& z) { return -(z - x0).squaredNorm(); });
  for (const double r : rewards) REQUIRE(std::abs(r) < 1e-20);
}

TEST_CASE("non-finite rewards are flagged and demoted to -inf") {
  const PerturbationContext ctx = quadratic_ctx();
  const ZeroField field;
  const std::vector<Vector> cands = {scalar(0.0), scalar(1.0), scalar(2.0)};
  int flagged = 0;
  const auto rewards = evaluate_candidates(
      ctx, field, cands,
      [](const Vector& z) {
        return z[0] > 0.3 ? std::numeric_limits<double>::quiet_NaN() : z[0];
      },
      &flagged);
  REQUIRE(flagged == 1);
  REQUIRE(rewards[0] == Catch::Approx(0.0).margin(1e-15));
  REQUIRE(rewards[1] == Catch::Approx(0.2).epsilon(1e-12));
  REQUIRE(rewards[2] == -kInf);
}

TEST_CASE("elite count floors the fraction and rejects empty elite sets") {
  REQUIRE(elite_count(25, 0.48) == 12);
  REQUIRE(elite_count(5, 0.8) == 4);
  REQUIRE(elite_count(50, 0.2) == 10);
  REQUIRE(elite_count(4, 0.5) == 2);
  REQUIRE(elite_count(7, 1.0) == 7);
  try {
    elite_count(10, 0.05);
    FAIL("expected error for an empty elite set");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("elite fraction") != std::string::npos);
    REQUIRE(msg.find("population size") != std::string::npos);
  }
  REQUIRE_THROWS_AS(elite_count(0, 0.5), std::invalid_argument);
  REQUIRE_THROWS_AS(elite_count(10, 1.5), std::invalid_argument);
}

TEST_CASE("top selection is best-first with ties broken toward lower index") {
  const std::vector<double> rewards = {3.0, 1.0, 3.0, 2.0};
  const auto elites = select_top(rewards, 0.5);
  REQUIRE(elites == std::vector<int>{0, 2});

  const auto one = select_top(rewards, 0.25);
  REQUIRE(one == std::vector<int>{0});
}

TEST_CASE("top selection drops -inf entries even below the quota") {
  const std::vector<double> rewards = {1.0, -kInf, 2.0, -kInf};
  const auto elites = select_top(rewards, 0.75);
  REQUIRE(elites == std::vector<int>{2, 0});
  const auto none = select_top({-kInf, -kInf}, 1.0);
  REQUIRE(none.empty());
}

TEST_CASE("distribution refit matches hand-computed elite statistics") {
  const auto dist = update_distribution({scalar(1.0), scalar(3.0)}, 0.1);
  REQUIRE(dist.mu[0] == 2.0);
  REQUIRE(dist.sigma[0] == 1.0);

  const auto collapsed = update_distribution({scalar(4.0), scalar(4.0)}, 0.25);
  REQUIRE(collapsed.mu[0] == 4.0);
  REQUIRE(collapsed.sigma[0] == 0.25);

  const auto single = update_distribution({scalar(-2.0)}, 0.5);
  REQUIRE(single.mu[0] == -2.0);
  REQUIRE(single.sigma[0] == 0.5);

  REQUIRE_THROWS_AS(update_distribution({}, 0.1), std::invalid_argument);
  REQUIRE_THROWS_AS(update_distribution({scalar(0.0)}, -0.1),
                    std::invalid_argument);
}

TEST_CASE("gathering elites sorts indices so sums are order-stable") {
  const std::vector<Vector> cands = {scalar(10.0), scalar(20.0), scalar(30.0)};
  const auto picked = gather_elites(cands, {2, 0});
  REQUIRE(picked.size() == 2);
  REQUIRE(picked[0][0] == 10.0);
  REQUIRE(picked[1][0] == 30.0);
  REQUIRE(elite_mean(picked)[0] == 20.0);
}

TEST_CASE("reward-guided search localizes the quadratic optimum") {
  // With a zero field, decode(z) = z = 0.2 m, so the reward peaks at m = 5.
  const PerturbationContext ctx = quadratic_ctx();
  const ZeroField field;
  CemConfig cfg;
  cfg.k = 50;
  cfg.n = 10;
  cfg.p = 0.2;
  cfg.sigma_floor = 0.5;
  Rng rng(12345);
  SearchTrace trace;
  const Vector mu = smart_grpo_search(ctx, field, quadratic_reward, cfg, rng, &trace);
  REQUIRE(std::abs(mu[0] - 5.0) < 0.5);
  REQUIRE(trace.iterations.size() == 10);
  REQUIRE(trace.flagged_candidates == 0);
  REQUIRE(trace.best_reward() > -0.05);
}

TEST_CASE("search output is deterministic in the stream key") {
  const PerturbationContext ctx = quadratic_ctx();
  const ZeroField field;
  CemConfig cfg;
  cfg.k = 12;
  cfg.n = 4;
  cfg.p = 0.5;
  Rng a(777), b(777);
  const Vector ma = smart_grpo_search(ctx, field, quadratic_reward, cfg, a);
  const Vector mb = smart_grpo_search(ctx, field, quadratic_reward, cfg, b);
  REQUIRE(ma == mb);
}

TEST_CASE("constant rewards leave the mean near zero and contract the spread") {
  const PerturbationContext ctx = quadratic_ctx();
  const ZeroField field;
  CemConfig cfg;
  cfg.k = 40;
  cfg.n = 8;
  cfg.p = 0.5;
  cfg.sigma_floor = 1e-3;
  Rng rng(42);
  SearchTrace trace;
  const Vector mu = smart_grpo_search(
      ctx, field, [](const Vector&) { return 1.0; }, cfg, rng, &trace);
  // Without reward signal the mean performs a random walk with shrinking
  // steps; it stays within ~1.5 of the initial unit-sigma scale.
  REQUIRE(std::abs(mu[0]) < 1.5);
  REQUIRE(trace.final_sigma_mean() < 1.0);
  REQUIRE(trace.final_sigma_mean() >= cfg.sigma_floor);
}

TEST_CASE("all-non-finite candidates abort the search") {
  const PerturbationContext ctx = quadratic_ctx();
  const ZeroField field;
  CemConfig cfg;
  cfg.k = 6;
  cfg.n = 2;
  cfg.p = 0.5;
  Rng rng(5);
  REQUIRE_THROWS_AS(
      smart_grpo_search(
          ctx, field,
          [](const Vector&) { return std::numeric_limits<double>::quiet_NaN(); },
          cfg, rng),
      SearchFailure);
}

TEST_CASE("sample mode draws from the refit distribution after the last iteration") {
  const PerturbationContext ctx = quadratic_ctx();
  const ZeroField field;
  CemConfig mean_cfg;
  mean_cfg.k = 20;
  mean_cfg.n = 3;
  mean_cfg.p = 0.5;
  CemConfig sample_cfg = mean_cfg;
  sample_cfg.return_mode = ReturnMode::Sample;

  Rng a(99), b(99), c(99);
  const Vector mu = smart_grpo_search(ctx, field, quadratic_reward, mean_cfg, a);
  const Vector s1 = smart_grpo_search(ctx, field, quadratic_reward, sample_cfg, b);
  const Vector s2 = smart_grpo_search(ctx, field, quadratic_reward, sample_cfg, c);
  REQUIRE(s1 == s2);       // deterministic
  REQUIRE(s1 != mu);       // but a draw, not the mean
}

TEST_CASE("single-round search with t = k averages every candidate") {
  const PerturbationContext ctx = quadratic_ctx();
  const ZeroField field;
  const int k = 9;
  Rng a(31), b(31);
  const Vector result = one_shot_search(ctx, field, quadratic_reward, k, k, a);
  const auto cands = sample_candidates(NoiseDistribution::standard(1), k, b);
  Vector manual = Vector::Zero(1);
  for (const auto& c : cands) manual += c;
  manual /= static_cast<double>(k);
  REQUIRE(result == manual);
  Rng c2(31);
  REQUIRE_THROWS_AS(one_shot_search(ctx, field, quadratic_reward, 4, 0, c2),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(one_shot_search(ctx, field, quadratic_reward, 4, 5, c2),
                    std::invalid_argument);
}

TEST_CASE("single-round search equals one iteration of the guided search") {
  const PerturbationContext ctx = quadratic_ctx();
  const ZeroField field;
  const int k = 14, t = 5;
  CemConfig cfg;
  cfg.k = k;
  cfg.n = 1;
  cfg.p = static_cast<double>(t) / static_cast<double>(k);
  cfg.return_mode = ReturnMode::Mean;
  Rng a(404), b(404);
  const Vector one = one_shot_search(ctx, field, quadratic_reward, k, t, a);
  const Vector smart = smart_grpo_search(ctx, field, quadratic_reward, cfg, b);
  REQUIRE(one == smart);
}

TEST_CASE("random-update search with a full elite set matches the guided search") {
  const PerturbationContext ctx = quadratic_ctx();
  const ZeroField field;
  CemConfig cfg;
  cfg.k = 8;
  cfg.n = 3;
  cfg.p = 1.0;  // every candidate is an elite; selection order cannot matter
  Rng a(2718), b(2718);
  const Vector rnd = random_update_search(ctx, field, quadratic_reward, cfg, a);
  const Vector smart = smart_grpo_search(ctx, field, quadratic_reward, cfg, b);
  REQUIRE(rnd == smart);
}

TEST_CASE("random-update search pays the same reward budget but finds less") {
  const PerturbationContext ctx = quadratic_ctx();
  const ZeroField field;
  CemConfig cfg;
  cfg.k = 20;
  cfg.n = 6;
  cfg.p = 0.25;
  cfg.sigma_floor = 0.05;

  int smart_wins = 0;
  double smart_sum = 0.0, random_sum = 0.0;
  for (int seed = 0; seed < 50; ++seed) {
    Rng root(9000 + static_cast<std::uint64_t>(seed));
    Rng a = root.derive(1), b = root.derive(1);

    int smart_evals = 0, random_evals = 0;
    const auto counted_smart = [&](const Vector& z) {
      ++smart_evals;
      return quadratic_reward(z);
    };
    const auto counted_random = [&](const Vector& z) {
      ++random_evals;
      return quadratic_reward(z);
    };
    const Vector ms = smart_grpo_search(ctx, field, counted_smart, cfg, a);
    const Vector mr = random_update_search(ctx, field, counted_random, cfg, b);
    REQUIRE(smart_evals == cfg.k * cfg.n);
    REQUIRE(random_evals == cfg.k * cfg.n);

    const double rs = quadratic_reward(perturb(ctx, ms));
    const double rr = quadratic_reward(perturb(ctx, mr));
    smart_sum += rs;
    random_sum += rr;
    if (rs > rr) ++smart_wins;
  }
  REQUIRE(smart_wins >= 40);
  REQUIRE(smart_sum / 50.0 > random_sum / 50.0);
}

TEST_CASE("search traces serialize with stable headers and row counts") {
  const PerturbationContext ctx = quadratic_ctx();
  const ZeroField field;
  CemConfig cfg;
  cfg.k = 10;
  cfg.n = 3;
  cfg.p = 0.5;
  Rng rng(808);
  SearchTrace trace;
  smart_grpo_search(ctx, field, quadratic_reward, cfg, rng, &trace);

  const fs::path dir = fs::temp_directory_path() / "flowrl_search_tests";
  fs::create_directories(dir);
  const fs::path cand_path = dir / "candidates.csv";
  const fs::path sum_path = dir / "summary.csv";
  trace.write_candidates(cand_path.string());
  trace.write_summary(sum_path.string());

  const CsvTable cands = read_csv(cand_path.string());
  REQUIRE(cands.header ==
          std::vector<std::string>{"iter", "candidate_idx", "reward", "selected"});
  REQUIRE(cands.rows.size() == static_cast<std::size_t>(cfg.k * cfg.n));
  int selected = 0;
  for (const auto& row : cands.rows)
    selected += static_cast<int>(parse_int(row[cands.column("selected")]));
  REQUIRE(selected == elite_count(cfg.k, cfg.p) * cfg.n);

  const CsvTable summary = read_csv(sum_path.string());
  REQUIRE(summary.header ==
          std::vector<std::string>{"iter", "mu_norm", "sigma_norm", "best_reward"});
  REQUIRE(summary.rows.size() == static_cast<std::size_t>(cfg.n));
  // Per-iteration best rewards are finite and the running best never drops.
  double running = -kInf;
  for (const auto& row : summary.rows) {
    const double best = parse_double(row[summary.column("best_reward")]);
    REQUIRE(std::isfinite(best));
    running = std::max(running, best);
    REQUIRE(best <= running);
  }
}
