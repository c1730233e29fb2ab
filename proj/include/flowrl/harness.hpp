#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "flowrl/config.hpp"
#include "flowrl/csv.hpp"
#include "flowrl/errors.hpp"
#include "flowrl/grpo.hpp"
#include "flowrl/mlp.hpp"
#include "flowrl/noise_search.hpp"
#include "flowrl/rewards.hpp"
#include "flowrl/rng.hpp"

namespace flowrl {

inline constexpr const char* kVersion = "flowrl-0.1.0";
inline constexpr const char* kOutRootEnv = "FLOWRL_OUT";

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      "run.experiment", "run.modes", "run.seeds",
      "task.dim", "task.components",
      "reward.name", "reward.components", "reward.target", "reward.center",
      "reward.radius", "reward.width",
      "pretrain.steps", "pretrain.batch", "pretrain.lr", "pretrain.hidden",
      "pretrain.seed", "pretrain.t_min", "pretrain.patience",
      "pretrain.checkpoint",
      "cem.k", "cem.n", "cem.p", "cem.sigma_floor", "cem.return_mode",
      "grpo.group_size", "grpo.clip_eps", "grpo.kl_beta", "grpo.lr",
      "grpo.train_steps", "grpo.eval_steps", "grpo.timestep_fraction",
      "grpo.smart_t_threshold", "grpo.ema_decay", "grpo.epochs",
      "grpo.noise_level", "grpo.sigma_schedule", "grpo.updates_per_epoch",
      "grpo.divergence_margin", "grpo.divergence_patience",
      "grpo.eval_interval", "grpo.eval_batch", "grpo.one_shot_k",
      "grpo.one_shot_t",
      "study.candidates",
  };
  return keys;
}

inline Vector parse_vector(const std::string& text, int dim,
                           const std::string& key) {
  std::istringstream in(text);
  std::vector<double> vals;
  double v = 0.0;
  while (in >> v) vals.push_back(v);
  if (!in.eof())
    throw ConfigError("key '" + key + "': expected numbers, got '" + text + "'");
  if (static_cast<int>(vals.size()) != dim)
    throw ConfigError("key '" + key + "': expected " + std::to_string(dim) +
                      " numbers, got " + std::to_string(vals.size()));
  Vector out(dim);
  for (int i = 0; i < dim; ++i) out[i] = vals[static_cast<std::size_t>(i)];
  return out;
}

// Mixture syntax: components separated by ';', each "weight mean... std",
// e.g. for dim 2: "0.5 2 0 0.6 ; 0.5 -2 0 0.6".
inline std::vector<MixtureComponent> parse_components(const std::string& text,
                                                      int dim,
                                                      const std::string& key) {
  std::vector<MixtureComponent> comps;
  for (const std::string& seg : split(text, ';')) {
    std::istringstream in(seg);
    std::vector<double> vals;
    double v = 0.0;
    while (in >> v) vals.push_back(v);
    if (!in.eof() || static_cast<int>(vals.size()) != dim + 2)
      throw ConfigError("key '" + key + "': each component needs " +
                        std::to_string(dim + 2) +
                        " numbers (weight, mean, std), got '" + seg + "'");
    MixtureComponent c;
    c.weight = vals.front();
    c.mean = Vector(dim);
    for (int i = 0; i < dim; ++i)
      c.mean[i] = vals[static_cast<std::size_t>(i) + 1];
    c.std = vals.back();
    comps.push_back(std::move(c));
  }
  if (comps.empty())
    throw ConfigError("key '" + key + "': no components given");
  return comps;
}

struct ExperimentSetup {
  std::string config_text;  // raw config bytes, hashed into manifests
  std::string experiment = "exp";
  std::vector<std::string> mode_names = {"flow", "smart"};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};

  int dim = 2;
  std::vector<MixtureComponent> task;  // empty until configured

  std::string reward_name;
  RewardParams reward_params;

  std::int64_t pretrain_steps = 4000;
  std::int64_t pretrain_batch = 256;
  double pretrain_lr = 1e-3;
  std::vector<int> hidden = {64, 64};
  std::uint64_t pretrain_seed = 0;
  double t_min = 0.025;
  std::int64_t pretrain_patience = 300;
  std::string checkpoint;  // empty -> <out>/<experiment>/pretrained.ckpt

  CemConfig cem;
  GrpoConfig grpo;
  int study_candidates = 100;
};

inline ExperimentSetup load_setup(const Config& cfg) {
  ExperimentSetup s;
  s.config_text = cfg.raw_text();
  s.experiment = cfg.get_string("run.experiment", s.experiment);
  s.mode_names = cfg.get_string_list("run.modes", s.mode_names);
  if (s.mode_names.empty()) throw ConfigError("run.modes: need at least one mode");
  for (const auto& m : s.mode_names) noise_source_from_string(m);  // validate
  const auto seed_ints = cfg.get_int_list("run.seeds", {1, 2, 3, 4, 5});
  if (seed_ints.empty()) throw ConfigError("run.seeds: need at least one seed");
  s.seeds.clear();
  for (const auto v : seed_ints) {
    if (v < 0) throw ConfigError("run.seeds: seeds must be non-negative");
    s.seeds.push_back(static_cast<std::uint64_t>(v));
  }

  s.dim = static_cast<int>(cfg.get_int("task.dim", s.dim));
  if (s.dim < 1) throw ConfigError("task.dim: must be at least 1");
  if (cfg.has("task.components"))
    s.task = parse_components(cfg.get_string("task.components", ""), s.dim,
                              "task.components");

  s.reward_name = cfg.get_string("reward.name", "");
  if (cfg.has("reward.components"))
    s.reward_params.components = parse_components(
        cfg.get_string("reward.components", ""), s.dim, "reward.components");
  if (cfg.has("reward.target"))
    s.reward_params.target =
        parse_vector(cfg.get_string("reward.target", ""), s.dim, "reward.target");
  if (cfg.has("reward.center"))
    s.reward_params.center =
        parse_vector(cfg.get_string("reward.center", ""), s.dim, "reward.center");
  s.reward_params.radius = cfg.get_double("reward.radius", s.reward_params.radius);
  s.reward_params.width = cfg.get_double("reward.width", s.reward_params.width);

  s.pretrain_steps = cfg.get_int("pretrain.steps", s.pretrain_steps);
  if (s.pretrain_steps < 0) throw ConfigError("pretrain.steps: must be >= 0");
  s.pretrain_batch = cfg.get_int("pretrain.batch", s.pretrain_batch);
  if (s.pretrain_batch < 1) throw ConfigError("pretrain.batch: must be positive");
  s.pretrain_lr = cfg.get_double("pretrain.lr", s.pretrain_lr);
  const auto hidden = cfg.get_int_list("pretrain.hidden", {64, 64});
  s.hidden.clear();
  for (const auto h : hidden) {
    if (h < 1) throw ConfigError("pretrain.hidden: layer widths must be positive");
    s.hidden.push_back(static_cast<int>(h));
  }
  s.pretrain_seed =
      static_cast<std::uint64_t>(cfg.get_int("pretrain.seed", 0));
  s.t_min = cfg.get_double("pretrain.t_min", s.t_min);
  if (!(s.t_min >= 0.0 && s.t_min < 1.0))
    throw ConfigError("pretrain.t_min: must lie in [0,1)");
  s.pretrain_patience = cfg.get_int("pretrain.patience", s.pretrain_patience);
  s.checkpoint = cfg.get_string("pretrain.checkpoint", "");

  s.cem.k = static_cast<int>(cfg.get_int("cem.k", s.cem.k));
  s.cem.n = static_cast<int>(cfg.get_int("cem.n", s.cem.n));
  s.cem.p = cfg.get_double("cem.p", s.cem.p);
  s.cem.sigma_floor = cfg.get_double("cem.sigma_floor", s.cem.sigma_floor);
  const std::string rmode = cfg.get_string("cem.return_mode", "mean");
  if (rmode == "mean") {
    s.cem.return_mode = ReturnMode::Mean;
  } else if (rmode == "sample") {
    s.cem.return_mode = ReturnMode::Sample;
  } else {
    throw ConfigError("cem.return_mode: expected 'mean' or 'sample', got '" +
                      rmode + "'");
  }
  try {
    elite_count(s.cem.k, s.cem.p);  // validates floor(p*k) >= 1
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("cem: ") + e.what());
  }

  s.grpo.group_size = static_cast<int>(cfg.get_int("grpo.group_size", s.grpo.group_size));
  s.grpo.clip_eps = cfg.get_double("grpo.clip_eps", s.grpo.clip_eps);
  s.grpo.kl_beta = cfg.get_double("grpo.kl_beta", s.grpo.kl_beta);
  s.grpo.lr = cfg.get_double("grpo.lr", s.grpo.lr);
  s.grpo.train_steps = static_cast<int>(cfg.get_int("grpo.train_steps", s.grpo.train_steps));
  s.grpo.eval_steps = static_cast<int>(cfg.get_int("grpo.eval_steps", s.grpo.eval_steps));
  s.grpo.timestep_fraction =
      cfg.get_double("grpo.timestep_fraction", s.grpo.timestep_fraction);
  s.grpo.smart_t_threshold =
      cfg.get_double("grpo.smart_t_threshold", s.grpo.smart_t_threshold);
  s.grpo.ema_decay = cfg.get_double("grpo.ema_decay", s.grpo.ema_decay);
  s.grpo.epochs = static_cast<int>(cfg.get_int("grpo.epochs", s.grpo.epochs));
  s.grpo.noise_level = cfg.get_double("grpo.noise_level", s.grpo.noise_level);
  s.grpo.sigma_schedule = sigma_schedule_from_string(
      cfg.get_string("grpo.sigma_schedule", "linear"));
  s.grpo.updates_per_epoch =
      static_cast<int>(cfg.get_int("grpo.updates_per_epoch", s.grpo.updates_per_epoch));
  s.grpo.divergence_margin =
      cfg.get_double("grpo.divergence_margin", s.grpo.divergence_margin);
  s.grpo.divergence_patience = static_cast<int>(
      cfg.get_int("grpo.divergence_patience", s.grpo.divergence_patience));
  s.grpo.eval_interval =
      static_cast<int>(cfg.get_int("grpo.eval_interval", s.grpo.eval_interval));
  s.grpo.eval_batch =
      static_cast<int>(cfg.get_int("grpo.eval_batch", s.grpo.eval_batch));
  s.grpo.one_shot_k =
      static_cast<int>(cfg.get_int("grpo.one_shot_k", s.grpo.one_shot_k));
  s.grpo.one_shot_t =
      static_cast<int>(cfg.get_int("grpo.one_shot_t", s.grpo.one_shot_t));
  try {
    validate_grpo(s.grpo);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  s.study_candidates =
      static_cast<int>(cfg.get_int("study.candidates", s.study_candidates));
  if (s.study_candidates < 2)
    throw ConfigError("study.candidates: need at least 2");
  return s;
}

inline Reward build_reward(const ExperimentSetup& s) {
  if (s.reward_name.empty())
    throw ConfigError("reward.name is required for this command");
  return registry_lookup(s.reward_name, s.reward_params);
}

inline const std::vector<MixtureComponent>& require_task(
    const ExperimentSetup& s) {
  if (s.task.empty())
    throw ConfigError("task.components is required for this command");
  return s.task;
}

// ---------------------------------------------------------------------------
// Paths and manifests
// ---------------------------------------------------------------------------

inline std::string default_out_root() {
  if (const char* env = std::getenv(kOutRootEnv); env && *env)
    return std::string(env);
  return "runs";
}

inline std::string experiment_dir(const ExperimentSetup& s,
                                  const std::string& out_root) {
  return out_root + "/" + s.experiment;
}

inline std::string checkpoint_path(const ExperimentSetup& s,
                                   const std::string& out_root) {
  if (!s.checkpoint.empty()) return s.checkpoint;
  return experiment_dir(s, out_root) + "/pretrained.ckpt";
}

inline std::string iso_utc_now() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return std::string(buf);
}

inline void write_manifest(
    const std::string& path,
    const std::vector<std::pair<std::string, std::string>>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& [k, v] : entries) out << k << " = " << v << '\n';
}

inline Mlp load_pretrained(const ExperimentSetup& s,
                           const std::string& out_root) {
  const std::string path = checkpoint_path(s, out_root);
  if (!std::filesystem::exists(path))
    throw MissingArtifact("pretrained checkpoint not found at '" + path +
                          "'; run the pretrain subcommand first");
  Mlp mlp = Mlp::load(path);
  if (mlp.input_dim() != s.dim)
    throw ConfigError("checkpoint at '" + path + "' has input dimension " +
                      std::to_string(mlp.input_dim()) +
                      " but task.dim is " + std::to_string(s.dim));
  return mlp;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct PretrainOutcome {
  Mlp model;
  std::vector<double> losses;  // one entry per optimization step
  bool plateaued = false;
};

// Minimize the flow-matching loss on the configured mixture task until the
// relative improvement stays below 1e-4 for a patience window, or the step
// budget runs out. Fully deterministic given pretrain.seed.
inline PretrainOutcome pretrain_flow(const ExperimentSetup& s) {
  const auto& task = require_task(s);
  std::vector<int> dims;
  dims.push_back(s.dim + 1);
  for (const int h : s.hidden) dims.push_back(h);
  dims.push_back(s.dim);
  PretrainOutcome out{Mlp(dims, s.pretrain_seed), {}, false};
  Mlp& mlp = out.model;
  Adam opt(mlp.n_params(), s.pretrain_lr);
  const Rng root(s.pretrain_seed);
  std::vector<double> grad;
  std::vector<FlowSample> batch(static_cast<std::size_t>(s.pretrain_batch));

  double best = std::numeric_limits<double>::infinity();
  std::int64_t stall = 0;
  for (std::int64_t step = 0; step < s.pretrain_steps; ++step) {
    Rng data = root.derive(stream::kData).derive(static_cast<std::uint64_t>(step));
    for (auto& sample : batch) {
      sample.x0 = sample_mixture(task, data);
      sample.x1 = Vector(s.dim);
      for (int i = 0; i < s.dim; ++i) sample.x1[i] = data.normal();
      sample.t = s.t_min + (1.0 - s.t_min) * data.uniform();
    }
    const double loss = fm_loss_grad(mlp, batch, grad);
    opt.step(mlp.params(), grad);
    out.losses.push_back(loss);
    if (loss < best - 1e-4 * std::abs(best)) {
      best = loss;
      stall = 0;
    } else {
      best = std::min(best, loss);
      if (++stall >= s.pretrain_patience) {
        out.plateaued = true;
        break;
      }
    }
  }
  return out;
}

inline void cmd_pretrain(const ExperimentSetup& s, const std::string& out_root) {
  const std::string started = iso_utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  const std::string exp_dir = experiment_dir(s, out_root);
  std::filesystem::create_directories(exp_dir);

  const PretrainOutcome out = pretrain_flow(s);
  {
    CsvWriter csv(exp_dir + "/pretrain_loss.csv", {"step", "loss"});
    for (std::size_t i = 0; i < out.losses.size(); ++i) {
      csv.row({format_int(static_cast<std::int64_t>(i)),
               format_double(out.losses[i])});
      csv.flush();
    }
  }
  const std::string ckpt = checkpoint_path(s, out_root);
  if (const auto parent = std::filesystem::path(ckpt).parent_path();
      !parent.empty())
    std::filesystem::create_directories(parent);
  out.model.save(ckpt);

  const auto wall = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
  write_manifest(exp_dir + "/pretrain_manifest.txt",
                 {{"command", "pretrain"},
                  {"config_hash", hex64(fnv1a64(s.config_text))},
                  {"seed", std::to_string(s.pretrain_seed)},
                  {"version", kVersion},
                  {"started", started},
                  {"finished", iso_utc_now()},
                  {"wall_ms", std::to_string(wall)},
                  {"steps_run", std::to_string(out.losses.size())},
                  {"plateaued", out.plateaued ? "1" : "0"},
                  {"final_loss", out.losses.empty()
                                     ? "nan"
                                     : format_double(out.losses.back())},
                  {"checkpoint", ckpt}});
}

// ---------------------------------------------------------------------------
// Training cells
// ---------------------------------------------------------------------------

struct CellSpec {
  std::string label;  // directory prefix, e.g. "smart" or "n3"
  NoiseSource source = NoiseSource::Smart;
  CemConfig cem;
  GrpoConfig grpo;  // seed filled per cell
};

struct CellResult {
  std::string label;
  std::uint64_t seed = 0;
  std::vector<MetricsRow> metrics;
  RewardBudget budget;
};

inline std::vector<std::string> metrics_header() {
  return {"epoch",          "phase", "mean_reward",      "std_reward", "loss",
          "kl",             "mean_sigma_trace", "smart_invocations", "wall_ms"};
}

inline std::vector<std::string> metrics_fields(const MetricsRow& r) {
  return {format_int(r.epoch),
          r.phase,
          format_double(r.mean_reward),
          format_double(r.std_reward),
          format_double(r.loss),
          format_double(r.kl),
          format_double(r.mean_sigma_trace),
          format_int(r.smart_invocations),
          format_int(r.wall_ms)};
}

inline CellResult run_cell(const ExperimentSetup& s, const Mlp& pretrained,
                           const CellSpec& spec, const std::string& exp_dir,
                           const std::string& command) {
  const std::string started = iso_utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  const std::string cell = spec.label + "_" + std::to_string(spec.grpo.seed);
  const std::string dir = exp_dir + "/" + cell;
  std::filesystem::create_directories(dir);

  const Reward reward = build_reward(s);
  CellResult result;
  result.label = spec.label;
  result.seed = spec.grpo.seed;

  CsvWriter csv(dir + "/metrics.csv", metrics_header());
  const MetricsSink sink = [&csv](const MetricsRow& row) {
    csv.row(metrics_fields(row));
    csv.flush();
  };
  TrainResult trained =
      train(pretrained, reward, spec.grpo, spec.cem, spec.source, sink);
  result.metrics = std::move(trained.metrics);
  result.budget = trained.budget;

  trained.policy.save(dir + "/policy.ckpt");
  trained.ema.save(dir + "/policy.ckpt.ema");

  const auto wall = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
  write_manifest(
      dir + "/manifest.txt",
      {{"command", command},
       {"cell", cell},
       {"config_hash", hex64(fnv1a64(s.config_text))},
       {"seed", std::to_string(spec.grpo.seed)},
       {"version", kVersion},
       {"started", started},
       {"finished", iso_utc_now()},
       {"wall_ms", std::to_string(wall)},
       {"reward_calls_search", std::to_string(result.budget.search_calls)},
       {"reward_calls_final", std::to_string(result.budget.final_calls)},
       {"reward_calls_train", std::to_string(result.budget.train_calls())},
       {"reward_calls_eval", std::to_string(result.budget.eval_calls)},
       {"search_invocations", std::to_string(result.budget.search_invocations)}});
  return result;
}

// Run one function per cell index on up to `threads` workers. Exceptions are
// re-thrown in cell order once all workers finish, so error reporting is
// deterministic regardless of scheduling.
template <typename Fn>
void run_parallel(std::size_t jobs, int threads, const Fn& fn) {
  if (threads < 1) threads = 1;
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(threads), jobs);
  std::vector<std::exception_ptr> errors(jobs);
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        while (true) {
          const std::size_t i = next.fetch_add(1);
          if (i >= jobs) return;
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Summary statistics over metrics rows
// ---------------------------------------------------------------------------

// Mean train reward over the final tenth of the epochs (at least one epoch).
inline double final_train_reward(const std::vector<MetricsRow>& rows,
                                 int epochs) {
  const int window = std::max(1, epochs / 10);
  double acc = 0.0;
  int n = 0;
  for (const auto& r : rows)
    if (r.phase == "train" && r.epoch >= epochs - window) {
      acc += r.mean_reward;
      ++n;
    }
  return n > 0 ? acc / n : std::numeric_limits<double>::quiet_NaN();
}

inline double final_eval_reward(const std::vector<MetricsRow>& rows) {
  double last = std::numeric_limits<double>::quiet_NaN();
  for (const auto& r : rows)
    if (r.phase == "eval") last = r.mean_reward;
  return last;
}

inline double best_eval_reward(const std::vector<MetricsRow>& rows) {
  double best = std::numeric_limits<double>::quiet_NaN();
  for (const auto& r : rows)
    if (r.phase == "eval" && !(best >= r.mean_reward)) best = r.mean_reward;
  return best;
}

// Eval rewards from the final fifth of the epochs; the stability statistic is
// the population std of these, pooled across seeds within an arm.
inline std::vector<double> late_eval_rewards(const std::vector<MetricsRow>& rows,
                                             int epochs) {
  const int cutoff = epochs - std::max(1, epochs / 5);
  std::vector<double> vals;
  for (const auto& r : rows)
    if (r.phase == "eval" && r.epoch >= cutoff) vals.push_back(r.mean_reward);
  return vals;
}

inline double population_std(const std::vector<double>& vals) {
  if (vals.empty()) return std::numeric_limits<double>::quiet_NaN();
  double mean = 0.0;
  for (const double v : vals) mean += v;
  mean /= static_cast<double>(vals.size());
  double var = 0.0;
  for (const double v : vals) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(vals.size()));
}

// Variance of the eval-reward curve over its second half; lower means a
// smoother curve.
inline double curve_variance(const std::vector<MetricsRow>& rows) {
  std::vector<double> evals;
  for (const auto& r : rows)
    if (r.phase == "eval") evals.push_back(r.mean_reward);
  if (evals.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const std::vector<double> tail(evals.begin() + static_cast<std::ptrdiff_t>(evals.size() / 2),
                                 evals.end());
  const double sd = population_std(tail);
  return sd * sd;
}

inline double mean_of(const std::vector<double>& vals) {
  if (vals.empty()) return std::numeric_limits<double>::quiet_NaN();
  double acc = 0.0;
  for (const double v : vals) acc += v;
  return acc / static_cast<double>(vals.size());
}

// ---------------------------------------------------------------------------
// Commands: train-rl, ablation, sensitivity
// ---------------------------------------------------------------------------

struct GridOutcome {
  std::vector<CellSpec> specs;      // one per cell, label + seed set
  std::vector<CellResult> results;  // same order
};

inline GridOutcome run_grid(const ExperimentSetup& s,
                            const std::vector<CellSpec>& arm_specs,
                            const std::string& out_root,
                            const std::string& command, int threads) {
  const std::string exp_dir = experiment_dir(s, out_root);
  std::filesystem::create_directories(exp_dir);
  const Mlp pretrained = load_pretrained(s, out_root);

  GridOutcome grid;
  for (const CellSpec& arm : arm_specs)
    for (const std::uint64_t seed : s.seeds) {
      CellSpec spec = arm;
      spec.grpo.seed = seed;
      grid.specs.push_back(std::move(spec));
    }
  grid.results.resize(grid.specs.size());
  run_parallel(grid.specs.size(), threads, [&](std::size_t i) {
    grid.results[i] = run_cell(s, pretrained, grid.specs[i], exp_dir, command);
  });
  return grid;
}

// Shared summary writer. Per-cell rows first, then one aggregate row per arm
// with seed column "mean". `extra` names an optional per-cell statistic; its
// aggregate is either the mean over seeds or a pooled value supplied by
// `pooled_extra`.
inline void write_summary(
    const std::string& path, const ExperimentSetup& s, const GridOutcome& grid,
    const std::vector<std::string>& arm_order, const std::string& extra = "",
    const std::function<double(const CellResult&)>& extra_fn = nullptr,
    const std::function<double(const std::vector<const CellResult*>&)>&
        pooled_extra = nullptr) {
  std::vector<std::string> header = {"mode", "seed", "final_train_reward",
                                     "final_eval_reward", "best_eval_reward"};
  if (!extra.empty()) header.push_back(extra);
  CsvWriter csv(path, header);

  for (std::size_t i = 0; i < grid.results.size(); ++i) {
    const CellResult& r = grid.results[i];
    std::vector<std::string> fields = {
        r.label, std::to_string(r.seed),
        format_double(final_train_reward(r.metrics, grid.specs[i].grpo.epochs)),
        format_double(final_eval_reward(r.metrics)),
        format_double(best_eval_reward(r.metrics))};
    if (!extra.empty()) fields.push_back(format_double(extra_fn(r)));
    csv.row(fields);
  }
  for (const std::string& arm : arm_order) {
    std::vector<const CellResult*> cells;
    std::vector<double> ftr, fer, ber, ext;
    for (std::size_t i = 0; i < grid.results.size(); ++i) {
      const CellResult& r = grid.results[i];
      if (r.label != arm) continue;
      cells.push_back(&r);
      ftr.push_back(final_train_reward(r.metrics, grid.specs[i].grpo.epochs));
      fer.push_back(final_eval_reward(r.metrics));
      ber.push_back(best_eval_reward(r.metrics));
      if (!extra.empty()) ext.push_back(extra_fn(r));
    }
    std::vector<std::string> fields = {arm, "mean", format_double(mean_of(ftr)),
                                       format_double(mean_of(fer)),
                                       format_double(mean_of(ber))};
    if (!extra.empty())
      fields.push_back(format_double(pooled_extra ? pooled_extra(cells)
                                                  : mean_of(ext)));
    csv.row(fields);
  }
  csv.flush();
}

inline GridOutcome cmd_train_rl(const ExperimentSetup& s,
                                const std::string& out_root, int threads) {
  std::vector<CellSpec> arms;
  for (const std::string& name : s.mode_names) {
    CellSpec spec;
    spec.label = name;
    spec.source = noise_source_from_string(name);
    spec.cem = s.cem;
    spec.grpo = s.grpo;
    arms.push_back(std::move(spec));
  }
  GridOutcome grid = run_grid(s, arms, out_root, "train-rl", threads);
  write_summary(experiment_dir(s, out_root) + "/summary.csv", s, grid,
                s.mode_names);
  return grid;
}

inline const std::vector<std::string>& ablation_arm_order() {
  static const std::vector<std::string> order = {"iterative", "oneshot",
                                                 "greedy", "randup"};
  return order;
}

// Four-cell strategy grid: iterative refinement pinned at N=5, K=5; one-round
// top-12-of-25 selection; greedy (reward-guided selection with the configured
// search geometry); and random-update selection as the control.
inline GridOutcome cmd_ablation(const ExperimentSetup& s,
                                const std::string& out_root, int threads) {
  std::vector<CellSpec> arms;
  {
    CellSpec it;
    it.label = "iterative";
    it.source = NoiseSource::Smart;
    it.cem = s.cem;
    it.cem.k = 5;
    it.cem.n = 5;
    it.grpo = s.grpo;
    arms.push_back(std::move(it));
  }
  {
    CellSpec os;
    os.label = "oneshot";
    os.source = NoiseSource::OneShot;
    os.cem = s.cem;
    os.grpo = s.grpo;
    arms.push_back(std::move(os));
  }
  {
    CellSpec gr;
    gr.label = "greedy";
    gr.source = NoiseSource::Smart;
    gr.cem = s.cem;
    gr.grpo = s.grpo;
    arms.push_back(std::move(gr));
  }
  {
    CellSpec ru;
    ru.label = "randup";
    ru.source = NoiseSource::RandomUpdate;
    ru.cem = s.cem;
    ru.grpo = s.grpo;
    arms.push_back(std::move(ru));
  }
  GridOutcome grid = run_grid(s, arms, out_root, "ablation", threads);

  const int epochs = s.grpo.epochs;
  write_summary(
      experiment_dir(s, out_root) + "/summary.csv", s, grid,
      ablation_arm_order(), "stability",
      [epochs](const CellResult& r) {
        return population_std(late_eval_rewards(r.metrics, epochs));
      },
      [epochs](const std::vector<const CellResult*>& cells) {
        std::vector<double> pooled;
        for (const CellResult* c : cells)
          for (const double v : late_eval_rewards(c->metrics, epochs))
            pooled.push_back(v);
        return population_std(pooled);
      });
  return grid;
}

inline const std::vector<std::string>& sensitivity_arm_order() {
  static const std::vector<std::string> order = {"n1", "n3", "n5"};
  return order;
}

// Three reward-guided arms differing only in search iterations N in {1,3,5}.
// Aggregate rows are ordered by mean final eval reward (best first); the
// curve_variance column carries the smoothness ordering.
inline GridOutcome cmd_sensitivity(const ExperimentSetup& s,
                                   const std::string& out_root, int threads) {
  std::vector<CellSpec> arms;
  for (const int n : {1, 3, 5}) {
    CellSpec spec;
    spec.label = "n" + std::to_string(n);
    spec.source = NoiseSource::Smart;
    spec.cem = s.cem;
    spec.cem.n = n;
    spec.grpo = s.grpo;
    arms.push_back(std::move(spec));
  }
  GridOutcome grid = run_grid(s, arms, out_root, "sensitivity", threads);

  std::vector<std::string> order = sensitivity_arm_order();
  std::vector<double> arm_final(order.size(), 0.0);
  for (std::size_t a = 0; a < order.size(); ++a) {
    std::vector<double> vals;
    for (const CellResult& r : grid.results)
      if (r.label == order[a]) vals.push_back(final_eval_reward(r.metrics));
    arm_final[a] = mean_of(vals);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](const std::string& x, const std::string& y) {
                     const auto ix = std::find(sensitivity_arm_order().begin(),
                                               sensitivity_arm_order().end(), x) -
                                     sensitivity_arm_order().begin();
                     const auto iy = std::find(sensitivity_arm_order().begin(),
                                               sensitivity_arm_order().end(), y) -
                                     sensitivity_arm_order().begin();
                     return arm_final[static_cast<std::size_t>(ix)] >
                            arm_final[static_cast<std::size_t>(iy)];
                   });
  write_summary(experiment_dir(s, out_root) + "/summary.csv", s, grid, order,
                "curve_variance",
                [](const CellResult& r) { return curve_variance(r.metrics); });
  return grid;
}

// ---------------------------------------------------------------------------
// Decode study
// ---------------------------------------------------------------------------

// Average tied ranks (1-based), then Pearson correlation of the rank vectors.
inline std::vector<double> average_ranks(const std::vector<double>& vals) {
  const std::size_t n = vals.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && vals[order[j + 1]] == vals[order[i]]) ++j;
    const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(const std::vector<double>& a,
                       const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw std::invalid_argument("spearman: need two equal-length series");
  const std::vector<double> ra = average_ranks(a);
  const std::vector<double> rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

struct DecodeStudyRow {
  std::uint64_t seed = 0;
  double t = 0.0;
  double decode_error = 0.0;
  double reward_rank_corr = 0.0;
};

// For each seed: integrate one trajectory down from t=1 with eval_steps Euler
// steps; at every grid time, spray candidate perturbations, and compare the
// one-step decode of each perturbed state against continuing the full Euler
// integration from it — both the mean distance and the Spearman correlation
// of the two reward rankings.
template <typename Field>
std::vector<DecodeStudyRow> decode_study(const Field& field,
                                         const Reward& reward,
                                         const ExperimentSetup& s) {
  const int steps = s.grpo.eval_steps;
  const double dt = -1.0 / static_cast<double>(steps);
  std::vector<DecodeStudyRow> rows;
  for (const std::uint64_t seed : s.seeds) {
    Rng rng = Rng(seed).derive(stream::kStudy);
    Vector x(s.dim);
    for (int i = 0; i < s.dim; ++i) x[i] = rng.normal();
    for (int k = 0; k < steps; ++k) {
      const double t = 1.0 + static_cast<double>(k) * dt;
      const double t_after = std::max(0.0, t + dt);
      const double sig = sigma_at(s.grpo.sigma_schedule, s.grpo.noise_level, t);
      PerturbationContext ctx{x, t, dt, sig};
      const NoiseDistribution std_dist = NoiseDistribution::standard(s.dim);
      const std::vector<Vector> cands =
          sample_candidates(std_dist, s.study_candidates, rng);
      double err = 0.0;
      std::vector<double> one_step_rewards, full_rewards;
      for (const Vector& m : cands) {
        const Vector z = perturb(ctx, m);
        const Vector decoded = one_step_decode(field, z, t_after);
        Vector full = z;
        for (int j = k + 1; j < steps; ++j) {
          const double tj = 1.0 + static_cast<double>(j) * dt;
          full += dt * field(full, tj);
        }
        err += (decoded - full).norm();
        one_step_rewards.push_back(reward(decoded));
        full_rewards.push_back(reward(full));
      }
      DecodeStudyRow row;
      row.seed = seed;
      row.t = t;
      row.decode_error = err / static_cast<double>(cands.size());
      row.reward_rank_corr = spearman(one_step_rewards, full_rewards);
      rows.push_back(row);
      x += dt * field(x, t);
    }
  }
  return rows;
}

inline std::vector<DecodeStudyRow> cmd_decode_study(
    const ExperimentSetup& s, const std::string& out_root) {
  const std::string started = iso_utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  const std::string exp_dir = experiment_dir(s, out_root);
  std::filesystem::create_directories(exp_dir);
  const Mlp field = load_pretrained(s, out_root);
  const Reward reward = build_reward(s);

  const std::vector<DecodeStudyRow> rows = decode_study(field, reward, s);
  {
    CsvWriter csv(exp_dir + "/decode_study.csv",
                  {"seed", "t", "decode_error", "reward_rank_corr"});
    for (const auto& r : rows)
      csv.row({std::to_string(r.seed), format_double(r.t),
               format_double(r.decode_error),
               format_double(r.reward_rank_corr)});
  }
  const auto wall = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
  write_manifest(exp_dir + "/decode_study_manifest.txt",
                 {{"command", "decode-study"},
                  {"config_hash", hex64(fnv1a64(s.config_text))},
                  {"version", kVersion},
                  {"started", started},
                  {"finished", iso_utc_now()},
                  {"wall_ms", std::to_string(wall)}});
  return rows;
}

// ---------------------------------------------------------------------------
// Plot data export
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& plot_metric_columns() {
  static const std::vector<std::string> cols = {
      "mean_reward", "std_reward", "loss", "kl", "mean_sigma_trace"};
  return cols;
}

// Merge every <arm>_<seed>/metrics.csv under the experiment directory into
// one long-format table: mode, seed, epoch, metric, value. Values are copied
// byte-for-byte from the source CSVs, so the export round-trips exactly and
// rerunning it is idempotent.
inline std::string cmd_plotdata(const ExperimentSetup& s,
                                const std::string& out_root) {
  const std::string exp_dir = experiment_dir(s, out_root);
  if (!std::filesystem::is_directory(exp_dir))
    throw MissingArtifact("experiment directory not found: " + exp_dir);

  struct Cell {
    std::string mode;
    std::int64_t seed;
    std::string path;
  };
  std::vector<Cell> cells;
  for (const auto& entry : std::filesystem::directory_iterator(exp_dir)) {
    if (!entry.is_directory()) continue;
    const std::string name = entry.path().filename().string();
    const auto us = name.rfind('_');
    if (us == std::string::npos || us == 0 || us + 1 >= name.size()) continue;
    const std::string metrics = entry.path().string() + "/metrics.csv";
    if (!std::filesystem::exists(metrics)) continue;
    Cell cell;
    cell.mode = name.substr(0, us);
    try {
      cell.seed = parse_int(name.substr(us + 1));
    } catch (const std::exception&) {
      continue;  // not a <mode>_<seed> cell directory
    }
    cell.path = metrics;
    cells.push_back(std::move(cell));
  }
  if (cells.empty())
    throw MissingArtifact("no <mode>_<seed>/metrics.csv cells under " + exp_dir);
  std::sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) {
    return a.mode != b.mode ? a.mode < b.mode : a.seed < b.seed;
  });

  const std::string out_path = exp_dir + "/plot_data.csv";
  CsvWriter csv(out_path, {"mode", "seed", "epoch", "metric", "value"});
  for (const Cell& cell : cells) {
    const CsvTable table = read_csv(cell.path);
    const auto expected = metrics_header();
    if (table.header != expected)
      throw ConfigError(cell.path + ":1: unexpected metrics header");
    const std::size_t epoch_col = table.column("epoch");
    const std::size_t phase_col = table.column("phase");
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
      const auto& row = table.rows[r];
      if (row.size() != expected.size())
        throw ConfigError(cell.path + ":" + std::to_string(r + 2) +
                          ": expected " + std::to_string(expected.size()) +
                          " fields, got " + std::to_string(row.size()));
      for (const std::string& metric : plot_metric_columns()) {
        const std::size_t col = table.column(metric);
        csv.row({cell.mode, std::to_string(cell.seed), row[epoch_col],
                 row[phase_col] + "." + metric, row[col]});
      }
    }
  }
  csv.flush();
  return out_path;
}

}  // namespace flowrl
