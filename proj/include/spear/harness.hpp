// Experiment harness: deterministic training runs, greedy evaluation,
// multi-variant comparison tables, and omega calibration.
//
// A run directory contains:
//   manifest.json    -- config snapshot, seed, variant, version, start time
//   config_echo.cfg  -- canonical effective config, reloadable
//   metrics.jsonl    -- one deterministic record per step
//   timing.jsonl     -- wall_ms per step (not reproducible, kept separate)
//   checkpoint.bin   -- final policy
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spear/checkpoint.hpp"
#include "spear/config.hpp"
#include "spear/env.hpp"
#include "spear/errors.hpp"
#include "spear/metrics.hpp"
#include "spear/trainer.hpp"

namespace spear {

inline constexpr const char* kSpearVersion = "0.1.0";

struct RunManifest {
  TrainConfig config;
  std::string out_dir;
};

struct RunResult {
  int steps_run = 0;
  std::filesystem::path checkpoint_path;
  std::filesystem::path metrics_path;
  std::vector<double> success_rate_series;
};

inline std::string iso_timestamp() {
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline RunResult run_train(const RunManifest& manifest) {
  const TrainConfig& cfg = manifest.config;
  validate_config(cfg);
  std::filesystem::path dir(manifest.out_dir);
  std::filesystem::create_directories(dir);

  auto env = make_environment(cfg.env_name, cfg.env_max_turns);

  {
    nlohmann::json j{{"algorithm", to_string(cfg.algorithm)},
                     {"config_hash", config_hash(cfg)},
                     {"env_name", cfg.env_name},
                     {"seed", cfg.seed},
                     {"start_time", iso_timestamp()},
                     {"version", kSpearVersion}};
    std::ofstream(dir / "manifest.json") << j.dump(2) << "\n";
  }
  std::ofstream(dir / "config_echo.cfg") << echo_config(cfg);

  std::ofstream metrics(dir / "metrics.jsonl");
  std::ofstream timing(dir / "timing.jsonl");
  if (!metrics || !timing) throw ContractViolation("cannot open output files in " + manifest.out_dir);

  Trainer trainer(*env, cfg);
  RunResult result;
  for (int t = 0; t < cfg.num_steps; ++t) {
    MetricsRecord rec = trainer.train_step();
    write_metrics_line(metrics, rec);
    write_timing_line(timing, rec);
    result.success_rate_series.push_back(rec.success_rate);
    ++result.steps_run;
  }

  Checkpoint ckpt;
  ckpt.env_name = cfg.env_name;
  ckpt.config_hash = config_hash(cfg);
  ckpt.params = trainer.params();
  result.checkpoint_path = dir / "checkpoint.bin";
  result.metrics_path = dir / "metrics.jsonl";
  save_checkpoint(result.checkpoint_path.string(), ckpt);
  return result;
}

// ---------------------------------------------------------------------------
// Greedy evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double success_rate = 0.0;
  double mean_turns = 0.0;
  int episodes = 0;
};

inline int greedy_action(const PolicyParams& params, int state_index) {
  std::span<const double> row = params.row(state_index);
  int best = 0;
  for (int a = 1; a < static_cast<int>(row.size()); ++a)
    if (row[a] > row[best]) best = a;  // ties resolve to the lowest index
  return best;
}

inline EvalResult run_eval(const Checkpoint& ckpt, const Environment& env,
                           const std::vector<std::uint64_t>& seeds) {
  if (ckpt.params.state_count != env.state_count() ||
      ckpt.params.action_count != env.action_count())
    throw ContractViolation(
        "checkpoint does not match environment: expected " + std::to_string(env.state_count()) +
        "x" + std::to_string(env.action_count()) + " logits, found " +
        std::to_string(ckpt.params.state_count) + "x" + std::to_string(ckpt.params.action_count));
  EvalResult res;
  std::int64_t turns_total = 0;
  for (std::uint64_t seed : seeds) {
    EpisodeSpec spec{std::string(env.name()), seed, env.max_turns()};
    EnvState state = env.reset(spec);
    int turns = 0;
    while (true) {
      StepOutcome out = env.step(state, ActionId{greedy_action(ckpt.params, state.state_index)});
      ++turns;
      state = out.next_state;
      if (out.done) {
        res.success_rate += out.success ? 1.0 : 0.0;
        break;
      }
    }
    turns_total += turns;
    ++res.episodes;
  }
  if (res.episodes > 0) {
    res.success_rate /= res.episodes;
    res.mean_turns = static_cast<double>(turns_total) / res.episodes;
  }
  return res;
}

inline std::vector<std::uint64_t> seed_range(std::uint64_t lo, std::uint64_t hi) {
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = lo; s <= hi; ++s) {
    seeds.push_back(s);
    if (s == hi) break;  // guard hi == UINT64_MAX
  }
  return seeds;
}

// ---------------------------------------------------------------------------
// Variant comparison
// ---------------------------------------------------------------------------

struct CompareCell {
  std::uint64_t seed = 0;
  bool failed = false;
  double final_success = 0.0;
};

struct CompareRow {
  std::string variant;
  std::vector<CompareCell> cells;
  double median_final_success = 0.0;
  std::vector<double> success_series_median;  // per-step median across seeds
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<CompareRow> run_compare(const TrainConfig& base,
                                           const std::vector<std::string>& variants,
                                           const std::vector<std::uint64_t>& seeds,
                                           const std::string& out_dir) {
  if (variants.empty() || seeds.empty())
    throw ContractViolation("run_compare needs at least one variant and one seed");
  std::vector<std::string> ordered = variants;
  std::sort(ordered.begin(), ordered.end());

  std::vector<CompareRow> rows;
  for (const std::string& variant : ordered) {
    CompareRow row;
    row.variant = variant;
    std::vector<std::vector<double>> series_per_seed;
    for (std::uint64_t seed : seeds) {
      CompareCell cell;
      cell.seed = seed;
      TrainConfig cfg = base;
      cfg.algorithm = parse_algorithm(variant);
      cfg.seed = seed;
      std::string run_dir = out_dir + "/" + variant + "-seed" + std::to_string(seed);
      try {
        RunResult run = run_train({cfg, run_dir});
        auto env = make_environment(cfg.env_name, cfg.env_max_turns);
        Checkpoint ckpt = load_checkpoint(run.checkpoint_path.string());
        EvalResult eval = run_eval(ckpt, *env, seed_range(cfg.env_seed_lo, cfg.env_seed_hi));
        cell.final_success = eval.success_rate;
        series_per_seed.push_back(run.success_rate_series);
      } catch (const std::exception&) {
        cell.failed = true;
      }
      row.cells.push_back(cell);
    }
    std::vector<double> finals;
    for (const CompareCell& c : row.cells)
      if (!c.failed) finals.push_back(c.final_success);
    row.median_final_success = median_of(finals);
    if (!series_per_seed.empty()) {
      std::size_t steps = series_per_seed.front().size();
      for (std::size_t t = 0; t < steps; ++t) {
        std::vector<double> at_t;
        for (const auto& s : series_per_seed)
          if (t < s.size()) at_t.push_back(s[t]);
        row.success_series_median.push_back(median_of(at_t));
      }
    }
    rows.push_back(std::move(row));
  }

  std::filesystem::create_directories(out_dir);
  nlohmann::json summary = nlohmann::json::array();
  for (const CompareRow& row : rows) {
    nlohmann::json cells = nlohmann::json::array();
    for (const CompareCell& c : row.cells)
      cells.push_back({{"seed", c.seed},
                       {"failed", c.failed},
                       {"final_success", c.final_success}});
    summary.push_back({{"variant", row.variant},
                       {"median_final_success", row.median_final_success},
                       {"per_seed", cells},
                       {"success_series_median", row.success_series_median}});
  }
  std::ofstream(std::filesystem::path(out_dir) / "summary.json") << summary.dump(2) << "\n";

  std::ostringstream table;
  table << std::left << std::setw(10) << "variant" << std::right << std::setw(10) << "median";
  for (std::uint64_t seed : seeds) table << std::setw(12) << ("seed" + std::to_string(seed));
  table << "\n";
  for (const CompareRow& row : rows) {
    table << std::left << std::setw(10) << row.variant << std::right << std::setw(10)
          << std::fixed << std::setprecision(3) << row.median_final_success;
    for (const CompareCell& c : row.cells) {
      if (c.failed)
        table << std::setw(12) << "failed";
      else
        table << std::setw(12) << std::fixed << std::setprecision(3) << c.final_success;
    }
    table << "\n";
  }
  std::ofstream(std::filesystem::path(out_dir) / "summary.txt") << table.str();
  return rows;
}

// ---------------------------------------------------------------------------
// Omega calibration
// ---------------------------------------------------------------------------

// Mean of the top-percent window of the covariances, rounded to an integer.
// Window size is ceil(pct/100 * n), at least 1.
inline double top_window_mean(std::vector<double> covariances, double pct) {
  std::sort(covariances.begin(), covariances.end(), std::greater<double>());
  std::size_t k = static_cast<std::size_t>(
      std::ceil(pct / 100.0 * static_cast<double>(covariances.size())));
  k = std::clamp<std::size_t>(k, 1, covariances.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) sum += covariances[i];
  return static_cast<double>(std::llround(sum / static_cast<double>(k)));
}

struct OmegaCalibration {
  double omega_lb = 0.0;
  double omega_ub = 0.0;
};

// Measures token covariances on one rollout batch at the starting policy
// (uniform, or a checkpoint when continuing) and derives the clip band from
// the configured top-percentile windows. Declines when every covariance is
// zero, which is always the case for an exactly uniform policy.
inline std::optional<OmegaCalibration> calibrate_omega(const TrainConfig& cfg,
                                                       const PolicyParams* start_params = nullptr) {
  validate_config(cfg);
  auto env = make_environment(cfg.env_name, cfg.env_max_turns);
  Trainer trainer(*env, cfg);
  if (start_params) {
    if (start_params->state_count != env->state_count() ||
        start_params->action_count != env->action_count())
      throw ContractViolation("calibration start params do not match the environment");
    trainer.mutable_params() = *start_params;
  }
  const VariantGates gates = derive_gates(cfg);
  const double mu0 = gates.use_intrinsic_reward ? mu_schedule(0, cfg.T_decay) : 0.0;
  PolicySnapshot snap = snapshot(trainer.params());
  std::vector<GroupBatch> groups = trainer.rollout_batch(snap, 0, mu0);
  StepInfo info;
  trainer.prepare_groups(groups, info);

  std::vector<double> lps, advs;
  for (const GroupBatch& group : groups) {
    for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
      const Trajectory& traj = group.trajectories[i];
      if (traj.fully_masked()) continue;
      for (const Turn& t : traj.turns) {
        lps.push_back(log_prob(snap, t.state_index, t.action_index));
        advs.push_back(group.advantages[i]);
      }
    }
  }
  std::vector<double> cov = token_covariance(lps, advs);
  bool all_zero = true;
  for (double c : cov)
    if (c != 0.0) all_zero = false;
  if (cov.empty() || all_zero) return std::nullopt;
  return OmegaCalibration{top_window_mean(cov, cfg.omega_calib_lb_pct),
                          top_window_mean(cov, cfg.omega_calib_ub_pct)};
}

}  // namespace spear
