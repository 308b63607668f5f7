// Run configuration: flat key=value text with dotted sections.
//
// Keys follow the hyper-parameter vocabulary of the training recipe
// (eps_lb/eps_ub clip bounds, clip_ratio_c dual-clip floor, lambda and
// omega_lb/omega_ub for covariance clipping, N_D/N_D_R buffer sizes,
// T_warmup/T_decay curriculum lengths, n_samples_per_prompt group size).
// Unknown keys are rejected with a nearest-key suggestion; every bound is
// validated with a message naming the key.
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "spear/errors.hpp"

namespace spear {

enum class Algorithm { kGrpo, kDrbot, kSpear };

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kGrpo: return "grpo";
    case Algorithm::kDrbot: return "drbot";
    case Algorithm::kSpear: return "spear";
  }
  return "?";
}

inline Algorithm parse_algorithm(const std::string& s) {
  if (s == "grpo") return Algorithm::kGrpo;
  if (s == "drbot") return Algorithm::kDrbot;
  if (s == "spear") return Algorithm::kSpear;
  throw ConfigError("algorithm: expected grpo, drbot or spear, got '" + s + "'");
}

struct TrainConfig {
  Algorithm algorithm = Algorithm::kSpear;

  std::string env_name = "calcchain";
  std::uint64_t env_seed_lo = 0;
  std::uint64_t env_seed_hi = 99;
  int env_max_turns = 0;  // 0 = environment default

  std::uint64_t seed = 0;
  int num_steps = 100;
  int train_batch_size = 16;
  int n_samples_per_prompt = 8;  // G
  int ppo_mini_batch_size = 0;   // trajectories per mini-batch; 0 = full batch
  double actor_learning_rate = 0.5;

  double eps_lb = 0.2;
  double eps_ub = 0.28;
  double clip_ratio_c = 10.0;  // dual-clip floor C
  double beta = 0.0;           // KL weight; kept for the schema, never in the loss

  double lambda = 0.02;  // covariance clip ratio
  double omega_lb = 1.0;
  double omega_ub = 40.0;
  double omega_calib_lb_pct = 20.0;  // top-% window for calibrating omega_lb
  double omega_calib_ub_pct = 0.02;  // top-% window for calibrating omega_ub

  double rollout_filter_ratio = 0.75;
  int N_D = 256;     // replay buffer size
  int N_D_R = 1024;  // baseline buffer size
  double baseline_percentile = 50.0;

  int T_warmup = 100;
  int T_decay = 200;
  int max_response_turns = 0;  // 0 = env_max_turns

  // Absent -> variant default (grpo on, drbot/spear off).
  std::optional<bool> norm_adv_by_std_in_grpo;
};

// Which trainer features a variant enables. grpo is the plain objective with
// std normalization and a symmetric clip; drbot adds the bag of tricks;
// spear adds self-imitation and both curricula on top of drbot.
struct VariantGates {
  bool normalize_by_std = false;
  double eps_lb = 0.2;
  double eps_ub = 0.28;
  bool dual_clip = true;
  bool length_normalize = false;      // divide a trajectory's token sum by its length
  bool filter_void_overlong = true;
  double group_filter_ratio = 0.75;
  bool use_replay = false;            // SIL machinery incl. covariance clipping
  bool use_intrinsic_reward = false;  // mu-scheduled tool-call reward
};

inline VariantGates derive_gates(const TrainConfig& cfg) {
  VariantGates g;
  switch (cfg.algorithm) {
    case Algorithm::kGrpo:
      g.normalize_by_std = cfg.norm_adv_by_std_in_grpo.value_or(true);
      g.eps_lb = cfg.eps_lb;
      g.eps_ub = cfg.eps_lb;  // symmetric clip
      g.dual_clip = false;
      g.length_normalize = true;
      g.filter_void_overlong = false;
      g.group_filter_ratio = 1.0;
      g.use_replay = false;
      g.use_intrinsic_reward = false;
      break;
    case Algorithm::kDrbot:
    case Algorithm::kSpear:
      g.normalize_by_std = cfg.norm_adv_by_std_in_grpo.value_or(false);
      g.eps_lb = cfg.eps_lb;
      g.eps_ub = cfg.eps_ub;
      g.dual_clip = true;
      g.length_normalize = false;
      g.filter_void_overlong = true;
      g.group_filter_ratio = cfg.rollout_filter_ratio;
      g.use_replay = cfg.algorithm == Algorithm::kSpear;
      g.use_intrinsic_reward = cfg.algorithm == Algorithm::kSpear;
      break;
  }
  return g;
}

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline int edit_distance(const std::string& a, const std::string& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j) {
      int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + value + "'");
  }
}

inline std::int64_t parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    std::int64_t v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an integer, got '" + value + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    std::uint64_t v = std::stoull(value, &pos);
    if (pos != value.size() || value.find('-') != std::string::npos)
      throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + value + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

}  // namespace detail

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "algorithm", "env.name", "env.seed_lo", "env.seed_hi", "env.max_turns", "seed",
      "num_steps", "train_batch_size", "n_samples_per_prompt", "ppo_mini_batch_size",
      "actor_learning_rate", "eps_lb", "eps_ub", "clip_ratio_c", "beta", "lambda",
      "omega_lb", "omega_ub", "omega_calib_lb_pct", "omega_calib_ub_pct",
      "rollout_filter_ratio", "N_D", "N_D_R", "baseline_percentile", "T_warmup", "T_decay",
      "max_response_turns", "norm_adv_by_std_in_grpo"};
  return keys;
}

inline void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "algorithm") cfg.algorithm = parse_algorithm(value);
  else if (key == "env.name") cfg.env_name = value;
  else if (key == "env.seed_lo") cfg.env_seed_lo = parse_uint(key, value);
  else if (key == "env.seed_hi") cfg.env_seed_hi = parse_uint(key, value);
  else if (key == "env.max_turns") cfg.env_max_turns = static_cast<int>(parse_int(key, value));
  else if (key == "seed") cfg.seed = parse_uint(key, value);
  else if (key == "num_steps") cfg.num_steps = static_cast<int>(parse_int(key, value));
  else if (key == "train_batch_size") cfg.train_batch_size = static_cast<int>(parse_int(key, value));
  else if (key == "n_samples_per_prompt") cfg.n_samples_per_prompt = static_cast<int>(parse_int(key, value));
  else if (key == "ppo_mini_batch_size") cfg.ppo_mini_batch_size = static_cast<int>(parse_int(key, value));
  else if (key == "actor_learning_rate") cfg.actor_learning_rate = parse_double(key, value);
  else if (key == "eps_lb") cfg.eps_lb = parse_double(key, value);
  else if (key == "eps_ub") cfg.eps_ub = parse_double(key, value);
  else if (key == "clip_ratio_c") cfg.clip_ratio_c = parse_double(key, value);
  else if (key == "beta") cfg.beta = parse_double(key, value);
  else if (key == "lambda") cfg.lambda = parse_double(key, value);
  else if (key == "omega_lb") cfg.omega_lb = parse_double(key, value);
  else if (key == "omega_ub") cfg.omega_ub = parse_double(key, value);
  else if (key == "omega_calib_lb_pct") cfg.omega_calib_lb_pct = parse_double(key, value);
  else if (key == "omega_calib_ub_pct") cfg.omega_calib_ub_pct = parse_double(key, value);
  else if (key == "rollout_filter_ratio") cfg.rollout_filter_ratio = parse_double(key, value);
  else if (key == "N_D") cfg.N_D = static_cast<int>(parse_int(key, value));
  else if (key == "N_D_R") cfg.N_D_R = static_cast<int>(parse_int(key, value));
  else if (key == "baseline_percentile") cfg.baseline_percentile = parse_double(key, value);
  else if (key == "T_warmup") cfg.T_warmup = static_cast<int>(parse_int(key, value));
  else if (key == "T_decay") cfg.T_decay = static_cast<int>(parse_int(key, value));
  else if (key == "max_response_turns") cfg.max_response_turns = static_cast<int>(parse_int(key, value));
  else if (key == "norm_adv_by_std_in_grpo") cfg.norm_adv_by_std_in_grpo = parse_bool(key, value);
  else {
    int best = 1 << 20;
    std::string suggestion;
    for (const std::string& k : config_keys()) {
      int d = detail::edit_distance(key, k);
      if (d < best) {
        best = d;
        suggestion = k;
      }
    }
    throw ConfigError("unknown config key '" + key + "'; did you mean '" + suggestion + "'?");
  }
}

inline void validate_config(const TrainConfig& cfg) {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (cfg.env_name != "calcchain" && cfg.env_name != "keydoor")
    fail("env.name: expected calcchain or keydoor, got '" + cfg.env_name + "'");
  if (cfg.env_seed_lo > cfg.env_seed_hi) fail("env.seed_lo must be <= env.seed_hi");
  if (cfg.env_max_turns < 0) fail("env.max_turns must be >= 0 (0 = environment default)");
  if (cfg.num_steps < 1) fail("num_steps must be >= 1");
  if (cfg.train_batch_size < 1) fail("train_batch_size must be >= 1");
  if (cfg.n_samples_per_prompt < 2) fail("n_samples_per_prompt must be >= 2");
  if (cfg.ppo_mini_batch_size < 0) fail("ppo_mini_batch_size must be >= 0 (0 = full batch)");
  if (!(cfg.actor_learning_rate > 0.0)) fail("actor_learning_rate must be > 0");
  if (!(cfg.eps_lb > 0.0)) fail("eps_lb must be > 0");
  if (!(cfg.eps_lb <= cfg.eps_ub)) fail("eps_lb must be <= eps_ub");
  if (!(cfg.clip_ratio_c > 1.0 + cfg.eps_ub)) fail("clip_ratio_c must be > 1 + eps_ub");
  if (!(cfg.beta >= 0.0)) fail("beta must be >= 0");
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) fail("lambda must lie in [0, 1]");
  if (!(cfg.omega_lb <= cfg.omega_ub)) fail("omega_lb must be <= omega_ub");
  if (!(cfg.omega_calib_lb_pct > 0.0 && cfg.omega_calib_lb_pct <= 100.0))
    fail("omega_calib_lb_pct must lie in (0, 100]");
  if (!(cfg.omega_calib_ub_pct > 0.0 && cfg.omega_calib_ub_pct <= 100.0))
    fail("omega_calib_ub_pct must lie in (0, 100]");
  if (!(cfg.rollout_filter_ratio > 0.0 && cfg.rollout_filter_ratio <= 1.0))
    fail("rollout_filter_ratio must lie in (0, 1]");
  if (cfg.N_D < 1) fail("N_D must be >= 1");
  if (cfg.N_D_R < 1) fail("N_D_R must be >= 1");
  if (!(cfg.baseline_percentile > 0.0 && cfg.baseline_percentile <= 100.0))
    fail("baseline_percentile must lie in (0, 100]");
  if (cfg.T_warmup < 1) fail("T_warmup must be >= 1");
  if (cfg.T_decay < 1) fail("T_decay must be >= 1");
  if (cfg.max_response_turns < 0) fail("max_response_turns must be >= 0 (0 = env.max_turns)");
}

inline TrainConfig parse_config_text(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": empty key or value");
    apply_config_entry(cfg, key, value);
  }
  validate_config(cfg);
  return cfg;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

// Canonical echo of every effective value, parseable by load_config. The
// std-normalization flag is echoed at its variant-resolved value.
inline std::string echo_config(const TrainConfig& cfg) {
  using detail::format_double;
  std::ostringstream os;
  os << "algorithm = " << to_string(cfg.algorithm) << "\n";
  os << "env.name = " << cfg.env_name << "\n";
  os << "env.seed_lo = " << cfg.env_seed_lo << "\n";
  os << "env.seed_hi = " << cfg.env_seed_hi << "\n";
  os << "env.max_turns = " << cfg.env_max_turns << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "num_steps = " << cfg.num_steps << "\n";
  os << "train_batch_size = " << cfg.train_batch_size << "\n";
  os << "n_samples_per_prompt = " << cfg.n_samples_per_prompt << "\n";
  os << "ppo_mini_batch_size = " << cfg.ppo_mini_batch_size << "\n";
  os << "actor_learning_rate = " << format_double(cfg.actor_learning_rate) << "\n";
  os << "eps_lb = " << format_double(cfg.eps_lb) << "\n";
  os << "eps_ub = " << format_double(cfg.eps_ub) << "\n";
  os << "clip_ratio_c = " << format_double(cfg.clip_ratio_c) << "\n";
  os << "beta = " << format_double(cfg.beta) << "\n";
  os << "lambda = " << format_double(cfg.lambda) << "\n";
  os << "omega_lb = " << format_double(cfg.omega_lb) << "\n";
  os << "omega_ub = " << format_double(cfg.omega_ub) << "\n";
  os << "omega_calib_lb_pct = " << format_double(cfg.omega_calib_lb_pct) << "\n";
  os << "omega_calib_ub_pct = " << format_double(cfg.omega_calib_ub_pct) << "\n";
  os << "rollout_filter_ratio = " << format_double(cfg.rollout_filter_ratio) << "\n";
  os << "N_D = " << cfg.N_D << "\n";
  os << "N_D_R = " << cfg.N_D_R << "\n";
  os << "baseline_percentile = " << format_double(cfg.baseline_percentile) << "\n";
  os << "T_warmup = " << cfg.T_warmup << "\n";
  os << "T_decay = " << cfg.T_decay << "\n";
  os << "max_response_turns = " << cfg.max_response_turns << "\n";
  os << "norm_adv_by_std_in_grpo = "
     << (derive_gates(cfg).normalize_by_std ? "true" : "false") << "\n";
  return os.str();
}

// FNV-1a over the canonical echo; recorded in checkpoints and manifests.
inline std::uint64_t config_hash(const TrainConfig& cfg) {
  std::string echo = echo_config(cfg);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : echo) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace spear
