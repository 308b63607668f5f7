// Command-line entry point: train, eval, compare, calibrate-omega.
//
// Exit codes: 0 success, 1 contract violation, 2 config error.
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spear/checkpoint.hpp"
#include "spear/config.hpp"
#include "spear/harness.hpp"

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string resolve_out_dir(const std::string& flag_value) {
  if (const char* env = std::getenv("SPEAR_OUT"); env && *env) return env;
  return flag_value;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SPEAR training laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", variant, ckpt_path, seed_list;
  std::optional<std::uint64_t> seed_flag;
  std::optional<int> steps_flag;

  auto add_common = [&](CLI::App* cmd, bool with_out) {
    cmd->add_option("--config", config_path, "config file (key = value lines)")->required();
    cmd->add_option("--seed", seed_list, "run seed (comma list for compare)");
    cmd->add_option("--variant", variant, "algorithm variant: grpo, drbot or spear");
    cmd->add_option("--steps", steps_flag, "override num_steps");
    if (with_out) cmd->add_option("--out", out_dir, "output directory (env SPEAR_OUT overrides)");
  };

  CLI::App* train = app.add_subcommand("train", "run the training loop");
  add_common(train, true);

  CLI::App* eval = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  add_common(eval, true);
  eval->add_option("--ckpt", ckpt_path, "checkpoint path (default <out>/checkpoint.bin)");

  CLI::App* compare = app.add_subcommand("compare", "train variants across seeds and summarize");
  add_common(compare, true);

  CLI::App* calibrate = app.add_subcommand("calibrate-omega", "measure covariance clip bounds");
  add_common(calibrate, true);
  calibrate->add_option("--ckpt", ckpt_path, "optional starting checkpoint");

  CLI11_PARSE(app, argc, argv);

  try {
    spear::TrainConfig cfg = spear::load_config(config_path);
    if (!variant.empty() && !app.got_subcommand(compare))
      cfg.algorithm = spear::parse_algorithm(variant);
    if (steps_flag) cfg.num_steps = *steps_flag;
    std::vector<std::string> seeds_raw = split_list(seed_list);
    if (seeds_raw.size() == 1 && !app.got_subcommand(compare)) cfg.seed = std::stoull(seeds_raw[0]);
    spear::validate_config(cfg);
    const std::string out = resolve_out_dir(out_dir);

    if (app.got_subcommand(train)) {
      spear::RunResult res = spear::run_train({cfg, out});
      std::cout << "trained " << res.steps_run << " steps; metrics at "
                << res.metrics_path.string() << "\n";
      return 0;
    }

    if (app.got_subcommand(eval)) {
      std::string path = ckpt_path.empty() ? out + "/checkpoint.bin" : ckpt_path;
      spear::Checkpoint ckpt = spear::load_checkpoint(path);
      auto env = spear::make_environment(cfg.env_name, cfg.env_max_turns);
      spear::EvalResult res =
          spear::run_eval(ckpt, *env, spear::seed_range(cfg.env_seed_lo, cfg.env_seed_hi));
      std::cout << "episodes " << res.episodes << "  success_rate " << res.success_rate
                << "  mean_turns " << res.mean_turns << "\n";
      return 0;
    }

    if (app.got_subcommand(compare)) {
      std::vector<std::string> variants =
          variant.empty() ? std::vector<std::string>{"grpo", "drbot", "spear"} : split_list(variant);
      std::vector<std::uint64_t> seeds;
      for (const std::string& s : seeds_raw) seeds.push_back(std::stoull(s));
      if (seeds.empty()) seeds.push_back(cfg.seed);
      spear::run_compare(cfg, variants, seeds, out);
      std::ifstream table(out + "/summary.txt");
      std::cout << table.rdbuf();
      return 0;
    }

    if (app.got_subcommand(calibrate)) {
      std::optional<spear::PolicyParams> start;
      if (!ckpt_path.empty()) start = spear::load_checkpoint(ckpt_path).params;
      auto result = spear::calibrate_omega(cfg, start ? &*start : nullptr);
      if (!result) {
        std::cout << "calibration declined: all token covariances are zero on this batch\n";
        return 0;
      }
      std::string fragment = "omega_lb = " + std::to_string(result->omega_lb) +
                             "\nomega_ub = " + std::to_string(result->omega_ub) + "\n";
      std::filesystem::create_directories(out);
      std::ofstream(out + "/omega.cfg") << fragment;
      std::cout << fragment;
      return 0;
    }
  } catch (const spear::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
