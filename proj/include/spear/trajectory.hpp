// Rollout records: one Turn per action taken, one Trajectory per episode,
// one GroupBatch per task seed (G trajectories sharing it).
#pragma once

#include <cstdint>
#include <vector>

#include "spear/reward.hpp"

namespace spear {

struct Turn {
  int state_index = 0;
  int action_index = 0;
  double behavior_log_prob = 0.0;  // log-prob under the rollout snapshot
  bool tool_call_valid = false;
  bool well_formed = false;
};

struct Trajectory {
  std::uint64_t task_seed = 0;
  std::vector<Turn> turns;
  bool success = false;
  RewardBreakdown reward;
  // Per-turn loss mask; filters clear the whole trajectory at once.
  std::vector<std::uint8_t> loss_mask;

  int n_tool_call() const {
    int n = 0;
    for (const Turn& t : turns) n += t.tool_call_valid ? 1 : 0;
    return n;
  }

  bool fully_masked() const {
    for (std::uint8_t m : loss_mask)
      if (m) return false;
    return !loss_mask.empty() || turns.empty();
  }
};

struct GroupBatch {
  std::uint64_t task_seed = 0;
  std::vector<Trajectory> trajectories;  // size G
  std::vector<double> rewards;           // composed totals, size G
  std::vector<double> advantages;        // group-relative, size G
  double reward_std = 0.0;               // population std over learnable members
};

}  // namespace spear
