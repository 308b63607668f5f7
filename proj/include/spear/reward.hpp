// Composite trajectory reward and the two cosine curricula.
//
// total = outcome + mu * tool_call + format, assigned once per trajectory at
// termination. gamma ramps the self-imitation term in over T_warmup steps;
// mu ramps the intrinsic tool-call reward out over T_decay steps.
#pragma once

#include <cmath>
#include <numbers>

#include "spear/errors.hpp"

namespace spear {

struct RewardBreakdown {
  double outcome = 0.0;    // +1 or -1
  double tool_call = 0.0;  // min(1, 0.1 * n_tool_call)
  double format = 0.0;     // 0.1 or 0
  double mu = 0.0;         // schedule value applied to tool_call
  double total = 0.0;
};

struct ScheduleConfig {
  int T_warmup = 1;
  int T_decay = 1;
};

inline double outcome_reward(bool success) { return success ? 1.0 : -1.0; }

inline double tool_call_reward(int n_tool_call) {
  if (n_tool_call < 0) throw ContractViolation("n_tool_call must be non-negative");
  return std::min(1.0, 0.1 * n_tool_call);
}

// 0.1 iff every turn is well-formed (vacuously true for an empty trajectory).
template <typename TurnRange>
double format_reward(const TurnRange& turns) {
  for (const auto& t : turns)
    if (!t.well_formed) return 0.0;
  return 0.1;
}

// Warm-up weight for the self-imitation term: 0 -> 1 over T_warmup steps.
inline double gamma_schedule(int t_iter, int T_warmup) {
  if (t_iter >= T_warmup) return 1.0;
  return 0.5 * (1.0 - std::cos(std::numbers::pi * t_iter / T_warmup));
}

// Decay weight for the intrinsic tool-call reward: 1 -> 0 over T_decay steps.
inline double mu_schedule(int t_iter, int T_decay) {
  if (t_iter > T_decay) return 0.0;
  return 0.5 * (std::cos(std::numbers::pi * t_iter / T_decay) + 1.0);
}

inline RewardBreakdown compose_reward(double outcome, double tool_call, double format, double mu) {
  RewardBreakdown r;
  r.outcome = outcome;
  r.tool_call = tool_call;
  r.format = format;
  r.mu = mu;
  r.total = outcome + mu * tool_call + format;
  return r;
}

}  // namespace spear
