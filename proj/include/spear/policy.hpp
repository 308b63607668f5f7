// Tabular softmax policy: one logit row per enumerated state.
//
// Log-probabilities are computed max-shifted directly from the logits, so
// they stay finite even when the corresponding probability underflows.
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "spear/env.hpp"
#include "spear/errors.hpp"
#include "spear/rng.hpp"
#include "spear/trajectory.hpp"

namespace spear {

struct PolicyParams {
  int state_count = 0;
  int action_count = 0;
  std::vector<double> logits;  // row-major [state][action], zero-initialized
  std::uint64_t version = 0;   // bumped once per applied update

  PolicyParams() = default;
  PolicyParams(int states, int actions)
      : state_count(states),
        action_count(actions),
        logits(static_cast<std::size_t>(states) * actions, 0.0) {}

  std::span<double> row(int state_index) {
    return {logits.data() + static_cast<std::size_t>(state_index) * action_count,
            static_cast<std::size_t>(action_count)};
  }
  std::span<const double> row(int state_index) const {
    return {logits.data() + static_cast<std::size_t>(state_index) * action_count,
            static_cast<std::size_t>(action_count)};
  }
};

// Frozen copy taken before a rollout phase; rollout behavior probabilities
// are computed against this, never against the live params.
using PolicySnapshot = PolicyParams;

inline PolicySnapshot snapshot(const PolicyParams& params) { return params; }

namespace detail {

inline void check_row_finite(std::span<const double> row) {
  for (double v : row)
    if (!std::isfinite(v)) throw NumericError("non-finite logit encountered");
}

}  // namespace detail

inline std::vector<double> action_distribution(const PolicyParams& params, int state_index) {
  std::span<const double> row = params.row(state_index);
  detail::check_row_finite(row);
  double max_logit = row[0];
  for (double v : row) max_logit = std::max(max_logit, v);
  std::vector<double> probs(row.size());
  double sum = 0.0;
  for (std::size_t a = 0; a < row.size(); ++a) {
    probs[a] = std::exp(row[a] - max_logit);
    sum += probs[a];
  }
  for (double& p : probs) p /= sum;
  return probs;
}

inline double log_prob(const PolicyParams& params, int state_index, int action) {
  std::span<const double> row = params.row(state_index);
  detail::check_row_finite(row);
  double max_logit = row[0];
  for (double v : row) max_logit = std::max(max_logit, v);
  double sum = 0.0;
  for (double v : row) sum += std::exp(v - max_logit);
  return row[action] - max_logit - std::log(sum);
}

// Score-function gradient over the state's logit row:
// d log pi(a|s) / d logit_b = 1[b == a] - pi(b|s). Rows sum to zero.
inline std::vector<double> grad_log_prob(const PolicyParams& params, int state_index, int action) {
  std::vector<double> g = action_distribution(params, state_index);
  for (double& v : g) v = -v;
  g[action] += 1.0;
  return g;
}

// Inverse-CDF draw in fixed action order; returns the action and its
// behavior log-prob under params.
inline std::pair<ActionId, double> sample_action(const PolicyParams& params, int state_index,
                                                 RngStream& rng) {
  std::vector<double> probs = action_distribution(params, state_index);
  double u = rng.next_double();
  double cum = 0.0;
  int chosen = static_cast<int>(probs.size()) - 1;
  for (std::size_t a = 0; a < probs.size(); ++a) {
    cum += probs[a];
    if (u < cum) {
      chosen = static_cast<int>(a);
      break;
    }
  }
  return {ActionId{chosen}, log_prob(params, state_index, chosen)};
}

// Sequence-mean-token-sum entropy: mean over trajectories of the summed
// negative log-probabilities of the actions taken.
inline double batch_entropy(std::span<const Trajectory> batch, const PolicyParams& params) {
  if (batch.empty()) throw ContractViolation("batch_entropy requires a non-empty batch");
  double sum = 0.0;
  for (const Trajectory& traj : batch)
    for (const Turn& turn : traj.turns) sum -= log_prob(params, turn.state_index, turn.action_index);
  return sum / static_cast<double>(batch.size());
}

}  // namespace spear
