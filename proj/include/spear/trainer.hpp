// The training loop: on-policy group-relative updates with the bag-of-tricks
// gates, plus the curriculum-weighted self-imitation update replayed from the
// buffer with recalibrated advantages and covariance-based token clipping.
//
// Each train_step executes, in order: snapshot the policy; roll out G
// trajectories per task seed; compose schedule-weighted rewards; mask void /
// over-long trajectories; compute group advantages; push group means into the
// baseline buffer; then either fill the replay buffer and apply the on-policy
// update, or (at capacity) refilter the buffer, apply the on-policy update
// followed by the self-imitation update, and drain.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "spear/advantage.hpp"
#include "spear/config.hpp"
#include "spear/env.hpp"
#include "spear/errors.hpp"
#include "spear/metrics.hpp"
#include "spear/policy.hpp"
#include "spear/replay.hpp"
#include "spear/reward.hpp"
#include "spear/rng.hpp"
#include "spear/trajectory.hpp"

namespace spear {

// Substream tags for the run's counter-based rng.
enum RngUse : std::uint64_t { kRngRollout = 1, kRngClipMask = 2 };

struct Diagnostics {
  std::int64_t ratio_overflow_count = 0;
  std::int64_t noop_update_count = 0;
};

// Ratios are capped at a finite sentinel; hitting the cap is counted, not fatal.
inline constexpr double kRatioCap = 1e18;

inline double importance_ratio(double current_log_prob, double behavior_log_prob,
                               Diagnostics* diag = nullptr) {
  if (!std::isfinite(current_log_prob) || !std::isfinite(behavior_log_prob))
    throw NumericError("importance_ratio requires finite log-probs");
  double diff = current_log_prob - behavior_log_prob;
  if (diff > std::log(kRatioCap)) {
    if (diag) ++diag->ratio_overflow_count;
    return kRatioCap;
  }
  return std::exp(diff);
}

struct SurrogateEval {
  double value = 0.0;
  double dvalue_dr = 0.0;  // derivative wrt the ratio; 0 on clipped branches
};

// min(r*A, clip(r, 1-eps_lb, 1+eps_ub)*A), floored at C*A for negative
// advantages. Pass C = +inf to disable the dual-clip floor.
inline SurrogateEval eval_clipped_surrogate(double r, double adv, double eps_lb, double eps_ub,
                                            double C) {
  const double lo = 1.0 - eps_lb;
  const double hi = 1.0 + eps_ub;
  const double clipped = std::min(std::max(r, lo), hi);
  double value = std::min(r * adv, clipped * adv);
  bool ratio_branch = r * adv <= clipped * adv;  // ties resolve to the unclipped branch
  if (adv < 0.0) {
    double floor = C * adv;
    if (value < floor) {
      value = floor;
      ratio_branch = false;
    }
  }
  return {value, ratio_branch ? adv : 0.0};
}

inline double clipped_surrogate(double r, double adv, double eps_lb, double eps_ub, double C) {
  if (!(r > 0.0)) throw ContractViolation("clipped_surrogate requires r > 0");
  return eval_clipped_surrogate(r, adv, eps_lb, eps_ub, C).value;
}

// ---------------------------------------------------------------------------
// Sample filters
// ---------------------------------------------------------------------------

// Masks trajectories containing a void turn (no valid tool interaction) and
// trajectories longer than the response-turn budget. Masked trajectories keep
// contributing to metrics but are excluded from advantages and gradients.
inline int filter_void_and_overlong(std::vector<Trajectory>& trajectories, int max_response_turns) {
  int masked = 0;
  for (Trajectory& traj : trajectories) {
    bool has_void_turn = false;
    for (const Turn& t : traj.turns)
      if (!t.tool_call_valid) has_void_turn = true;
    bool over_long = static_cast<int>(traj.turns.size()) > max_response_turns;
    bool keep = !has_void_turn && !over_long;
    traj.loss_mask.assign(traj.turns.size(), keep ? std::uint8_t{1} : std::uint8_t{0});
    masked += keep ? 0 : 1;
  }
  return masked;
}

// Keeps the top ceil(ratio * count) groups by reward std (descending), ties
// broken by lower task seed. Returns retained indices in original order.
inline std::vector<int> filter_low_variance_groups(const std::vector<GroupBatch>& groups,
                                                   double rollout_filter_ratio) {
  if (groups.empty()) throw ContractViolation("group filter requires at least one group");
  std::vector<int> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (groups[a].reward_std != groups[b].reward_std)
      return groups[a].reward_std > groups[b].reward_std;
    return groups[a].task_seed < groups[b].task_seed;
  });
  std::size_t keep = static_cast<std::size_t>(
      std::ceil(rollout_filter_ratio * static_cast<double>(groups.size())));
  keep = std::min(keep, groups.size());
  std::vector<int> retained(order.begin(), order.begin() + keep);
  std::sort(retained.begin(), retained.end());
  return retained;
}

// ---------------------------------------------------------------------------
// Covariance-based clipping
// ---------------------------------------------------------------------------

// Per-token (centered log-prob) * (centered advantage), centered over all
// learnable tokens of the batch.
inline std::vector<double> token_covariance(std::span<const double> log_probs,
                                            std::span<const double> advantages) {
  if (log_probs.size() != advantages.size())
    throw ContractViolation("token_covariance requires aligned inputs");
  const std::size_t n = log_probs.size();
  if (n == 0) return {};
  double mean_lp = 0.0, mean_adv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_lp += log_probs[i];
    mean_adv += advantages[i];
  }
  mean_lp /= static_cast<double>(n);
  mean_adv /= static_cast<double>(n);
  std::vector<double> cov(n);
  for (std::size_t i = 0; i < n; ++i)
    cov[i] = (log_probs[i] - mean_lp) * (advantages[i] - mean_adv);
  return cov;
}

// Draws min(round(lambda * N), |eligible|) tokens uniformly without
// replacement from those with covariance inside [omega_lb, omega_ub]; drawn
// tokens get mask 0, all others 1.
inline std::vector<std::uint8_t> select_clip_mask(std::span<const double> covariances,
                                                  double omega_lb, double omega_ub, double lambda,
                                                  RngStream& rng) {
  if (lambda < 0.0 || lambda > 1.0) throw ContractViolation("lambda must lie in [0, 1]");
  const std::size_t n = covariances.size();
  std::vector<std::uint8_t> mask(n, std::uint8_t{1});
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < n; ++i)
    if (covariances[i] >= omega_lb && covariances[i] <= omega_ub) eligible.push_back(i);
  std::size_t budget = static_cast<std::size_t>(std::lround(lambda * static_cast<double>(n)));
  budget = std::min(budget, eligible.size());
  for (std::size_t k = 0; k < budget; ++k) {
    std::size_t j = k + static_cast<std::size_t>(rng.next_below(eligible.size() - k));
    std::swap(eligible[k], eligible[j]);
    mask[eligible[k]] = 0;
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Objective evaluation and updates
// ---------------------------------------------------------------------------

struct TokenLossRecord {
  int trajectory_id = 0;
  int turn_index = 0;
  double ratio = 0.0;
  double advantage = 0.0;
  double covariance = 0.0;
  bool clip_masked = false;  // covariance-clipped out of the loss
  double surrogate = 0.0;
};

// One learnable unit of an update: a trajectory's turns, its loss mask, and
// the advantage applied to every token.
struct UpdateItem {
  std::span<const Turn> turns;
  std::span<const std::uint8_t> loss_mask;  // empty = all learnable
  double advantage = 0.0;
};

struct ObjectiveEval {
  double value = 0.0;
  std::vector<double> gradient;  // dense, same shape as the logit table
  std::vector<TokenLossRecord> tokens;
  int learnable_tokens = 0;
  int clip_masked_tokens = 0;
};

// Value and gradient of (1/|items|) sum_i w_i sum_t M_t * surrogate(r_t, A_i)
// at the given params, where w_i is 1/len under length normalization and the
// optional clip mask runs over learnable tokens in batch order.
inline ObjectiveEval evaluate_objective(std::span<const UpdateItem> items,
                                        const PolicyParams& params, const VariantGates& gates,
                                        double dual_clip_c,
                                        std::span<const std::uint8_t> clip_mask,
                                        Diagnostics* diag) {
  ObjectiveEval out;
  out.gradient.assign(params.logits.size(), 0.0);
  if (items.empty()) return out;
  const double inv_batch = 1.0 / static_cast<double>(items.size());
  const double c = gates.dual_clip ? dual_clip_c : std::numeric_limits<double>::infinity();
  std::size_t mask_cursor = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const UpdateItem& item = items[i];
    const double w_len =
        gates.length_normalize && !item.turns.empty()
            ? 1.0 / static_cast<double>(item.turns.size())
            : 1.0;
    for (std::size_t t = 0; t < item.turns.size(); ++t) {
      if (!item.loss_mask.empty() && !item.loss_mask[t]) continue;
      const Turn& turn = item.turns[t];
      const bool clip_masked = !clip_mask.empty() && !clip_mask[mask_cursor];
      ++mask_cursor;
      ++out.learnable_tokens;

      TokenLossRecord rec;
      rec.trajectory_id = static_cast<int>(i);
      rec.turn_index = static_cast<int>(t);
      rec.advantage = item.advantage;
      rec.clip_masked = clip_masked;
      if (clip_masked) {
        ++out.clip_masked_tokens;
        out.tokens.push_back(rec);
        continue;
      }
      double cur_lp = log_prob(params, turn.state_index, turn.action_index);
      double r = importance_ratio(cur_lp, turn.behavior_log_prob, diag);
      SurrogateEval s = eval_clipped_surrogate(r, item.advantage, gates.eps_lb, gates.eps_ub, c);
      rec.ratio = r;
      rec.surrogate = s.value;
      out.tokens.push_back(rec);
      out.value += inv_batch * w_len * s.value;
      if (s.dvalue_dr != 0.0 && r < kRatioCap) {
        // d surrogate / d logit_b = dvalue_dr * r * (1[b == a] - pi(b|s))
        double coeff = inv_batch * w_len * s.dvalue_dr * r;
        std::vector<double> probs = action_distribution(params, turn.state_index);
        double* grow = out.gradient.data() +
                       static_cast<std::size_t>(turn.state_index) * params.action_count;
        for (int b = 0; b < params.action_count; ++b) grow[b] -= coeff * probs[b];
        grow[turn.action_index] += coeff;
      }
    }
  }
  return out;
}

struct UpdateStats {
  double objective = 0.0;  // full-batch value at the entry params
  int trajectories = 0;
  int learnable_tokens = 0;
  int clip_masked_tokens = 0;
  int minibatches = 0;
  bool noop = false;
};

namespace detail {

// Sequential fixed-step ascent, one step per mini-batch, ratios always against
// the stored behavior log-probs. scale folds in the curriculum weight.
inline UpdateStats run_minibatched_update(PolicyParams& params, std::span<const UpdateItem> items,
                                          const VariantGates& gates, const TrainConfig& cfg,
                                          double scale, std::span<const std::uint8_t> clip_mask,
                                          Diagnostics& diag) {
  UpdateStats stats;
  stats.trajectories = static_cast<int>(items.size());
  if (items.empty() || scale == 0.0) {
    stats.noop = true;
    ++diag.noop_update_count;
    return stats;
  }
  ObjectiveEval full = evaluate_objective(items, params, gates, cfg.clip_ratio_c, clip_mask, nullptr);
  stats.objective = full.value;
  stats.learnable_tokens = full.learnable_tokens;
  stats.clip_masked_tokens = full.clip_masked_tokens;
  if (full.learnable_tokens == full.clip_masked_tokens) {
    stats.noop = true;
    ++diag.noop_update_count;
    return stats;
  }

  const std::size_t mb =
      cfg.ppo_mini_batch_size > 0 ? static_cast<std::size_t>(cfg.ppo_mini_batch_size) : items.size();
  // Per-item learnable-token offsets into the batch-wide clip mask.
  std::vector<std::size_t> offsets(items.size() + 1, 0);
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::size_t learnable = 0;
    if (items[i].loss_mask.empty()) {
      learnable = items[i].turns.size();
    } else {
      for (std::uint8_t m : items[i].loss_mask) learnable += m ? 1 : 0;
    }
    offsets[i + 1] = offsets[i] + learnable;
  }

  for (std::size_t begin = 0; begin < items.size(); begin += mb) {
    const std::size_t end = std::min(begin + mb, items.size());
    std::span<const std::uint8_t> mask_slice;
    if (!clip_mask.empty())
      mask_slice = clip_mask.subspan(offsets[begin], offsets[end] - offsets[begin]);
    ObjectiveEval eval = evaluate_objective(items.subspan(begin, end - begin), params, gates,
                                            cfg.clip_ratio_c, mask_slice, &diag);
    const double step = cfg.actor_learning_rate * scale;
    for (std::size_t k = 0; k < params.logits.size(); ++k)
      params.logits[k] += step * eval.gradient[k];
    ++stats.minibatches;
  }
  ++params.version;
  return stats;
}

}  // namespace detail

// On-policy update over the surviving groups' learnable trajectories.
inline UpdateStats on_policy_update(std::span<const UpdateItem> items, PolicyParams& params,
                                    const VariantGates& gates, const TrainConfig& cfg,
                                    Diagnostics& diag) {
  return detail::run_minibatched_update(params, items, gates, cfg, 1.0, {}, diag);
}

// Self-imitation update over the refiltered replay entries, weighted by the
// warm-up coefficient, with the covariance clip mask applied.
inline UpdateStats sil_update(std::span<const RetainedTrajectory> retained, PolicyParams& params,
                              const VariantGates& gates, const TrainConfig& cfg, double gamma_t,
                              RngStream& mask_rng, Diagnostics& diag) {
  if (gamma_t < 0.0 || gamma_t > 1.0) throw ContractViolation("gamma_t must lie in [0, 1]");
  std::vector<UpdateItem> items;
  items.reserve(retained.size());
  for (const RetainedTrajectory& r : retained)
    items.push_back({r.entry->turns, r.entry->loss_mask, r.recalibrated_adv});

  // Covariance over learnable tokens at the entry params, batch-wide centering.
  std::vector<double> lps, advs;
  for (const UpdateItem& item : items) {
    for (std::size_t t = 0; t < item.turns.size(); ++t) {
      if (!item.loss_mask.empty() && !item.loss_mask[t]) continue;
      lps.push_back(log_prob(params, item.turns[t].state_index, item.turns[t].action_index));
      advs.push_back(item.advantage);
    }
  }
  std::vector<double> cov = token_covariance(lps, advs);
  std::vector<std::uint8_t> clip_mask =
      select_clip_mask(cov, cfg.omega_lb, cfg.omega_ub, cfg.lambda, mask_rng);
  return detail::run_minibatched_update(params, items, gates, cfg, gamma_t, clip_mask, diag);
}

// Monitoring-only estimator: mean over tokens of exp(d) - d - 1 with
// d = ref_log_prob - cur_log_prob at the taken actions. Never in the loss.
inline double kl_metric(const PolicyParams& params, const PolicyParams& reference,
                        std::span<const Trajectory> batch) {
  if (batch.empty()) throw ContractViolation("kl_metric requires a non-empty batch");
  double sum = 0.0;
  std::int64_t tokens = 0;
  for (const Trajectory& traj : batch) {
    for (const Turn& t : traj.turns) {
      double d = log_prob(reference, t.state_index, t.action_index) -
                 log_prob(params, t.state_index, t.action_index);
      sum += std::exp(d) - d - 1.0;
      ++tokens;
    }
  }
  return tokens == 0 ? 0.0 : sum / static_cast<double>(tokens);
}

// ---------------------------------------------------------------------------
// The full step
// ---------------------------------------------------------------------------

struct StepInfo {
  bool sil_branch = false;
  int admitted = 0;
  int retained_replay = 0;
  int masked_trajectories = 0;
  int degenerate_groups = 0;
  int retained_groups = 0;
};

class Trainer {
 public:
  Trainer(const Environment& env, const TrainConfig& cfg)
      : env_(env),
        cfg_(cfg),
        gates_(derive_gates(cfg)),
        params_(env.state_count(), env.action_count()),
        initial_params_(params_),
        baseline_(static_cast<std::size_t>(cfg.N_D_R), cfg.baseline_percentile),
        replay_(static_cast<std::size_t>(cfg.N_D)) {
    if (cfg_.env_name != env.name())
      throw ContractViolation("config env.name does not match the environment");
  }

  const PolicyParams& params() const { return params_; }
  PolicyParams& mutable_params() { return params_; }
  const Diagnostics& diagnostics() const { return diag_; }
  const ReplayBuffer& replay() const { return replay_; }
  const BaselineBuffer& baseline() const { return baseline_; }
  const StepInfo& last_step_info() const { return last_info_; }
  int t_iter() const { return t_iter_; }

  int effective_max_response_turns() const {
    return cfg_.max_response_turns > 0 ? cfg_.max_response_turns : env_.max_turns();
  }

  // Rolls out G trajectories for each task seed of step t against the snapshot.
  std::vector<GroupBatch> rollout_batch(const PolicySnapshot& snap, int t, double mu_t) {
    std::vector<GroupBatch> groups(cfg_.train_batch_size);
    const std::uint64_t range = cfg_.env_seed_hi - cfg_.env_seed_lo + 1;
    for (int slot = 0; slot < cfg_.train_batch_size; ++slot) {
      GroupBatch& group = groups[slot];
      group.task_seed =
          cfg_.env_seed_lo +
          (static_cast<std::uint64_t>(t) * cfg_.train_batch_size + slot) % range;
      EpisodeSpec spec{std::string(env_.name()), group.task_seed, env_.max_turns()};
      for (int i = 0; i < cfg_.n_samples_per_prompt; ++i) {
        RngStream stream(cfg_.seed, {kRngRollout, static_cast<std::uint64_t>(t),
                                     static_cast<std::uint64_t>(slot),
                                     static_cast<std::uint64_t>(i)});
        Trajectory traj;
        traj.task_seed = group.task_seed;
        EnvState state = env_.reset(spec);
        while (true) {
          auto [action, lp] = sample_action(snap, state.state_index, stream);
          StepOutcome out = env_.step(state, action);
          traj.turns.push_back(
              {state.state_index, action.index, lp, out.tool_call_valid, out.well_formed});
          state = out.next_state;
          if (out.done) {
            traj.success = out.success;
            break;
          }
        }
        traj.reward = compose_reward(outcome_reward(traj.success),
                                     tool_call_reward(traj.n_tool_call()),
                                     format_reward(traj.turns), mu_t);
        group.trajectories.push_back(std::move(traj));
      }
      for (const Trajectory& traj : group.trajectories)
        group.rewards.push_back(traj.reward.total);
    }
    return groups;
  }

  // Masks and group advantages. Masked trajectories stay in the reward
  // statistics (group mean, std, baseline pushes) exactly like any rollout;
  // the loss mask alone removes them from the gradient and from admission.
  void prepare_groups(std::vector<GroupBatch>& groups, StepInfo& info) {
    for (GroupBatch& group : groups) {
      if (gates_.filter_void_overlong) {
        info.masked_trajectories +=
            filter_void_and_overlong(group.trajectories, effective_max_response_turns());
      } else {
        for (Trajectory& traj : group.trajectories)
          traj.loss_mask.assign(traj.turns.size(), std::uint8_t{1});
      }
      double mean = std::accumulate(group.rewards.begin(), group.rewards.end(), 0.0) /
                    static_cast<double>(group.rewards.size());
      double var = 0.0;
      for (double r : group.rewards) var += (r - mean) * (r - mean);
      group.reward_std = std::sqrt(var / static_cast<double>(group.rewards.size()));
      if (gates_.normalize_by_std && group.reward_std == 0.0) {
        // 0/0 resolves to zero advantages; the group carries no signal.
        group.advantages.assign(group.trajectories.size(), 0.0);
        ++info.degenerate_groups;
        continue;
      }
      group.advantages = group_advantage(group.rewards, gates_.normalize_by_std);
    }
  }

  MetricsRecord train_step() {
    const auto start = std::chrono::steady_clock::now();
    const int t = t_iter_;
    last_info_ = StepInfo{};

    const PolicySnapshot snap = snapshot(params_);
    const double mu_t = gates_.use_intrinsic_reward ? mu_schedule(t, cfg_.T_decay) : 0.0;
    const double gamma_t = gates_.use_replay ? gamma_schedule(t, cfg_.T_warmup) : 0.0;

    std::vector<GroupBatch> groups = rollout_batch(snap, t, mu_t);
    prepare_groups(groups, last_info_);

    for (const GroupBatch& group : groups) {
      double sum = std::accumulate(group.rewards.begin(), group.rewards.end(), 0.0);
      baseline_.push(sum / static_cast<double>(group.rewards.size()));
    }

    std::vector<int> retained_groups =
        filter_low_variance_groups(groups, gates_.group_filter_ratio);
    last_info_.retained_groups = static_cast<int>(retained_groups.size());

    std::vector<UpdateItem> items;
    for (int gi : retained_groups) {
      const GroupBatch& group = groups[gi];
      for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
        const Trajectory& traj = group.trajectories[i];
        if (traj.fully_masked()) continue;
        items.push_back({traj.turns, traj.loss_mask, group.advantages[i]});
      }
    }

    UpdateStats sil_stats;
    if (gates_.use_replay && replay_.is_full()) {
      last_info_.sil_branch = true;
      std::vector<RetainedTrajectory> retained = replay_.refilter(baseline_);
      last_info_.retained_replay = static_cast<int>(retained.size());
      on_policy_update(items, params_, gates_, cfg_, diag_);
      RngStream mask_rng(cfg_.seed, {kRngClipMask, static_cast<std::uint64_t>(t)});
      sil_stats = sil_update(retained, params_, gates_, cfg_, gamma_t, mask_rng, diag_);
      replay_.drain();
    } else {
      if (gates_.use_replay) {
        for (int gi : retained_groups) {
          const GroupBatch& group = groups[gi];
          for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
            if (replay_.is_full()) break;
            if (group.trajectories[i].fully_masked()) continue;
            if (replay_.maybe_store(group.trajectories[i], group.advantages[i], t))
              ++last_info_.admitted;
          }
          if (replay_.is_full()) break;
        }
      }
      on_policy_update(items, params_, gates_, cfg_, diag_);
    }

    ++t_iter_;
    MetricsRecord rec;
    rec.step = t_iter_;
    int episodes = 0, successes = 0;
    double reward_sum = 0.0, tool_call_sum = 0.0;
    std::vector<Trajectory> all;
    for (GroupBatch& group : groups)
      for (Trajectory& traj : group.trajectories) {
        ++episodes;
        successes += traj.success ? 1 : 0;
        reward_sum += traj.reward.total;
        tool_call_sum += traj.n_tool_call();
        all.push_back(std::move(traj));
      }
    rec.success_rate = static_cast<double>(successes) / episodes;
    rec.mean_total_reward = reward_sum / episodes;
    rec.mean_n_tool_call = tool_call_sum / episodes;
    rec.entropy = batch_entropy(all, snap);
    rec.kl_metric = kl_metric(params_, initial_params_, all);
    rec.replay_fill = static_cast<double>(replay_.size()) / static_cast<double>(replay_.capacity());
    rec.clipped_token_fraction =
        sil_stats.learnable_tokens > 0
            ? static_cast<double>(sil_stats.clip_masked_tokens) / sil_stats.learnable_tokens
            : 0.0;
    rec.gamma_t = gamma_t;
    rec.mu_t = mu_t;
    rec.ratio_overflow_count = diag_.ratio_overflow_count;
    rec.noop_update_count = diag_.noop_update_count;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                      .count();
    return rec;
  }

 private:
  const Environment& env_;
  TrainConfig cfg_;
  VariantGates gates_;
  PolicyParams params_;
  PolicyParams initial_params_;
  BaselineBuffer baseline_;
  ReplayBuffer replay_;
  Diagnostics diag_;
  StepInfo last_info_;
  int t_iter_ = 0;
};

}  // namespace spear
