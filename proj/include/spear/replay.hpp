// Self-imitation replay buffer with positive-advantage admission, dual-gate
// refiltering against the baseline buffer, and post-update reset.
#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <vector>

#include "spear/advantage.hpp"
#include "spear/errors.hpp"
#include "spear/trajectory.hpp"

namespace spear {

struct StoredTrajectory {
  std::vector<Turn> turns;  // behavior log-probs captured at collection time
  double reward_total = 0.0;
  double adv_at_store = 0.0;  // group advantage at admission, > 0 by the gate
  std::int64_t collected_at_step = 0;
  std::vector<std::uint8_t> loss_mask;  // void-turn / over-long masking baked in
};

// A retained entry after refiltering, carrying its recalibrated advantage.
struct RetainedTrajectory {
  const StoredTrajectory* entry = nullptr;
  double recalibrated_adv = 0.0;  // > 0 by the dual gate
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity_ == 0) throw ConfigError("replay buffer capacity must be >= 1");
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool is_full() const { return entries_.size() == capacity_; }

  // Admission gate: stored iff the group advantage is strictly positive.
  // Only legal while the buffer is filling.
  bool maybe_store(const Trajectory& traj, double advantage, std::int64_t step) {
    if (is_full()) throw ContractViolation("maybe_store on a full replay buffer; drain first");
    if (!(advantage > 0.0)) return false;
    for (const Turn& t : traj.turns)
      if (!std::isfinite(t.behavior_log_prob) || t.behavior_log_prob > 0.0)
        throw ContractViolation("stored behavior log-prob must be finite and <= 0");
    StoredTrajectory s;
    s.turns = traj.turns;
    s.reward_total = traj.reward.total;
    s.adv_at_store = advantage;
    s.collected_at_step = step;
    s.loss_mask = traj.loss_mask.empty()
                      ? std::vector<std::uint8_t>(traj.turns.size(), std::uint8_t{1})
                      : traj.loss_mask;
    entries_.push_back(std::move(s));
    return true;
  }

  // Dual gate: keeps exactly the entries whose recalibrated advantage
  // R - P50 is strictly positive. The buffer itself is left untouched.
  std::vector<RetainedTrajectory> refilter(const BaselineBuffer& baseline) const {
    if (baseline.empty())
      throw ContractViolation("refilter requires a non-empty baseline buffer");
    std::vector<RetainedTrajectory> retained;
    for (const StoredTrajectory& e : entries_) {
      double adv = baseline.recalibrate(e.reward_total);
      if (adv > 0.0) retained.push_back({&e, adv});
    }
    return retained;
  }

  void drain() { entries_.clear(); }

  const std::vector<StoredTrajectory>& entries() const { return entries_; }

  // Line-delimited debug dump: one record per entry.
  void dump(std::ostream& os) const {
    for (const StoredTrajectory& e : entries_) {
      os << "{\"step\":" << e.collected_at_step << ",\"reward\":" << e.reward_total
         << ",\"adv\":" << e.adv_at_store << ",\"turns\":" << e.turns.size() << "}\n";
    }
  }

 private:
  std::size_t capacity_;
  std::vector<StoredTrajectory> entries_;
};

}  // namespace spear
