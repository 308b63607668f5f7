// Group-relative advantages and the FIFO baseline buffer backing P50
// advantage recalibration for replayed trajectories.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <vector>

#include "spear/errors.hpp"

namespace spear {

// A_i = R_i - mean(R), optionally divided by the population std. The Dr.BoT
// default keeps the flag off; callers must filter zero-variance groups before
// turning it on.
inline std::vector<double> group_advantage(const std::vector<double>& rewards, bool normalize_by_std) {
  if (rewards.size() < 2) throw ContractViolation("group_advantage requires G >= 2 rewards");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  std::vector<double> adv(rewards.size());
  double var = 0.0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    adv[i] = rewards[i] - mean;
    var += adv[i] * adv[i];
  }
  if (normalize_by_std) {
    double std_dev = std::sqrt(var / static_cast<double>(rewards.size()));
    if (std_dev == 0.0)
      throw ContractViolation("degenerate group: zero reward std with normalization enabled");
    for (double& a : adv) a /= std_dev;
  }
  return adv;
}

// FIFO of intra-group mean rewards; supplies the recalibration percentile.
class BaselineBuffer {
 public:
  explicit BaselineBuffer(std::size_t capacity, double percentile = 50.0)
      : capacity_(capacity), percentile_(percentile) {
    if (capacity_ == 0) throw ConfigError("baseline buffer capacity must be >= 1");
    if (percentile_ <= 0.0 || percentile_ > 100.0)
      throw ConfigError("baseline percentile must lie in (0, 100]");
  }

  void push(double group_mean) {
    entries_.push_back(group_mean);
    while (entries_.size() > capacity_) entries_.pop_front();
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return entries_.empty(); }

  // Nearest-rank percentile (lower median at 50): sort ascending and return
  // the element at index ceil(p/100 * n) - 1.
  double p50() const {
    if (entries_.empty()) throw ContractViolation("percentile of an empty baseline buffer");
    std::vector<double> sorted(entries_.begin(), entries_.end());
    std::sort(sorted.begin(), sorted.end());
    std::size_t rank = static_cast<std::size_t>(
        std::ceil(percentile_ / 100.0 * static_cast<double>(sorted.size())));
    return sorted[rank - 1];
  }

  double recalibrate(double reward_total) const { return reward_total - p50(); }

  const std::deque<double>& entries() const { return entries_; }

 private:
  std::size_t capacity_;
  double percentile_;
  std::deque<double> entries_;
};

}  // namespace spear
