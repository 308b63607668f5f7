// Per-step metrics records, streamed as line-delimited JSON.
//
// Wall time is not reproducible across runs, so it goes to a separate timing
// stream; metrics.jsonl is byte-identical for identical (config, seed).
#pragma once

#include <cstdint>
#include <ostream>

#include <json.hpp>

namespace spear {

struct MetricsRecord {
  int step = 0;  // 1-based count of completed training steps
  double success_rate = 0.0;
  double mean_total_reward = 0.0;
  double entropy = 0.0;  // seq-mean-token-sum at the rollout snapshot
  double mean_n_tool_call = 0.0;
  double replay_fill = 0.0;  // |D| / N_D after the step
  double clipped_token_fraction = 0.0;
  double gamma_t = 0.0;
  double mu_t = 0.0;
  double kl_metric = 0.0;
  double wall_ms = 0.0;  // excluded from the deterministic stream
  std::int64_t ratio_overflow_count = 0;  // cumulative
  std::int64_t noop_update_count = 0;     // cumulative
};

// One JSON object per line, keys in fixed (alphabetical) order, no wall_ms.
inline void write_metrics_line(std::ostream& os, const MetricsRecord& r) {
  nlohmann::json j{{"clipped_token_fraction", r.clipped_token_fraction},
                   {"entropy", r.entropy},
                   {"gamma_t", r.gamma_t},
                   {"kl_metric", r.kl_metric},
                   {"mean_n_tool_call", r.mean_n_tool_call},
                   {"mean_total_reward", r.mean_total_reward},
                   {"mu_t", r.mu_t},
                   {"noop_update_count", r.noop_update_count},
                   {"ratio_overflow_count", r.ratio_overflow_count},
                   {"replay_fill", r.replay_fill},
                   {"step", r.step},
                   {"success_rate", r.success_rate}};
  os << j.dump() << "\n";
  os.flush();
}

inline void write_timing_line(std::ostream& os, const MetricsRecord& r) {
  nlohmann::json j{{"step", r.step}, {"wall_ms", r.wall_ms}};
  os << j.dump() << "\n";
  os.flush();
}

}  // namespace spear
