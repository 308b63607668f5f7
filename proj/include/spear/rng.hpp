// Counter-based deterministic random streams.
//
// Every random draw in a run comes from an RngStream keyed by the run seed
// plus a substream id tuple (e.g. step, task slot, trajectory index), so any
// draw can be reproduced without replaying the draws before it.
#pragma once

#include <cstdint>
#include <initializer_list>

namespace spear {

namespace detail {

// splitmix64 finalizer (Steele, Lea, Flood 2014).
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t combine(std::uint64_t key, std::uint64_t v) {
  return mix64(key ^ (v + 0x9e3779b97f4a7c15ULL + (key << 6) + (key >> 2)));
}

}  // namespace detail

class RngStream {
 public:
  RngStream(std::uint64_t seed, std::initializer_list<std::uint64_t> substream) {
    key_ = detail::mix64(seed + 0x9e3779b97f4a7c15ULL);
    for (std::uint64_t id : substream) key_ = detail::combine(key_, id);
  }

  explicit RngStream(std::uint64_t seed) : RngStream(seed, {}) {}

  std::uint64_t next_u64() {
    counter_ += 0x9e3779b97f4a7c15ULL;
    return detail::mix64(key_ ^ counter_);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace spear
