// Policy checkpoint serialization.
//
// Layout (little-endian, format version 1):
//   bytes 0..7   magic "SPEARCP1"
//   u32          format_version
//   u32          env_name length, followed by that many name bytes
//   u64          state_count
//   u64          action_count
//   u64          update_counter
//   u64          config_hash
//   f64[...]     logits, row-major [state][action]
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "spear/errors.hpp"
#include "spear/policy.hpp"

namespace spear {

struct Checkpoint {
  std::uint32_t format_version = 1;
  std::string env_name;
  std::uint64_t config_hash = 0;
  PolicyParams params;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'S', 'P', 'E', 'A', 'R', 'C', 'P', '1'};

template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_raw(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractViolation("cannot open checkpoint file '" + path + "' for writing");
  os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::write_raw(os, ckpt.format_version);
  std::uint32_t name_len = static_cast<std::uint32_t>(ckpt.env_name.size());
  detail::write_raw(os, name_len);
  os.write(ckpt.env_name.data(), name_len);
  detail::write_raw(os, static_cast<std::uint64_t>(ckpt.params.state_count));
  detail::write_raw(os, static_cast<std::uint64_t>(ckpt.params.action_count));
  detail::write_raw(os, ckpt.params.version);
  detail::write_raw(os, ckpt.config_hash);
  os.write(reinterpret_cast<const char*>(ckpt.params.logits.data()),
           static_cast<std::streamsize>(ckpt.params.logits.size() * sizeof(double)));
  if (!os) throw ContractViolation("short write to checkpoint file '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractViolation("cannot open checkpoint file '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0)
    throw ContractViolation("'" + path + "' is not a policy checkpoint");
  Checkpoint ckpt;
  detail::read_raw(is, ckpt.format_version);
  if (ckpt.format_version != 1)
    throw ContractViolation("unsupported checkpoint format version " +
                            std::to_string(ckpt.format_version));
  std::uint32_t name_len = 0;
  detail::read_raw(is, name_len);
  ckpt.env_name.resize(name_len);
  is.read(ckpt.env_name.data(), name_len);
  std::uint64_t states = 0, actions = 0;
  detail::read_raw(is, states);
  detail::read_raw(is, actions);
  detail::read_raw(is, ckpt.params.version);
  detail::read_raw(is, ckpt.config_hash);
  ckpt.params.state_count = static_cast<int>(states);
  ckpt.params.action_count = static_cast<int>(actions);
  ckpt.params.logits.resize(states * actions);
  is.read(reinterpret_cast<char*>(ckpt.params.logits.data()),
          static_cast<std::streamsize>(ckpt.params.logits.size() * sizeof(double)));
  if (!is) throw ContractViolation("truncated checkpoint file '" + path + "'");
  return ckpt;
}

}  // namespace spear
