// Deterministic, exactly-enumerable multi-turn tool environments.
//
// Two environments ship:
//   calcchain -- accumulator arithmetic; the agent must drive an accumulator
//                to a seed-dependent target and submit it. State encodes
//                (accumulator, target, turn).
//   keydoor   -- 5x5 grid with a key pickup and a door; success means opening
//                the door after holding the key. State encodes
//                (position, has_key, door_open); the turn counter is not part
//                of the indexed state.
//
// Every action exists in a well-formed and a malformed variant. Malformed
// variants are no-ops that clear both per-turn flags, standing in for output
// that fails the format grammar. Transitions are pure functions of
// (state, action, task_seed).
#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <queue>
#include <string>
#include <unordered_set>
#include <vector>

#include "spear/errors.hpp"

namespace spear {

struct ActionId {
  int index = 0;
};

struct EnvState {
  int state_index = 0;
  int turn = 0;
};

struct StepOutcome {
  EnvState next_state;
  bool done = false;
  bool success = false;          // valid only when done
  bool tool_call_valid = false;  // counts toward n_tool_call
  bool well_formed = false;      // counts toward the format gate
};

struct EpisodeSpec {
  std::string env_name;
  std::uint64_t task_seed = 0;
  int max_turns = 1;
};

class Environment {
 public:
  virtual ~Environment() = default;

  const std::string& name() const { return name_; }
  int state_count() const { return state_count_; }
  int action_count() const { return action_count_; }
  int max_turns() const { return max_turns_; }

  virtual std::vector<std::string> action_names() const = 0;
  virtual EnvState reset(const EpisodeSpec& spec) const = 0;
  virtual StepOutcome step(const EnvState& state, ActionId action) const = 0;

 protected:
  Environment(std::string name, int max_turns) : name_(std::move(name)), max_turns_(max_turns) {
    if (max_turns_ < 1) throw ConfigError("env.max_turns must be >= 1, got " + std::to_string(max_turns_));
  }

  void check_spec(const EpisodeSpec& spec) const {
    if (spec.env_name != name_)
      throw ContractViolation("episode spec names env '" + spec.env_name + "', expected '" + name_ + "'");
    if (spec.max_turns != max_turns_)
      throw ContractViolation("episode spec max_turns " + std::to_string(spec.max_turns) +
                              " does not match environment budget " + std::to_string(max_turns_));
  }

  void check_action(ActionId action) const {
    if (action.index < 0 || action.index >= action_count_)
      throw ContractViolation("action index " + std::to_string(action.index) + " out of range [0, " +
                              std::to_string(action_count_) + ")");
  }

  void check_state(const EnvState& state) const {
    if (state.state_index < 0 || state.state_index >= state_count_)
      throw ContractViolation("state index " + std::to_string(state.state_index) + " out of range");
  }

  std::string name_;
  int max_turns_ = 0;
  int state_count_ = 0;
  int action_count_ = 0;
};

// ---------------------------------------------------------------------------
// CalcChain
// ---------------------------------------------------------------------------

class CalcChainEnv final : public Environment {
 public:
  // Well-formed actions first, malformed mirrors after.
  enum Action : int {
    kAdd1 = 0,
    kAdd2 = 1,
    kMul2 = 2,
    kReset = 3,
    kSubmit = 4,
    kAdd1Malformed = 5,
    kAdd2Malformed = 6,
    kMul2Malformed = 7,
    kResetMalformed = 8,
    kSubmitMalformed = 9,
  };

  static constexpr int kAccMax = 20;
  static constexpr int kTargetLo = 5;
  static constexpr int kTargetHi = 15;
  static constexpr int kDefaultMaxTurns = 10;

  struct Decoded {
    int acc = 0;
    int target = 0;
    int turn = 0;
  };

  explicit CalcChainEnv(int max_turns = kDefaultMaxTurns) : Environment("calcchain", max_turns) {
    action_count_ = 10;
    enumerate();
  }

  static int target_for_seed(std::uint64_t seed) {
    return kTargetLo + static_cast<int>(seed % (kTargetHi - kTargetLo + 1));
  }

  std::vector<std::string> action_names() const override {
    return {"ADD1", "ADD2", "MUL2", "RESET", "SUBMIT",
            "ADD1!", "ADD2!", "MUL2!", "RESET!", "SUBMIT!"};
  }

  EnvState reset(const EpisodeSpec& spec) const override {
    check_spec(spec);
    return EnvState{encode({0, target_for_seed(spec.task_seed), 0}), 0};
  }

  StepOutcome step(const EnvState& state, ActionId action) const override {
    check_state(state);
    check_action(action);
    Decoded s = decode(state.state_index);
    if (s.turn != state.turn)
      throw ContractViolation("EnvState.turn disagrees with the encoded turn counter");
    if (s.turn >= max_turns_) throw ContractViolation("step past the turn budget");

    const bool well_formed = action.index < 5;
    Decoded next = s;
    next.turn = s.turn + 1;
    bool submitted = false;
    if (well_formed) {
      switch (action.index) {
        case kAdd1: next.acc = std::min(s.acc + 1, kAccMax); break;
        case kAdd2: next.acc = std::min(s.acc + 2, kAccMax); break;
        case kMul2: next.acc = std::min(s.acc * 2, kAccMax); break;
        case kReset: next.acc = 0; break;
        case kSubmit: submitted = true; break;
      }
    }

    StepOutcome out;
    out.success = submitted && s.acc == s.target;
    out.done = submitted || next.turn == max_turns_;
    out.tool_call_valid = well_formed;
    out.well_formed = well_formed;
    out.next_state = EnvState{encode(next), next.turn};
    return out;
  }

  Decoded decode(int state_index) const {
    check_state(EnvState{state_index, 0});
    return lattice_[canonical_to_lattice_[state_index]];
  }

  int encode(const Decoded& s) const {
    int code = lattice_code(s);
    int idx = lattice_to_canonical_[code];
    if (idx < 0) throw ContractViolation("state (acc,target,turn) not reachable");
    return idx;
  }

 private:
  int lattice_code(const Decoded& s) const {
    return (s.acc * (kTargetHi - kTargetLo + 1) + (s.target - kTargetLo)) * (max_turns_ + 1) + s.turn;
  }

  void enumerate() {
    const int lattice_size = (kAccMax + 1) * (kTargetHi - kTargetLo + 1) * (max_turns_ + 1);
    lattice_.assign(lattice_size, Decoded{});
    for (int acc = 0; acc <= kAccMax; ++acc)
      for (int target = kTargetLo; target <= kTargetHi; ++target)
        for (int turn = 0; turn <= max_turns_; ++turn)
          lattice_[lattice_code({acc, target, turn})] = {acc, target, turn};

    // Reachability sweep. A lattice point is indexed when any episode can
    // enter it; it is expanded further only when entered non-terminally.
    std::vector<char> reached(lattice_size, 0), expanded(lattice_size, 0);
    std::queue<int> frontier;
    for (int target = kTargetLo; target <= kTargetHi; ++target) {
      int code = lattice_code({0, target, 0});
      reached[code] = 1;
      expanded[code] = 1;
      frontier.push(code);
    }
    while (!frontier.empty()) {
      Decoded s = lattice_[frontier.front()];
      frontier.pop();
      for (int a = 0; a < action_count_; ++a) {
        const bool well_formed = a < 5;
        Decoded next = s;
        next.turn = s.turn + 1;
        bool submitted = false;
        if (well_formed) {
          switch (a) {
            case kAdd1: next.acc = std::min(s.acc + 1, kAccMax); break;
            case kAdd2: next.acc = std::min(s.acc + 2, kAccMax); break;
            case kMul2: next.acc = std::min(s.acc * 2, kAccMax); break;
            case kReset: next.acc = 0; break;
            case kSubmit: submitted = true; break;
          }
        }
        const bool done = submitted || next.turn == max_turns_;
        int code = lattice_code(next);
        reached[code] = 1;
        if (!done && !expanded[code]) {
          expanded[code] = 1;
          frontier.push(code);
        }
      }
    }

    lattice_to_canonical_.assign(lattice_size, -1);
    for (int code = 0; code < lattice_size; ++code) {
      if (reached[code]) {
        lattice_to_canonical_[code] = static_cast<int>(canonical_to_lattice_.size());
        canonical_to_lattice_.push_back(code);
      }
    }
    state_count_ = static_cast<int>(canonical_to_lattice_.size());
  }

  std::vector<Decoded> lattice_;
  std::vector<int> lattice_to_canonical_;
  std::vector<int> canonical_to_lattice_;
};

// ---------------------------------------------------------------------------
// KeyDoor
// ---------------------------------------------------------------------------

class KeyDoorEnv final : public Environment {
 public:
  enum Action : int {
    kUp = 0,
    kDown = 1,
    kLeft = 2,
    kRight = 3,
    kInteract = 4,
    kUpMalformed = 5,
    kDownMalformed = 6,
    kLeftMalformed = 7,
    kRightMalformed = 8,
    kInteractMalformed = 9,
  };

  static constexpr int kGrid = 5;
  static constexpr int kDefaultMaxTurns = 30;
  // Fixed layout; the task seed does not move these.
  static constexpr int kStartX = 0, kStartY = 0;
  static constexpr int kKeyX = 2, kKeyY = 1;
  static constexpr int kDoorX = 1, kDoorY = 3;

  struct Decoded {
    int x = 0;
    int y = 0;
    bool has_key = false;
    bool door_open = false;
  };

  explicit KeyDoorEnv(int max_turns = kDefaultMaxTurns) : Environment("keydoor", max_turns) {
    action_count_ = 10;
    enumerate();
  }

  std::vector<std::string> action_names() const override {
    return {"UP", "DOWN", "LEFT", "RIGHT", "INTERACT",
            "UP!", "DOWN!", "LEFT!", "RIGHT!", "INTERACT!"};
  }

  EnvState reset(const EpisodeSpec& spec) const override {
    check_spec(spec);
    return EnvState{encode({kStartX, kStartY, false, false}), 0};
  }

  StepOutcome step(const EnvState& state, ActionId action) const override {
    check_state(state);
    check_action(action);
    if (state.turn >= max_turns_) throw ContractViolation("step past the turn budget");
    Decoded s = decode(state.state_index);

    const bool well_formed = action.index < 5;
    Decoded next = s;
    bool success = false;
    if (well_formed) {
      switch (action.index) {
        case kUp: next.y = std::min(s.y + 1, kGrid - 1); break;
        case kDown: next.y = std::max(s.y - 1, 0); break;
        case kLeft: next.x = std::max(s.x - 1, 0); break;
        case kRight: next.x = std::min(s.x + 1, kGrid - 1); break;
        case kInteract:
          if (s.x == kKeyX && s.y == kKeyY && !s.has_key) {
            next.has_key = true;
          } else if (s.x == kDoorX && s.y == kDoorY && s.has_key && !s.door_open) {
            next.door_open = true;
            success = true;
          }
          break;
      }
    }

    StepOutcome out;
    out.success = success;
    out.done = success || state.turn + 1 == max_turns_;
    out.tool_call_valid = well_formed;
    out.well_formed = well_formed;
    out.next_state = EnvState{encode(next), state.turn + 1};
    return out;
  }

  Decoded decode(int state_index) const {
    check_state(EnvState{state_index, 0});
    int code = canonical_to_lattice_[state_index];
    Decoded s;
    s.door_open = code & 1;
    s.has_key = (code >> 1) & 1;
    s.y = (code >> 2) % kGrid;
    s.x = (code >> 2) / kGrid;
    return s;
  }

  int encode(const Decoded& s) const {
    int idx = lattice_to_canonical_[lattice_code(s)];
    if (idx < 0) throw ContractViolation("state (pos,key,door) not reachable");
    return idx;
  }

 private:
  int lattice_code(const Decoded& s) const {
    return ((s.x * kGrid + s.y) << 2) | (s.has_key ? 2 : 0) | (s.door_open ? 1 : 0);
  }

  void enumerate() {
    const int lattice_size = kGrid * kGrid * 4;
    std::vector<char> reached(lattice_size, 0), expanded(lattice_size, 0);
    // depth[code] = fewest turns to enter; expansion respects the budget.
    std::vector<int> depth(lattice_size, 0);
    std::queue<int> frontier;
    const int start = lattice_code({kStartX, kStartY, false, false});
    reached[start] = 1;
    expanded[start] = 1;
    frontier.push(start);

    auto decode_code = [&](int code) {
      Decoded s;
      s.door_open = code & 1;
      s.has_key = (code >> 1) & 1;
      s.y = (code >> 2) % kGrid;
      s.x = (code >> 2) / kGrid;
      return s;
    };

    while (!frontier.empty()) {
      int code = frontier.front();
      frontier.pop();
      Decoded s = decode_code(code);
      if (depth[code] >= max_turns_) continue;
      for (int a = 0; a < action_count_; ++a) {
        const bool well_formed = a < 5;
        Decoded next = s;
        bool success = false;
        if (well_formed) {
          switch (a) {
            case kUp: next.y = std::min(s.y + 1, kGrid - 1); break;
            case kDown: next.y = std::max(s.y - 1, 0); break;
            case kLeft: next.x = std::max(s.x - 1, 0); break;
            case kRight: next.x = std::min(s.x + 1, kGrid - 1); break;
            case kInteract:
              if (s.x == kKeyX && s.y == kKeyY && !s.has_key) next.has_key = true;
              else if (s.x == kDoorX && s.y == kDoorY && s.has_key && !s.door_open) {
                next.door_open = true;
                success = true;
              }
              break;
          }
        }
        int next_code = lattice_code(next);
        reached[next_code] = 1;
        if (!success && !expanded[next_code]) {
          expanded[next_code] = 1;
          depth[next_code] = depth[code] + 1;
          frontier.push(next_code);
        }
      }
    }

    lattice_to_canonical_.assign(lattice_size, -1);
    for (int code = 0; code < lattice_size; ++code) {
      if (reached[code]) {
        lattice_to_canonical_[code] = static_cast<int>(canonical_to_lattice_.size());
        canonical_to_lattice_.push_back(code);
      }
    }
    state_count_ = static_cast<int>(canonical_to_lattice_.size());
  }

  std::vector<int> lattice_to_canonical_;
  std::vector<int> canonical_to_lattice_;
};

// ---------------------------------------------------------------------------

inline std::unique_ptr<Environment> make_environment(const std::string& name, int max_turns = 0) {
  if (name == "calcchain")
    return std::make_unique<CalcChainEnv>(max_turns > 0 ? max_turns : CalcChainEnv::kDefaultMaxTurns);
  if (name == "keydoor")
    return std::make_unique<KeyDoorEnv>(max_turns > 0 ? max_turns : KeyDoorEnv::kDefaultMaxTurns);
  throw ConfigError("unknown environment '" + name + "' (expected calcchain or keydoor)");
}

// Exhaustive search for a success within the turn budget. Used to verify that
// every shipped (environment, seed) pair admits a solution.
inline bool success_reachable(const Environment& env, const EpisodeSpec& spec) {
  EnvState init = env.reset(spec);
  std::unordered_set<std::int64_t> seen;
  std::queue<EnvState> frontier;
  seen.insert(static_cast<std::int64_t>(init.state_index) * 1024 + init.turn);
  frontier.push(init);
  while (!frontier.empty()) {
    EnvState s = frontier.front();
    frontier.pop();
    if (s.turn >= spec.max_turns) continue;
    for (int a = 0; a < env.action_count(); ++a) {
      StepOutcome out = env.step(s, ActionId{a});
      if (out.success) return true;
      if (out.done) continue;
      std::int64_t key = static_cast<std::int64_t>(out.next_state.state_index) * 1024 + out.next_state.turn;
      if (seen.insert(key).second) frontier.push(out.next_state);
    }
  }
  return false;
}

}  // namespace spear
