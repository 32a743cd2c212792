#pragma once

// Simulation-based reachability oracle. The state at offset 0 counts: a state
// already in U is labeled unsafe.

#include <cstdint>
#include <span>

#include "npm/hybrid.hpp"

namespace npm {

enum class ReachLabel : std::uint8_t { safe = 0, unsafe = 1 };

inline int to_int(ReachLabel l) { return static_cast<int>(l); }

inline ReachLabel reach_label(const HybridSystemSpec& spec, const HybridState& s, int horizon) {
  if (!spec.valid_state(s)) throw ShapeError(spec.name + ": invalid state for reach_label()");
  HybridState cur = s;
  if (spec.is_unsafe(cur)) return ReachLabel::unsafe;
  for (int i = 0; i < horizon; ++i) {
    cur = step(spec, cur);
    if (spec.is_unsafe(cur)) return ReachLabel::unsafe;
  }
  return ReachLabel::safe;
}

inline ReachLabel reach_label(const HybridSystemSpec& spec, const HybridState& s) {
  return reach_label(spec, s, spec.future_horizon);
}

/// Label of a (H_p+1)-state window: reachability from its last state.
inline ReachLabel label_window(const HybridSystemSpec& spec, std::span<const HybridState> states) {
  if (static_cast<int>(states.size()) != spec.past_horizon + 1)
    throw ShapeError("label_window: expected " + std::to_string(spec.past_horizon + 1) +
                     " states, got " + std::to_string(states.size()));
  return reach_label(spec, states.back());
}

}  // namespace npm
