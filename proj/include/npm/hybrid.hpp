#pragma once

// Discrete-time deterministic hybrid systems:
//   a_i     = C_q(v_i)
//   v_{i+1} = RK4 integration of F_q(v, a_i) over one control period dt
//   (v, q)  <- J(v_{i+1}, q_i)            jumps and resets, post-integration
//   y_i     = mu(v_i, q_i) + w_i,  w_i ~ N(0, diag(noise_std^2))

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "npm/common.hpp"

namespace npm {

struct HybridState {
  std::vector<double> v;
  int q = 0;

  friend bool operator==(const HybridState&, const HybridState&) = default;
};

struct HybridSystemSpec {
  using Dynamics = std::function<void(std::span<const double> v, int q,
                                      std::span<const double> a, std::span<double> dv)>;
  using Control = std::function<std::vector<double>(std::span<const double> v, int q)>;
  using Jump = std::function<void(std::vector<double>& v, int& q)>;
  using Observe = std::function<std::vector<double>(std::span<const double> v, int q)>;
  using Predicate = std::function<bool(std::span<const double> v, int q)>;
  using InitialMode = std::function<int(std::span<const double> v)>;

  std::string name;
  int state_dim = 0;
  int obs_dim = 0;
  int num_modes = 1;

  Dynamics dynamics;
  Control control;      // empty: no control input
  Jump jump;            // empty: no jumps
  Observe observe;
  Predicate unsafe;
  InitialMode initial_mode;  // empty: mode 0

  std::vector<double> noise_std;
  std::vector<double> init_low;
  std::vector<double> init_high;

  int past_horizon = 1;    // H_p
  int future_horizon = 1;  // H_f
  double dt = 0.1;
  int substeps = 1;        // RK4 substeps per control period

  void validate() const {
    if (state_dim < 1 || obs_dim < 1) throw ConfigError(name + ": empty state or observation");
    if (past_horizon < 1 || future_horizon < 1) throw ConfigError(name + ": horizons must be >= 1");
    if (!(dt > 0.0) || substeps < 1) throw ConfigError(name + ": dt must be positive");
    if (static_cast<int>(noise_std.size()) != obs_dim)
      throw ConfigError(name + ": noise_std has wrong dimension");
    for (double s : noise_std)
      if (!(s >= 0.0)) throw ConfigError(name + ": negative noise_std");
    if (static_cast<int>(init_low.size()) != state_dim ||
        static_cast<int>(init_high.size()) != state_dim)
      throw ConfigError(name + ": init_domain has wrong dimension");
    for (int i = 0; i < state_dim; ++i)
      if (!(init_low[i] <= init_high[i])) throw ConfigError(name + ": empty init_domain");
    if (!dynamics || !observe || !unsafe) throw ConfigError(name + ": incomplete model");
  }

  bool valid_state(const HybridState& s) const {
    return static_cast<int>(s.v.size()) == state_dim && s.q >= 0 && s.q < num_modes;
  }

  bool is_unsafe(const HybridState& s) const { return unsafe(s.v, s.q); }
};

struct Trajectory {
  std::vector<HybridState> states;
  double t0 = 0.0;
  double dt = 0.0;

  std::size_t size() const { return states.size(); }
  const HybridState& operator[](std::size_t i) const { return states[i]; }
};

namespace detail {

inline void rk4_step(const HybridSystemSpec& spec, std::vector<double>& v, int q,
                     std::span<const double> a, double h) {
  const std::size_t n = v.size();
  std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n);
  spec.dynamics(v, q, a, k1);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = v[i] + 0.5 * h * k1[i];
  spec.dynamics(tmp, q, a, k2);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = v[i] + 0.5 * h * k2[i];
  spec.dynamics(tmp, q, a, k3);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = v[i] + h * k3[i];
  spec.dynamics(tmp, q, a, k4);
  for (std::size_t i = 0; i < n; ++i)
    v[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
}

}  // namespace detail

/// One control period: hold a = C_q(v), integrate F_q with fixed-step RK4,
/// then evaluate jumps on the post-integration state.
inline HybridState step(const HybridSystemSpec& spec, const HybridState& s) {
  if (!spec.valid_state(s)) throw ShapeError(spec.name + ": invalid state for step()");
  const std::vector<double> a = spec.control ? spec.control(s.v, s.q) : std::vector<double>{};
  HybridState next = s;
  if (!all_finite(a)) throw IntegrationDiverged(spec.name + ": non-finite control input");
  const double h = spec.dt / spec.substeps;
  for (int k = 0; k < spec.substeps; ++k) detail::rk4_step(spec, next.v, next.q, a, h);
  if (!all_finite(next.v)) throw IntegrationDiverged(spec.name + ": non-finite state after integration");
  if (spec.jump) spec.jump(next.v, next.q);
  return next;
}

inline Trajectory simulate(const HybridSystemSpec& spec, const HybridState& s0, int n_steps,
                           double t0 = 0.0) {
  if (n_steps < 0) throw ConfigError("simulate: n_steps must be >= 0");
  Trajectory traj;
  traj.t0 = t0;
  traj.dt = spec.dt;
  traj.states.reserve(static_cast<std::size_t>(n_steps) + 1);
  traj.states.push_back(s0);
  for (int i = 0; i < n_steps; ++i) {
    try {
      traj.states.push_back(step(spec, traj.states.back()));
    } catch (const IntegrationDiverged& e) {
      throw IntegrationDiverged(std::string(e.what()) + " at step " + std::to_string(i), i);
    }
  }
  return traj;
}

/// Noise-free observation mu(v, q).
inline std::vector<double> measure(const HybridSystemSpec& spec, const HybridState& s) {
  return spec.observe(s.v, s.q);
}

/// mu(v, q) + w. One standard-normal draw per channel is consumed even when the
/// channel's std is zero, so rescaling the noise keeps the underlying draws fixed.
inline std::vector<double> observe(const HybridSystemSpec& spec, const HybridState& s, Rng& rng,
                                   double noise_scale = 1.0) {
  std::vector<double> y = measure(spec, s);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double z = normal(rng);
    y[i] += noise_scale * spec.noise_std[i] * z;
  }
  return y;
}

inline HybridState sample_initial(const HybridSystemSpec& spec, Rng& rng) {
  HybridState s;
  s.v.resize(static_cast<std::size_t>(spec.state_dim));
  for (int i = 0; i < spec.state_dim; ++i) {
    std::uniform_real_distribution<double> u(spec.init_low[i], spec.init_high[i]);
    s.v[i] = spec.init_low[i] == spec.init_high[i] ? spec.init_low[i] : u(rng);
  }
  s.q = spec.initial_mode ? spec.initial_mode(s.v) : 0;
  return s;
}

}  // namespace npm
