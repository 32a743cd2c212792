#pragma once

// Benchmark hybrid systems and the model registry.

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "npm/hybrid.hpp"

namespace npm::models {

/// Inverted pendulum on a cart, state (theta, omega), energy observation.
inline HybridSystemSpec inverted_pendulum() {
  HybridSystemSpec m;
  m.name = "ip";
  m.state_dim = 2;
  m.obs_dim = 1;
  m.dynamics = [](std::span<const double> v, int, std::span<const double> a, std::span<double> dv) {
    dv[0] = v[1];
    dv[1] = std::sin(v[0]) - std::cos(v[0]) * a[0];
  };
  m.control = [](std::span<const double> v, int) {
    const double theta = v[0], omega = v[1];
    const double energy = 0.5 * omega + (std::cos(theta) - 1.0);
    double u = 0.0;
    if (energy >= -1.0 && energy <= 1.0) {
      if (std::abs(omega) + std::abs(theta) <= 1.85)
        u = (2.0 * omega + theta + std::sin(theta)) / std::cos(theta);
      else
        u = 0.0;
    } else if (energy < -1.0) {
      u = omega / (1.0 + std::abs(omega)) * std::cos(theta);
    } else {
      u = -omega / (1.0 + std::abs(omega)) * std::cos(theta);
    }
    return std::vector<double>{u};
  };
  m.observe = [](std::span<const double> v, int) {
    return std::vector<double>{v[1] / 2.0 + std::cos(v[0]) - 1.0};
  };
  m.unsafe = [](std::span<const double> v, int) { return std::abs(v[0]) > std::numbers::pi / 6.0; };
  m.noise_std = {std::sqrt(0.005)};
  m.init_low = {-std::numbers::pi / 4.0, -1.5};
  m.init_high = {std::numbers::pi / 4.0, 1.5};
  m.past_horizon = 1;
  m.future_horizon = 5;
  m.dt = 0.06;
  return m;
}

/// Spiking neuron, state (potential, recovery); only the recovery is observed.
inline HybridSystemSpec spiking_neuron() {
  constexpr double a = 0.02, b = 0.2, c = -65.0, d = 8.0, current = 40.0;
  HybridSystemSpec m;
  m.name = "sn";
  m.state_dim = 2;
  m.obs_dim = 1;
  m.dynamics = [](std::span<const double> v, int, std::span<const double>, std::span<double> dv) {
    dv[0] = 0.04 * v[0] * v[0] + 5.0 * v[0] + 140.0 - v[1] + current;
    dv[1] = a * (b * v[0] - v[1]);
  };
  m.jump = [](std::vector<double>& v, int&) {
    if (v[0] >= 30.0) {
      v[0] = c;
      v[1] += d;
    }
  };
  m.observe = [](std::span<const double> v, int) { return std::vector<double>{v[1]}; };
  m.unsafe = [](std::span<const double> v, int) { return v[0] <= -68.5; };
  m.noise_std = {std::sqrt(0.1)};
  // (-68.5, 30]: the open end is immaterial for a continuous draw.
  m.init_low = {-68.5, 0.0};
  m.init_high = {30.0, 25.0};
  m.past_horizon = 4;
  m.future_horizon = 16;
  m.dt = 0.01;
  return m;
}

/// Two coupled Van der Pol oscillators, positions observed.
inline HybridSystemSpec coupled_van_der_pol() {
  HybridSystemSpec m;
  m.name = "cvdp";
  m.state_dim = 4;
  m.obs_dim = 2;
  m.dynamics = [](std::span<const double> v, int, std::span<const double>, std::span<double> dv) {
    dv[0] = v[1];
    dv[1] = (1.0 - v[0] * v[0]) * v[1] - 2.0 * v[0] + v[2];
    dv[2] = v[3];
    dv[3] = (1.0 - v[2] * v[2]) * v[3] - 2.0 * v[2] + v[0];
  };
  m.observe = [](std::span<const double> v, int) { return std::vector<double>{v[0], v[2]}; };
  m.unsafe = [](std::span<const double> v, int) { return v[1] >= 2.75 && v[3] >= 2.75; };
  m.noise_std = {0.1, 0.1};
  m.init_low = {1.25, 2.28, 1.25, 2.28};
  m.init_high = {1.55, 2.32, 1.55, 2.32};
  m.past_horizon = 8;
  m.future_horizon = 7;
  m.dt = 0.05;
  return m;
}

/// Laub-Loomis enzymatic network (7 variables); s4 is hidden.
inline HybridSystemSpec laub_loomis() {
  HybridSystemSpec m;
  m.name = "lalo";
  m.state_dim = 7;
  m.obs_dim = 6;
  m.dynamics = [](std::span<const double> s, int, std::span<const double>, std::span<double> ds) {
    ds[0] = 1.4 * s[2] - 0.9 * s[0];
    ds[1] = 2.5 * s[4] - 1.5 * s[1];
    ds[2] = 0.6 * s[6] - 0.8 * s[1] * s[2];
    ds[3] = 2.0 - 1.3 * s[2] * s[3];
    ds[4] = 0.7 * s[0] - s[3] * s[4];
    ds[5] = 0.3 * s[0] - 3.1 * s[5];
    ds[6] = 1.8 * s[5] - 1.5 * s[1] * s[6];
  };
  m.observe = [](std::span<const double> s, int) {
    return std::vector<double>{s[0], s[1], s[2], s[4], s[5], s[6]};
  };
  m.unsafe = [](std::span<const double> s, int) { return s[3] >= 4.5; };
  m.noise_std = std::vector<double>(6, 0.1);
  m.init_low = std::vector<double>(7, 1.0);
  m.init_high = std::vector<double>(7, 1.4);
  m.past_horizon = 5;
  m.future_horizon = 20;
  m.dt = 0.05;
  return m;
}

struct WaterTankParams {
  double area = 1.0;
  double inflow = 0.1;   // a
  double outflow = 0.1;  // b
  double gravity = 9.81;
  double pump = 1.5;     // m_i
  double pump_on_below = 4.6;
  double pump_off_above = 5.4;
  double initial_threshold = 5.0;
  double safe_low = 4.5;
  double safe_high = 5.5;
};

/// Triple water tank. The mode is a 3-bit mask, bit i set when pump i is on.
inline HybridSystemSpec triple_water_tank(WaterTankParams p = {}) {
  HybridSystemSpec m;
  m.name = "twt";
  m.state_dim = 3;
  m.obs_dim = 3;
  m.num_modes = 8;
  m.dynamics = [p](std::span<const double> v, int q, std::span<const double>, std::span<double> dv) {
    for (int i = 0; i < 3; ++i) {
      const double upstream = i == 0 ? 0.0 : std::max(v[i - 1], 0.0);
      const double level = std::max(v[i], 0.0);
      const double on = (q >> i) & 1 ? p.pump : 0.0;
      dv[i] = (on + p.inflow * std::sqrt(2.0 * p.gravity * upstream) -
               p.outflow * std::sqrt(2.0 * p.gravity * level)) /
              p.area;
    }
  };
  m.jump = [p](std::vector<double>& v, int& q) {
    for (int i = 0; i < 3; ++i) {
      if (v[i] < p.pump_on_below) q |= 1 << i;
      else if (v[i] > p.pump_off_above) q &= ~(1 << i);
    }
  };
  m.initial_mode = [p](std::span<const double> v) {
    int q = 0;
    for (int i = 0; i < 3; ++i)
      if (v[i] < p.initial_threshold) q |= 1 << i;
    return q;
  };
  m.observe = [](std::span<const double> v, int) { return std::vector<double>(v.begin(), v.end()); };
  m.unsafe = [p](std::span<const double> v, int) {
    for (double x : v)
      if (x < p.safe_low || x > p.safe_high) return true;
    return false;
  };
  m.noise_std = {std::sqrt(0.01), std::sqrt(0.01), std::sqrt(0.01)};
  m.init_low = {p.safe_low, p.safe_low, p.safe_low};
  m.init_high = {p.safe_high, p.safe_high, p.safe_high};
  m.past_horizon = 1;
  m.future_horizon = 1;
  m.dt = 0.1;
  return m;
}

/// Linear system dv/dt = A v from a plain-text description:
///
///   # comments
///   dim 3
///   observe 1 2        # observed state indices
///   noise 0.1 0.1      # per observed channel, optional (default 0)
///   unsafe 2 le 0.0    # v[2] <= 0 (or "ge")
///   horizons 1 5       # H_p H_f
///   dt 0.1
///   init -1 1 -1 1 -1 1  # optional lo/hi pairs (default [-1, 1])
///   A
///   <dim rows of dim values, row-major>
inline HybridSystemSpec load_linear_system(std::istream& in, std::string name = "linear") {
  int dim = 0;
  std::vector<int> observed;
  std::vector<double> noise, init;
  int unsafe_index = -1;
  bool unsafe_le = true;
  double threshold = 0.0;
  int hp = 0, hf = 0;
  double dt = 0.0;
  std::vector<double> a;
  bool have_a = false;

  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& what) {
    throw ConfigError("linear system, line " + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (key == "dim") {
      if (!(ls >> dim) || dim < 1) fail("bad dim");
    } else if (key == "observe") {
      for (int i; ls >> i;) observed.push_back(i);
    } else if (key == "noise") {
      for (double x; ls >> x;) noise.push_back(x);
    } else if (key == "unsafe") {
      std::string op;
      if (!(ls >> unsafe_index >> op >> threshold) || (op != "le" && op != "ge")) fail("bad unsafe");
      unsafe_le = op == "le";
    } else if (key == "horizons") {
      if (!(ls >> hp >> hf)) fail("bad horizons");
    } else if (key == "dt") {
      if (!(ls >> dt)) fail("bad dt");
    } else if (key == "init") {
      for (double x; ls >> x;) init.push_back(x);
    } else if (key == "A") {
      if (dim < 1) fail("A before dim");
      a.reserve(static_cast<std::size_t>(dim * dim));
      double x;
      while (static_cast<int>(a.size()) < dim * dim && in >> x) a.push_back(x);
      if (static_cast<int>(a.size()) != dim * dim) fail("A has fewer than dim*dim entries");
      have_a = true;
    } else {
      fail("unknown key '" + key + "'");
    }
    if (!ls.eof() && key != "A") {
      ls >> std::ws;
      if (!ls.eof()) fail("trailing tokens after '" + key + "'");
    }
  }
  if (!have_a) throw ConfigError("linear system: missing A matrix");
  if (observed.empty()) throw ConfigError("linear system: no observed indices");
  for (int i : observed)
    if (i < 0 || i >= dim) throw ConfigError("linear system: observed index out of range");
  if (unsafe_index < 0 || unsafe_index >= dim) throw ConfigError("linear system: unsafe index out of range");
  if (noise.empty()) noise.assign(observed.size(), 0.0);
  if (noise.size() != observed.size()) throw ConfigError("linear system: noise/observe dimension mismatch");
  if (init.empty())
    for (int i = 0; i < dim; ++i) init.insert(init.end(), {-1.0, 1.0});
  if (static_cast<int>(init.size()) != 2 * dim) throw ConfigError("linear system: init dimension mismatch");

  HybridSystemSpec m;
  m.name = std::move(name);
  m.state_dim = dim;
  m.obs_dim = static_cast<int>(observed.size());
  m.dynamics = [a, dim](std::span<const double> v, int, std::span<const double>, std::span<double> dv) {
    for (int i = 0; i < dim; ++i) {
      double acc = 0.0;
      for (int j = 0; j < dim; ++j) acc += a[static_cast<std::size_t>(i * dim + j)] * v[j];
      dv[i] = acc;
    }
  };
  m.observe = [observed](std::span<const double> v, int) {
    std::vector<double> y;
    y.reserve(observed.size());
    for (int i : observed) y.push_back(v[i]);
    return y;
  };
  m.unsafe = [unsafe_index, unsafe_le, threshold](std::span<const double> v, int) {
    return unsafe_le ? v[unsafe_index] <= threshold : v[unsafe_index] >= threshold;
  };
  m.noise_std = noise;
  for (int i = 0; i < dim; ++i) {
    m.init_low.push_back(init[static_cast<std::size_t>(2 * i)]);
    m.init_high.push_back(init[static_cast<std::size_t>(2 * i + 1)]);
  }
  m.past_horizon = hp;
  m.future_horizon = hf;
  m.dt = dt;
  m.validate();
  return m;
}

inline HybridSystemSpec load_linear_system_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot open linear system file " + path);
  return load_linear_system(in, "linear:" + path);
}

/// Registry: ip, sn, cvdp, lalo, twt, linear:<path>.
inline HybridSystemSpec by_name(const std::string& name) {
  HybridSystemSpec m;
  if (name == "ip") m = inverted_pendulum();
  else if (name == "sn") m = spiking_neuron();
  else if (name == "cvdp") m = coupled_van_der_pol();
  else if (name == "lalo") m = laub_loomis();
  else if (name == "twt") m = triple_water_tank();
  else if (name.starts_with("linear:")) return load_linear_system_file(name.substr(7));
  else throw ConfigError("unknown model '" + name + "'");
  m.validate();
  return m;
}

inline std::vector<std::string> builtin_names() { return {"ip", "sn", "cvdp", "lalo", "twt"}; }

}  // namespace npm::models
