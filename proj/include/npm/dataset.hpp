#pragma once

// Reachability-labeled datasets of (observation window, state window, label).

#include <algorithm>
#include <array>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "npm/io.hpp"
#include "npm/reach.hpp"

namespace npm {

enum class GenMode { independent, sequential };

inline std::string to_string(GenMode m) { return m == GenMode::independent ? "independent" : "sequential"; }

inline GenMode gen_mode_from_string(const std::string& s) {
  if (s == "independent" || s == "ind") return GenMode::independent;
  if (s == "sequential" || s == "seq") return GenMode::sequential;
  throw ConfigError("unknown generation mode '" + s + "'");
}

struct Sample {
  std::vector<double> obs;     // window x obs_dim, time-major
  std::vector<double> states;  // window x state_dim, time-major
  ReachLabel label = ReachLabel::safe;
  std::uint32_t trajectory = 0;  // source trajectory (== sample index in independent mode)
  std::uint32_t offset = 0;      // window index within its trajectory

  friend bool operator==(const Sample&, const Sample&) = default;
};

/// Per-dimension affine map of [min, max] onto [-1, 1]. A degenerate dimension
/// (max == min) maps to 0 and unscales to the constant.
struct Scaler {
  std::vector<double> state_min, state_max, obs_min, obs_max;

  static double forward(double x, double lo, double hi) {
    return hi > lo ? 2.0 * (x - lo) / (hi - lo) - 1.0 : 0.0;
  }
  static double backward(double z, double lo, double hi) {
    return hi > lo ? lo + (z + 1.0) * 0.5 * (hi - lo) : lo;
  }

  void scale_states(std::span<double> s) const { apply(s, state_min, state_max, false); }
  void scale_obs(std::span<double> y) const { apply(y, obs_min, obs_max, false); }
  void unscale_states(std::span<double> s) const { apply(s, state_min, state_max, true); }
  void unscale_obs(std::span<double> y) const { apply(y, obs_min, obs_max, true); }

  std::vector<double> state_range() const {
    std::vector<double> r(state_min.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = state_max[i] - state_min[i];
    return r;
  }

  friend bool operator==(const Scaler&, const Scaler&) = default;

 private:
  static void apply(std::span<double> x, const std::vector<double>& lo, const std::vector<double>& hi,
                    bool inverse) {
    const std::size_t d = lo.size();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const std::size_t k = i % d;
      x[i] = inverse ? backward(x[i], lo[k], hi[k]) : forward(x[i], lo[k], hi[k]);
    }
  }
};

/// How a dataset was produced; enough to replay generation bit-exactly.
struct GenerationInfo {
  GenMode mode = GenMode::independent;
  std::uint64_t seed = 0;
  int count = 0;             // independent: samples; sequential: initial states
  int windows_per_traj = 1;  // sequential only
  int seq_len = 32;
  double noise_scale = 1.0;

  friend bool operator==(const GenerationInfo&, const GenerationInfo&) = default;
};

struct Dataset {
  std::string model_name;
  int state_dim = 0;
  int obs_dim = 0;
  int window = 0;  // H_p + 1
  GenerationInfo gen;
  Scaler scaler;
  bool scaled = false;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  /// Copy with the same metadata and the given subset of samples.
  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d = header_copy();
    d.samples.reserve(idx.size());
    for (std::size_t i : idx) d.samples.push_back(samples.at(i));
    return d;
  }

  Dataset header_copy() const {
    Dataset d;
    d.model_name = model_name;
    d.state_dim = state_dim;
    d.obs_dim = obs_dim;
    d.window = window;
    d.gen = gen;
    d.scaler = scaler;
    d.scaled = scaled;
    return d;
  }

  double positive_fraction() const {
    if (samples.empty()) return 0.0;
    std::size_t pos = 0;
    for (const auto& s : samples) pos += s.label == ReachLabel::unsafe;
    return static_cast<double>(pos) / static_cast<double>(samples.size());
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline constexpr int kMaxGenerationRetries = 20;

namespace detail {

inline Dataset empty_dataset(const HybridSystemSpec& spec, const GenerationInfo& gen) {
  Dataset d;
  d.model_name = spec.name;
  d.state_dim = spec.state_dim;
  d.obs_dim = spec.obs_dim;
  d.window = spec.past_horizon + 1;
  d.gen = gen;
  d.scaler.state_min.assign(static_cast<std::size_t>(spec.state_dim), 0.0);
  d.scaler.state_max = d.scaler.state_min;
  d.scaler.obs_min.assign(static_cast<std::size_t>(spec.obs_dim), 0.0);
  d.scaler.obs_max = d.scaler.obs_min;
  return d;
}

// Simulates one source trajectory of `length` states plus H_f lookahead states,
// observes every state, and labels each window end. Retries from a fresh
// initial state when integration diverges.
struct SourceRun {
  std::vector<HybridState> states;           // length + H_f states
  std::vector<std::vector<double>> obs;      // one per state in [0, length)
};

inline SourceRun run_source(const HybridSystemSpec& spec, std::uint64_t seed, std::uint64_t index,
                            int length, double noise_scale) {
  for (int attempt = 0; attempt < kMaxGenerationRetries; ++attempt) {
    Rng init_rng = substream(seed, index, static_cast<std::uint32_t>(2 * attempt));
    Rng noise_rng = substream(seed, index, static_cast<std::uint32_t>(2 * attempt + 1));
    try {
      const HybridState s0 = sample_initial(spec, init_rng);
      Trajectory traj = simulate(spec, s0, length - 1 + spec.future_horizon);
      SourceRun run;
      run.states = std::move(traj.states);
      run.obs.reserve(static_cast<std::size_t>(length));
      for (int j = 0; j < length; ++j) {
        auto y = observe(spec, run.states[static_cast<std::size_t>(j)], noise_rng, noise_scale);
        if (!all_finite(y)) throw IntegrationDiverged("non-finite observation");
        run.obs.push_back(std::move(y));
      }
      return run;
    } catch (const IntegrationDiverged&) {
      continue;
    }
  }
  throw GenerationFailed(spec.name + ": source " + std::to_string(index) + " diverged " +
                         std::to_string(kMaxGenerationRetries) + " times");
}

// Window whose last state is run.states[end].
inline Sample make_sample(const HybridSystemSpec& spec, const SourceRun& run, int end,
                          std::uint32_t trajectory, std::uint32_t offset) {
  Sample s;
  s.trajectory = trajectory;
  s.offset = offset;
  const int first = end - spec.past_horizon;
  for (int j = first; j <= end; ++j) {
    for (double x : run.obs[static_cast<std::size_t>(j)]) s.obs.push_back(to_float_precision(x));
    for (double x : run.states[static_cast<std::size_t>(j)].v) s.states.push_back(to_float_precision(x));
  }
  // Same result as reach_label(spec, states[end]): step() is pure, so the
  // lookahead states are exactly the ones reach_label would simulate.
  s.label = ReachLabel::safe;
  for (int j = end; j <= end + spec.future_horizon; ++j)
    if (spec.is_unsafe(run.states[static_cast<std::size_t>(j)])) {
      s.label = ReachLabel::unsafe;
      break;
    }
  return s;
}

}  // namespace detail

/// n independent samples; each simulates seq_len states from a fresh initial
/// state and keeps the trailing H_p+1 states and their noisy observations.
inline Dataset gen_independent(const HybridSystemSpec& spec, int n, int seq_len, std::uint64_t seed,
                               double noise_scale = 1.0) {
  spec.validate();
  if (n < 0) throw ConfigError("gen_independent: n must be >= 0");
  if (seq_len < spec.past_horizon + 1) throw ConfigError("gen_independent: seq_len < H_p + 1");
  GenerationInfo gen{GenMode::independent, seed, n, 1, seq_len, noise_scale};
  Dataset d = detail::empty_dataset(spec, gen);
  d.samples.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto run = detail::run_source(spec, seed, static_cast<std::uint64_t>(i), seq_len, noise_scale);
    d.samples.push_back(detail::make_sample(spec, run, seq_len - 1, static_cast<std::uint32_t>(i), 0));
  }
  return d;
}

/// n_init trajectories of (windows_per_traj - 1) + seq_len states, each cut
/// into windows_per_traj stride-1 windows of seq_len states.
inline Dataset gen_sequential(const HybridSystemSpec& spec, int n_init, int windows_per_traj,
                              std::uint64_t seed, int seq_len = 32, double noise_scale = 1.0) {
  spec.validate();
  if (n_init < 0) throw ConfigError("gen_sequential: n_init must be >= 0");
  if (windows_per_traj < 1) throw ConfigError("gen_sequential: windows_per_traj must be >= 1");
  if (seq_len < spec.past_horizon + 1) throw ConfigError("gen_sequential: seq_len < H_p + 1");
  GenerationInfo gen{GenMode::sequential, seed, n_init, windows_per_traj, seq_len, noise_scale};
  Dataset d = detail::empty_dataset(spec, gen);
  d.samples.reserve(static_cast<std::size_t>(n_init) * static_cast<std::size_t>(windows_per_traj));
  const int length = windows_per_traj - 1 + seq_len;
  for (int j = 0; j < n_init; ++j) {
    const auto run = detail::run_source(spec, seed, static_cast<std::uint64_t>(j), length, noise_scale);
    for (int k = 0; k < windows_per_traj; ++k)
      d.samples.push_back(detail::make_sample(spec, run, k + seq_len - 1, static_cast<std::uint32_t>(j),
                                              static_cast<std::uint32_t>(k)));
  }
  return d;
}

/// Replays the generation recorded in `gen` with a different noise scale.
inline Dataset regenerate(const HybridSystemSpec& spec, const GenerationInfo& gen, double noise_scale) {
  return gen.mode == GenMode::independent
             ? gen_independent(spec, gen.count, gen.seq_len, gen.seed, noise_scale)
             : gen_sequential(spec, gen.count, gen.windows_per_traj, gen.seed, gen.seq_len, noise_scale);
}

inline Scaler fit_scaler(const Dataset& d) {
  Scaler sc;
  const auto sd = static_cast<std::size_t>(d.state_dim), od = static_cast<std::size_t>(d.obs_dim);
  if (d.empty()) {
    sc.state_min.assign(sd, 0.0);
    sc.state_max = sc.state_min;
    sc.obs_min.assign(od, 0.0);
    sc.obs_max = sc.obs_min;
    return sc;
  }
  sc.state_min.assign(sd, std::numeric_limits<double>::infinity());
  sc.state_max.assign(sd, -std::numeric_limits<double>::infinity());
  sc.obs_min.assign(od, std::numeric_limits<double>::infinity());
  sc.obs_max.assign(od, -std::numeric_limits<double>::infinity());
  for (const auto& s : d.samples) {
    for (std::size_t i = 0; i < s.states.size(); ++i) {
      sc.state_min[i % sd] = std::min(sc.state_min[i % sd], s.states[i]);
      sc.state_max[i % sd] = std::max(sc.state_max[i % sd], s.states[i]);
    }
    for (std::size_t i = 0; i < s.obs.size(); ++i) {
      sc.obs_min[i % od] = std::min(sc.obs_min[i % od], s.obs[i]);
      sc.obs_max[i % od] = std::max(sc.obs_max[i % od], s.obs[i]);
    }
  }
  return sc;
}

/// Maps every value through d.scaler onto [-1, 1] (for the split the scaler was fitted on).
inline Dataset scale(const Dataset& d) {
  if (d.scaled) throw ConfigError("scale: dataset already scaled");
  Dataset out = d;
  for (auto& s : out.samples) {
    out.scaler.scale_states(s.states);
    out.scaler.scale_obs(s.obs);
  }
  out.scaled = true;
  return out;
}

inline Dataset unscale(const Dataset& d) {
  if (!d.scaled) throw ConfigError("unscale: dataset is not scaled");
  Dataset out = d;
  for (auto& s : out.samples) {
    out.scaler.unscale_states(s.states);
    out.scaler.unscale_obs(s.obs);
  }
  out.scaled = false;
  return out;
}

/// Disjoint train/calibration/test splits. Sequential datasets are split by
/// source trajectory: once a split is full, the rest of the trajectory it was
/// drawing from is dropped instead of spilling into the next split.
inline std::array<Dataset, 3> split(const Dataset& d, std::size_t n_train, std::size_t n_calib,
                                    std::size_t n_test, std::uint64_t seed) {
  const std::array<std::size_t, 3> want{n_train, n_calib, n_test};
  if (n_train + n_calib + n_test > d.size())
    throw ConfigError("split: insufficient samples (" + std::to_string(d.size()) + " < " +
                      std::to_string(n_train + n_calib + n_test) + ")");
  Rng rng = substream(seed, 0, 0x5e11u);
  std::array<std::vector<std::size_t>, 3> idx;

  if (d.gen.mode == GenMode::independent) {
    std::vector<std::size_t> perm(d.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::size_t pos = 0;
    for (int k = 0; k < 3; ++k)
      for (std::size_t i = 0; i < want[static_cast<std::size_t>(k)]; ++i)
        idx[static_cast<std::size_t>(k)].push_back(perm[pos++]);
  } else {
    std::map<std::uint32_t, std::vector<std::size_t>> by_traj;
    for (std::size_t i = 0; i < d.size(); ++i) by_traj[d.samples[i].trajectory].push_back(i);
    std::vector<std::uint32_t> trajs;
    for (const auto& [t, _] : by_traj) trajs.push_back(t);
    std::shuffle(trajs.begin(), trajs.end(), rng);
    std::size_t k = 0;
    for (std::uint32_t t : trajs) {
      while (k < 3 && idx[k].size() == want[k]) ++k;
      if (k == 3) break;
      for (std::size_t i : by_traj[t]) {
        if (idx[k].size() == want[k]) break;
        idx[k].push_back(i);
      }
    }
    for (std::size_t j = 0; j < 3; ++j)
      if (idx[j].size() != want[j])
        throw ConfigError("split: not enough trajectories for whole-trajectory splits");
  }
  return {d.subset(idx[0]), d.subset(idx[1]), d.subset(idx[2])};
}

inline constexpr int kDatasetFormatVersion = 1;

inline io::json scaler_to_json(const Scaler& s) {
  return {{"state_min", s.state_min}, {"state_max", s.state_max}, {"obs_min", s.obs_min}, {"obs_max", s.obs_max}};
}

inline Scaler scaler_from_json(const io::json& j) {
  Scaler s;
  j.at("state_min").get_to(s.state_min);
  j.at("state_max").get_to(s.state_max);
  j.at("obs_min").get_to(s.obs_min);
  j.at("obs_max").get_to(s.obs_max);
  return s;
}

inline io::json generation_to_json(const GenerationInfo& g) {
  return {{"mode", to_string(g.mode)},    {"seed", g.seed},       {"count", g.count},
          {"windows_per_traj", g.windows_per_traj}, {"seq_len", g.seq_len}, {"noise_scale", g.noise_scale}};
}

inline GenerationInfo generation_from_json(const io::json& j) {
  GenerationInfo g;
  g.mode = gen_mode_from_string(j.at("mode").get<std::string>());
  g.seed = j.at("seed").get<std::uint64_t>();
  g.count = j.at("count").get<int>();
  g.windows_per_traj = j.at("windows_per_traj").get<int>();
  g.seq_len = j.at("seq_len").get<int>();
  g.noise_scale = j.at("noise_scale").get<double>();
  return g;
}

/// Directory layout: meta.json, obs.f32, states.f32, labels.u8, index.u32
/// (trajectory, offset pairs). Only unscaled datasets are stored; their values
/// are float-exact by construction so the round trip is lossless.
inline void save(const Dataset& d, const std::filesystem::path& dir) {
  if (d.scaled) throw ConfigError("save: store unscaled datasets only");
  std::filesystem::create_directories(dir);
  std::vector<float> obs, states;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint32_t> index;
  obs.reserve(d.size() * static_cast<std::size_t>(d.window * d.obs_dim));
  states.reserve(d.size() * static_cast<std::size_t>(d.window * d.state_dim));
  for (const auto& s : d.samples) {
    if (s.obs.size() != static_cast<std::size_t>(d.window * d.obs_dim) ||
        s.states.size() != static_cast<std::size_t>(d.window * d.state_dim))
      throw ShapeError("save: sample shape disagrees with dataset header");
    obs.insert(obs.end(), s.obs.begin(), s.obs.end());
    states.insert(states.end(), s.states.begin(), s.states.end());
    labels.push_back(static_cast<std::uint8_t>(s.label));
    index.push_back(s.trajectory);
    index.push_back(s.offset);
  }
  io::json files = io::json::object();
  io::write_array(dir, "obs.f32", obs, files);
  io::write_array(dir, "states.f32", states, files);
  io::write_array(dir, "labels.u8", labels, files);
  io::write_array(dir, "index.u32", index, files);
  io::json meta = {{"format", "npm-dataset"},
                   {"format_version", kDatasetFormatVersion},
                   {"model", d.model_name},
                   {"count", d.size()},
                   {"state_dim", d.state_dim},
                   {"obs_dim", d.obs_dim},
                   {"window", d.window},
                   {"generation", generation_to_json(d.gen)},
                   {"scaler", scaler_to_json(d.scaler)},
                   {"files", files}};
  io::write_json(dir / "meta.json", meta);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const io::json meta = io::read_json(dir / "meta.json");
  io::check_format(meta, "npm-dataset", kDatasetFormatVersion);
  Dataset d;
  try {
    d.model_name = meta.at("model").get<std::string>();
    d.state_dim = meta.at("state_dim").get<int>();
    d.obs_dim = meta.at("obs_dim").get<int>();
    d.window = meta.at("window").get<int>();
    d.gen = generation_from_json(meta.at("generation"));
    d.scaler = scaler_from_json(meta.at("scaler"));
  } catch (const io::json::exception& e) {
    throw IntegrityError(std::string("malformed dataset meta: ") + e.what());
  }
  const auto& files = meta.at("files");
  const auto obs = io::read_array<float>(dir, "obs.f32", files);
  const auto states = io::read_array<float>(dir, "states.f32", files);
  const auto labels = io::read_array<std::uint8_t>(dir, "labels.u8", files);
  const auto index = io::read_array<std::uint32_t>(dir, "index.u32", files);
  const std::size_t n = meta.at("count").get<std::size_t>();
  const auto ow = static_cast<std::size_t>(d.window * d.obs_dim);
  const auto sw = static_cast<std::size_t>(d.window * d.state_dim);
  if (obs.size() != n * ow || states.size() != n * sw || labels.size() != n || index.size() != 2 * n)
    throw IntegrityError("dataset arrays disagree with meta counts");
  d.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = d.samples[i];
    s.obs.assign(obs.begin() + static_cast<std::ptrdiff_t>(i * ow), obs.begin() + static_cast<std::ptrdiff_t>((i + 1) * ow));
    s.states.assign(states.begin() + static_cast<std::ptrdiff_t>(i * sw),
                    states.begin() + static_cast<std::ptrdiff_t>((i + 1) * sw));
    if (labels[i] > 1) throw IntegrityError("label out of range");
    s.label = static_cast<ReachLabel>(labels[i]);
    s.trajectory = index[2 * i];
    s.offset = index[2 * i + 1];
  }
  return d;
}

/// Content hash over labels and values; used to detect test-set contamination.
inline std::uint64_t content_hash(const Dataset& d) {
  std::uint64_t h = io::fnv1a(d.model_name);
  for (const auto& s : d.samples) {
    h = io::fnv1a(std::string_view(reinterpret_cast<const char*>(s.obs.data()), s.obs.size() * sizeof(double)), h);
    h = io::fnv1a(std::string_view(reinterpret_cast<const char*>(s.states.data()), s.states.size() * sizeof(double)), h);
    const char l = static_cast<char>(s.label);
    h = io::fnv1a(std::string_view(&l, 1), h);
  }
  return h;
}

}  // namespace npm
