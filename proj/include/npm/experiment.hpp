#pragma once

// Experiment configuration, on-disk experiment bundles and the commands the CLI
// dispatches to: gen, train, eval, active, anomaly, compare-se.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "npm/active.hpp"
#include "npm/models.hpp"
#include "npm/ukf.hpp"

namespace npm::exp {

namespace fs = std::filesystem;
using io::json;

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig {
  std::string model = "ip";
  GenMode mode = GenMode::independent;
  Approach approach = Approach::two_step;
  Profile profile = Profile::desk;
  std::vector<std::uint64_t> seeds{0};
  std::vector<double> eps{0.05};
  int n_train = 0, n_calib = 0, n_test = 0;  // 0: profile default
  int windows = 10;                          // sequential windows per trajectory
  // Desk-profile training; the paper profile uses the published settings.
  int classifier_epochs = 30;
  int estimator_epochs = 30;
  int fine_tune_epochs = 8;
  double lr = 1e-3;
  double fine_tune_lr = 1e-4;
  int batch = 64;
  int k_folds = kDefaultFolds;
  double svc_lambda = 1e-3;
  int al_pool = 0;  // 0: profile default
  int al_iters = 1;
  bool al_warm_start = true;
  double al_train_fraction = -1.0;  // < 0: keep the current train/calib ratio
  double noise_scale = 1.0;

  std::uint64_t seed() const { return seeds.front(); }

  std::array<std::size_t, 3> split_sizes() const {
    const bool desk = profile == Profile::desk;
    return {static_cast<std::size_t>(n_train ? n_train : desk ? 5000 : 50000),
            static_cast<std::size_t>(n_calib ? n_calib : desk ? 2000 : 8500),
            static_cast<std::size_t>(n_test ? n_test : desk ? 2000 : 10000)};
  }
  int pool_size() const { return al_pool ? al_pool : profile == Profile::desk ? 5000 : 50000; }

  MonitorTrainOptions train_options() const {
    if (profile == Profile::paper) return paper_train_options(approach, seed());
    MonitorTrainOptions o;
    o.profile = Profile::desk;
    o.classifier = {lr, classifier_epochs, batch, seed()};
    o.estimator = {lr, estimator_epochs, batch, seed() + 1};
    o.fine_tune = {fine_tune_lr, fine_tune_epochs, batch, seed() + 2};
    return o;
  }

  CalibrationOptions calibration_options() const {
    CalibrationOptions c;
    c.k_folds = k_folds;
    c.svc.lambda = svc_lambda;
    c.seed = seed();
    return c;
  }

  void validate() const {
    models::by_name(model);
    if (seeds.empty()) throw ConfigError("config: seeds must be nonempty");
    if (eps.empty()) throw ConfigError("config: eps must be nonempty");
    for (double e : eps)
      if (!(e > 0.0 && e < 1.0)) throw ConfigError("config: eps values must lie in (0, 1)");
    if (n_train < 0 || n_calib < 0 || n_test < 0) throw ConfigError("config: split sizes must be >= 0");
    if (windows < 1) throw ConfigError("config: windows must be >= 1");
    if (classifier_epochs < 0 || estimator_epochs < 0 || fine_tune_epochs < 0)
      throw ConfigError("config: epochs must be >= 0");
    if (!(lr > 0.0) || !(fine_tune_lr > 0.0)) throw ConfigError("config: learning rates must be positive");
    if (batch < 1) throw ConfigError("config: batch must be >= 1");
    if (k_folds < 2) throw ConfigError("config: k_folds must be >= 2");
    if (!(svc_lambda > 0.0)) throw ConfigError("config: svc_lambda must be positive");
    if (al_pool < 0 || al_iters < 0) throw ConfigError("config: al_pool and al_iters must be >= 0");
    if (al_train_fraction > 1.0) throw ConfigError("config: al_train_fraction must be <= 1");
    if (!(noise_scale >= 0.0) || !std::isfinite(noise_scale)) throw ConfigError("config: noise_scale must be >= 0");
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc{} || r.ptr != v.data() + v.size())
    throw ConfigError("config: bad value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean '" + v + "' for " + key);
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_number<T>(key, trim(item)));
  return out;
}

inline std::string join(const auto& xs) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
  return os.str();
}

}  // namespace detail

/// Applies one key = value setting. Unknown keys and malformed values are config errors.
inline void set_key(ExperimentConfig& c, const std::string& key, const std::string& v) {
  using detail::parse_number;
  if (key == "model") c.model = v;
  else if (key == "mode") c.mode = gen_mode_from_string(v);
  else if (key == "approach") c.approach = approach_from_string(v);
  else if (key == "profile") c.profile = profile_from_string(v);
  else if (key == "seeds") c.seeds = detail::parse_list<std::uint64_t>(key, v);
  else if (key == "eps") c.eps = detail::parse_list<double>(key, v);
  else if (key == "n_train") c.n_train = parse_number<int>(key, v);
  else if (key == "n_calib") c.n_calib = parse_number<int>(key, v);
  else if (key == "n_test") c.n_test = parse_number<int>(key, v);
  else if (key == "windows") c.windows = parse_number<int>(key, v);
  else if (key == "classifier_epochs") c.classifier_epochs = parse_number<int>(key, v);
  else if (key == "estimator_epochs") c.estimator_epochs = parse_number<int>(key, v);
  else if (key == "fine_tune_epochs") c.fine_tune_epochs = parse_number<int>(key, v);
  else if (key == "lr") c.lr = parse_number<double>(key, v);
  else if (key == "fine_tune_lr") c.fine_tune_lr = parse_number<double>(key, v);
  else if (key == "batch") c.batch = parse_number<int>(key, v);
  else if (key == "k_folds") c.k_folds = parse_number<int>(key, v);
  else if (key == "svc_lambda") c.svc_lambda = parse_number<double>(key, v);
  else if (key == "al_pool") c.al_pool = parse_number<int>(key, v);
  else if (key == "al_iters") c.al_iters = parse_number<int>(key, v);
  else if (key == "al_warm_start") c.al_warm_start = detail::parse_bool(key, v);
  else if (key == "al_train_fraction") c.al_train_fraction = parse_number<double>(key, v);
  else if (key == "noise_scale") c.noise_scale = parse_number<double>(key, v);
  else throw ConfigError("config: unknown key '" + key + "'");
}

/// Parses the key = value config format ('#' starts a comment) on top of `base`.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
  std::istringstream in(text);
  std::map<std::string, int> seen;
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (seen.count(key))
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    seen[key] = line_no;
    try {
      set_key(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

inline ExperimentConfig load_config(const fs::path& path, ExperimentConfig base = {}) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse_config(io::read_file(path), std::move(base));
}

/// Canonical text form; parse_config(to_text(c)) == c.
inline std::string to_text(const ExperimentConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "model = " << c.model << "\n"
     << "mode = " << to_string(c.mode) << "\n"
     << "approach = " << to_string(c.approach) << "\n"
     << "profile = " << to_string(c.profile) << "\n"
     << "seeds = " << detail::join(c.seeds) << "\n"
     << "eps = " << detail::join(c.eps) << "\n"
     << "n_train = " << c.n_train << "\n"
     << "n_calib = " << c.n_calib << "\n"
     << "n_test = " << c.n_test << "\n"
     << "windows = " << c.windows << "\n"
     << "classifier_epochs = " << c.classifier_epochs << "\n"
     << "estimator_epochs = " << c.estimator_epochs << "\n"
     << "fine_tune_epochs = " << c.fine_tune_epochs << "\n"
     << "lr = " << c.lr << "\n"
     << "fine_tune_lr = " << c.fine_tune_lr << "\n"
     << "batch = " << c.batch << "\n"
     << "k_folds = " << c.k_folds << "\n"
     << "svc_lambda = " << c.svc_lambda << "\n"
     << "al_pool = " << c.al_pool << "\n"
     << "al_iters = " << c.al_iters << "\n"
     << "al_warm_start = " << (c.al_warm_start ? "true" : "false") << "\n"
     << "al_train_fraction = " << c.al_train_fraction << "\n"
     << "noise_scale = " << c.noise_scale << "\n";
  return os.str();
}

inline std::uint64_t config_hash(const ExperimentConfig& c) { return io::fnv1a(to_text(c)); }

// ---------------------------------------------------------------------------
// Exit codes

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const MissingArtifact*>(&e)) return 3;
  if (dynamic_cast<const NumericalError*>(&e)) return 4;
  if (dynamic_cast<const IntegrityError*>(&e)) return 5;
  return 1;
}

// ---------------------------------------------------------------------------
// Calibration artifacts on disk

inline constexpr int kCalibrationFormatVersion = 1;
inline constexpr int kBundleFormatVersion = 1;

inline void save(const CalibrationArtifacts& a, const fs::path& dir) {
  fs::create_directories(dir);
  json files = json::object();
  io::write_array(dir, "monitor.f64", a.monitor.scores(), files);
  io::write_array(dir, "nsc.f64", a.nsc.scores(), files);
  io::write_array(dir, "nse.f64", a.nse.scores(), files);
  io::write_json(dir / "meta.json", {{"format", "npm-calibration"},
                                     {"format_version", kCalibrationFormatVersion},
                                     {"seed", a.seed},
                                     {"rule", to_json(a.rule)},
                                     {"files", files}});
}

inline CalibrationArtifacts load_calibration(const fs::path& dir) {
  const json meta = io::read_json(dir / "meta.json");
  io::check_format(meta, "npm-calibration", kCalibrationFormatVersion);
  CalibrationArtifacts a;
  try {
    a.seed = meta.at("seed").get<std::uint64_t>();
    a.rule = rule_from_json(meta.at("rule"));
    a.monitor = cp::CalibrationSet(io::read_array<double>(dir, "monitor.f64", meta.at("files")));
    a.nsc = cp::CalibrationSet(io::read_array<double>(dir, "nsc.f64", meta.at("files")));
    a.nse = cp::CalibrationSet(io::read_array<double>(dir, "nse.f64", meta.at("files")));
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("malformed calibration meta: ") + e.what());
  } catch (const NumericalError& e) {
    throw IntegrityError(std::string("corrupt calibration scores: ") + e.what());
  }
  return a;
}

// ---------------------------------------------------------------------------
// Bundles

/// A trained experiment: config, unscaled splits (each carrying the training
/// scaler), the monitor, and its calibration.
struct Bundle {
  ExperimentConfig config;
  json source;  // where the splits came from
  Dataset train, calib, test;
  MonitorModel model;
  CalibrationArtifacts cal;

  HybridSystemSpec spec() const { return models::by_name(config.model); }
};

inline void save(const Bundle& b, const fs::path& dir) {
  fs::create_directories(dir / "reports");
  save(b.train, dir / "data" / "train");
  save(b.calib, dir / "data" / "calib");
  save(b.test, dir / "data" / "test");
  save(b.model, dir / "model");
  save(b.cal, dir / "calibration");
  io::write_file(dir / "config.txt", to_text(b.config));
  io::write_json(dir / "bundle.json", {{"format", "npm-bundle"},
                                       {"format_version", kBundleFormatVersion},
                                       {"version", kVersion},
                                       {"config_hash", io::hex64(config_hash(b.config))},
                                       {"seed", b.config.seed()},
                                       {"approach", to_string(b.model.kind)},
                                       {"source", b.source},
                                       {"splits",
                                        {{"train", {{"path", "data/train"}, {"hash", io::hex64(content_hash(b.train))}}},
                                         {"calib", {{"path", "data/calib"}, {"hash", io::hex64(content_hash(b.calib))}}},
                                         {"test", {{"path", "data/test"}, {"hash", io::hex64(content_hash(b.test))}}}}},
                                       {"model", "model"},
                                       {"calibration", "calibration"}});
}

inline Bundle load_bundle(const fs::path& dir) {
  if (!fs::exists(dir / "bundle.json")) throw MissingArtifact("not a bundle (no bundle.json): " + dir.string());
  const json meta = io::read_json(dir / "bundle.json");
  io::check_format(meta, "npm-bundle", kBundleFormatVersion);
  Bundle b;
  try {
    b.config = parse_config(io::read_file(dir / "config.txt"));
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("bundle config: ") + e.what());
  }
  try {
    if (meta.at("config_hash").get<std::string>() != io::hex64(config_hash(b.config)))
      throw IntegrityError("bundle config does not match its recorded hash");
    b.source = meta.at("source");
    b.train = load_dataset(dir / "data" / "train");
    b.calib = load_dataset(dir / "data" / "calib");
    b.test = load_dataset(dir / "data" / "test");
    for (const auto& [name, d] : {std::pair{"train", &b.train}, {"calib", &b.calib}, {"test", &b.test}})
      if (meta.at("splits").at(name).at("hash").get<std::string>() != io::hex64(content_hash(*d)))
        throw IntegrityError(std::string("bundle split '") + name + "' does not match its recorded hash");
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("malformed bundle meta: ") + e.what());
  }
  b.model = load_model(dir / "model");
  b.cal = load_calibration(dir / "calibration");
  return b;
}

// ---------------------------------------------------------------------------
// Reports

inline const char* kReportColumns =
    "model,mode,approach,profile,seed,config_hash,version,stage,eps,accuracy,detection,fn,fp,rejection,coverage,"
    "efficiency";

inline std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

inline json report_header(const ExperimentConfig& c) {
  return {{"model", c.model},
          {"mode", to_string(c.mode)},
          {"approach", to_string(c.approach)},
          {"profile", to_string(c.profile)},
          {"seed", c.seed()},
          {"config_hash", io::hex64(config_hash(c))},
          {"version", kVersion}};
}

/// One table row: the detection report plus classification coverage/efficiency at eps.
inline json metrics(const Evaluation& e, double eps) {
  const auto s = monitor_summary(e, eps);
  return {{"eps", eps},
          {"accuracy", e.detection.accuracy()},
          {"detection", e.detection.detection_rate()},
          {"fn", e.detection.fn_string()},
          {"fp", e.detection.fp_string()},
          {"rejection", e.detection.rejection_rate()},
          {"coverage", s.coverage},
          {"efficiency", s.efficiency},
          {"accepted_error_rate", e.detection.accepted_error_rate()},
          {"errors", e.detection.errors},
          {"n", e.detection.n}};
}

inline std::string csv_row(const ExperimentConfig& c, const std::string& stage, const json& m) {
  std::string row = c.model + "," + to_string(c.mode) + "," + to_string(c.approach) + "," + to_string(c.profile) +
                    "," + std::to_string(c.seed()) + "," + io::hex64(config_hash(c)) + "," + kVersion + "," + stage;
  row += "," + fmt(m.at("eps").get<double>());
  row += "," + fmt(m.at("accuracy").get<double>());
  row += "," + fmt(m.at("detection").get<double>());
  row += "," + m.at("fn").get<std::string>();
  row += "," + m.at("fp").get<std::string>();
  row += "," + fmt(m.at("rejection").get<double>());
  row += "," + fmt(m.at("coverage").get<double>());
  row += "," + fmt(m.at("efficiency").get<double>());
  return row + "\n";
}

inline std::vector<double> sweep_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 10; ++i) g.push_back(i / 100.0);
  return g;
}

// ---------------------------------------------------------------------------
// Commands

inline Dataset generate(const HybridSystemSpec& spec, const ExperimentConfig& c, int n, std::uint64_t seed,
                        double noise_scale = 1.0) {
  if (n < 1) throw ConfigError("gen: --n must be >= 1");
  if (c.mode == GenMode::independent) return gen_independent(spec, n, 32, seed, noise_scale);
  const int n_init = (n + c.windows - 1) / c.windows;
  Dataset d = gen_sequential(spec, n_init, c.windows, seed, 32, noise_scale);
  if (d.size() == static_cast<std::size_t>(n)) return d;
  std::vector<std::size_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return d.subset(idx);
}

inline json cmd_gen(const ExperimentConfig& c, int n, const fs::path& out) {
  c.validate();
  const auto spec = models::by_name(c.model);
  const Dataset d = generate(spec, c, n, c.seed());
  save(d, out);
  return {{"model", c.model},
          {"mode", to_string(c.mode)},
          {"count", d.size()},
          {"positive_fraction", d.positive_fraction()},
          {"seed", c.seed()},
          {"hash", io::hex64(content_hash(d))},
          {"out", out.string()}};
}

inline Dataset scaled_copy(Dataset d) { return scale(d); }

/// Splits, scales, trains and calibrates; the config's model and mode come from the dataset.
inline Bundle train_bundle(ExperimentConfig c, const Dataset& data, json source) {
  c.model = data.model_name;
  c.mode = data.gen.mode;
  if (c.mode == GenMode::sequential) c.windows = data.gen.windows_per_traj;
  c.validate();
  const auto sz = c.split_sizes();
  auto parts = split(data, sz[0], sz[1], sz[2], c.seed());
  const Scaler sc = fit_scaler(parts[0]);
  for (auto& p : parts) p.scaler = sc;
  Bundle b;
  b.config = c;
  b.source = std::move(source);
  b.train = parts[0];
  b.calib = parts[1];
  b.test = parts[2];
  b.model = train_monitor(scale(b.train), c.approach, c.train_options());
  b.cal = calibrate(b.model, scale(b.calib), c.calibration_options());
  return b;
}

inline json cmd_train(const ExperimentConfig& c, const fs::path& data_dir, const fs::path& out) {
  const Dataset data = load_dataset(data_dir);
  const Bundle b = train_bundle(c, data, {{"path", fs::absolute(data_dir).lexically_normal().string()},
                                          {"hash", io::hex64(content_hash(data))},
                                          {"count", data.size()}});
  save(b, out);
  const json report = {{"header", report_header(b.config)}, {"training", b.model.metadata},
                       {"calibration_size", b.cal.monitor.size()}, {"rule", to_json(b.cal.rule)}};
  io::write_json(out / "reports" / "train.json", report);
  return report;
}

/// Evaluation report: one row per eps plus the eps sweep for the deployed monitor
/// and, for two-step monitors, the NSC and NSE regions.
inline json eval_report(const Bundle& b, const Evaluation& e) {
  json rows = json::array();
  for (double eps : b.config.eps) rows.push_back(metrics(e, eps));
  json sweep = json::array();
  for (double eps : sweep_grid()) {
    const auto m = monitor_summary(e, eps);
    json pt = {{"eps", eps}, {"coverage", m.coverage}, {"efficiency", m.efficiency}};
    if (b.model.kind == Approach::two_step) {
      const auto n = nsc_summary(e, eps);
      const auto r = nse_summary(b.cal, e, eps);
      pt["nsc_coverage"] = n.coverage;
      pt["nsc_efficiency"] = n.efficiency;
      pt["nse_coverage"] = r.coverage;
      pt["nse_width"] = r.efficiency;
    }
    sweep.push_back(pt);
  }
  return {{"header", report_header(b.config)}, {"rows", rows}, {"sweep", sweep}, {"detection", to_json(e.detection)}};
}

inline json cmd_eval(const fs::path& bundle_dir, const std::vector<double>& eps) {
  Bundle b = load_bundle(bundle_dir);
  if (!eps.empty()) b.config.eps = eps;
  b.config.validate();
  const Evaluation e = evaluate(b.model, b.cal, scale(b.test), b.config.seed());
  const json report = eval_report(b, e);
  std::string csv = std::string(kReportColumns) + "\n";
  for (const auto& r : report.at("rows")) csv += csv_row(b.config, "test", r);
  io::write_file(bundle_dir / "reports" / "eval.csv", csv);
  io::write_json(bundle_dir / "reports" / "eval.json", report);
  return report;
}

inline Dataset pool_for(const Bundle& b, int iteration) {
  Rng r = substream(b.config.seed(), static_cast<std::uint64_t>(iteration), kPoolThetaSalt);
  Dataset pool = generate(b.spec(), b.config, b.config.pool_size(), r());
  pool.scaler = b.train.scaler;
  return scale(pool);
}

inline json cmd_active(const fs::path& bundle_dir, int pool, int iters) {
  Bundle b = load_bundle(bundle_dir);
  if (pool > 0) b.config.al_pool = pool;
  if (iters >= 0) b.config.al_iters = iters;
  b.config.validate();
  const ExperimentConfig& c = b.config;
  ActiveOptions o;
  o.train = c.train_options();
  o.calibration = c.calibration_options();
  o.warm_start = c.al_warm_start;
  o.train_fraction = c.al_train_fraction;
  o.seed = c.seed();
  o.eps = c.eps.front();
  const Dataset test = scale(b.test);
  ALState s = initial_state(b.model, scale(b.train), scale(b.calib), test, o.calibration);
  for (int it = 0; it < c.al_iters; ++it) s = al_iteration(std::move(s), pool_for(b, it), test, o);

  Bundle after = b;
  after.model = s.model;
  after.cal = s.cal;
  after.train = unscale(s.train);
  after.calib = unscale(s.calib);
  save(after.model, bundle_dir / "active" / "model");
  save(after.cal, bundle_dir / "active" / "calibration");
  save(after.train, bundle_dir / "active" / "data" / "train");
  save(after.calib, bundle_dir / "active" / "data" / "calib");

  std::string csv = std::string(kReportColumns) + ",iteration\n";
  for (const auto& row : s.history) {
    const std::string it = "," + std::to_string(row.at("iteration").get<int>()) + "\n";
    for (const char* stage : {"before", "after"}) {
      json m = row.at(stage);
      m["detection"] = m.at("detection_rate");
      m["rejection"] = m.at("rejection_rate");
      std::string line = csv_row(c, stage, m);
      line.pop_back();
      csv += line + it;
    }
  }
  const json report = {{"header", report_header(c)}, {"history", s.history}};
  io::write_file(bundle_dir / "reports" / "active.csv", csv);
  io::write_json(bundle_dir / "reports" / "active.json", report);
  return report;
}

/// The bundle's test set regenerated with observation noise multiplied by `noise_scale`:
/// the same source trajectories and noise draws, so the two sets differ only in noise magnitude.
inline Dataset rescaled_noise_test(const Bundle& b, double noise_scale) {
  const Dataset full = regenerate(b.spec(), b.test.gen, noise_scale);
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> where;
  for (std::size_t i = 0; i < full.size(); ++i) where[{full.samples[i].trajectory, full.samples[i].offset}] = i;
  std::vector<std::size_t> idx;
  for (const auto& s : b.test.samples) {
    const auto it = where.find({s.trajectory, s.offset});
    if (it == where.end()) throw IntegrityError("anomaly: test sample not reproducible from its generation info");
    idx.push_back(it->second);
  }
  Dataset out = full.subset(idx);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out.samples[i].states != b.test.samples[i].states || out.samples[i].label != b.test.samples[i].label)
      throw IntegrityError("anomaly: regenerated test states differ from the stored ones");
  out.scaler = b.train.scaler;
  return out;
}

inline json cmd_anomaly(const fs::path& bundle_dir, double noise_scale) {
  Bundle b = load_bundle(bundle_dir);
  b.config.noise_scale = noise_scale;
  b.config.validate();
  const Evaluation clean = evaluate(b.model, b.cal, scale(b.test), b.config.seed());
  const Evaluation anomalous = evaluate(b.model, b.cal, scale(rescaled_noise_test(b, noise_scale)), b.config.seed());
  json rows = json::array();
  std::string csv = std::string(kReportColumns) + ",noise_scale\n";
  for (double eps : b.config.eps) {
    const json mc = metrics(clean, eps), ma = metrics(anomalous, eps);
    rows.push_back({{"clean", mc}, {"anomalous", ma}});
    for (const auto& [stage, m] : {std::pair{"clean", &mc}, {"anomalous", &ma}}) {
      std::string line = csv_row(b.config, stage, *m);
      line.pop_back();
      csv += line + "," + fmt(noise_scale) + "\n";
    }
  }
  const json report = {{"header", report_header(b.config)}, {"noise_scale", noise_scale}, {"rows", rows}};
  io::write_file(bundle_dir / "reports" / "anomaly.csv", csv);
  io::write_json(bundle_dir / "reports" / "anomaly.json", report);
  return report;
}

struct SeComparison {
  std::vector<double> nse, ukf;   // per test point; NaN where the UKF diverged
  std::vector<double> nse_fine_tuned;  // the monitor's estimator after joint fine-tuning
  std::size_t ukf_failures = 0;
};

inline SeComparison compare_state_estimators(const Bundle& b) {
  if (b.model.kind != Approach::two_step) throw ConfigError("compare-se needs a two-step bundle (no state estimator)");
  const auto spec = b.spec();
  const auto range = b.train.scaler.state_range();
  const auto y = obs_tensor(scale(b.test));
  const nn::Tensor standalone = b.model.state_estimator().predict(y);
  const nn::Tensor deployed = b.model.estimator().predict(y);
  const UkfConfig cfg = ukf_config_from(b.train);
  SeComparison out;
  for (std::size_t i = 0; i < b.test.size(); ++i) {
    const auto& s = b.test.samples[i];
    auto est = time_major(standalone, i), tuned = time_major(deployed, i);
    b.train.scaler.unscale_states(est);
    b.train.scaler.unscale_states(tuned);
    out.nse.push_back(relative_error(s.states, est, range));
    out.nse_fine_tuned.push_back(relative_error(s.states, tuned, range));
    try {
      out.ukf.push_back(relative_error(s.states, ukf_estimate(spec, s.obs, cfg), range));
    } catch (const FilterDiverged&) {
      out.ukf.push_back(std::nan(""));
      ++out.ukf_failures;
    }
  }
  return out;
}

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double s = 0.0, n = 0.0;
  for (double x : v)
    if (std::isfinite(x)) s += x, n += 1.0;
  if (n == 0.0) return {std::nan(""), std::nan("")};
  const double m = s / n;
  double q = 0.0;
  for (double x : v)
    if (std::isfinite(x)) q += (x - m) * (x - m);
  return {m, std::sqrt(q / n)};
}

inline json cmd_compare_se(const fs::path& bundle_dir) {
  const Bundle b = load_bundle(bundle_dir);
  const auto cmp = compare_state_estimators(b);
  const auto [nm, ns] = mean_std(cmp.nse);
  const auto [um, us] = mean_std(cmp.ukf);
  const auto [fm, fsd] = mean_std(cmp.nse_fine_tuned);
  const json report = {{"header", report_header(b.config)},
                        {"n", cmp.nse.size()},
                        {"nse", {{"mean", nm}, {"std", ns}}},
                        {"nse_fine_tuned", {{"mean", fm}, {"std", fsd}}},
                        {"ukf", {{"mean", um}, {"std", us}, {"failures", cmp.ukf_failures}}}};
  const std::string prefix = b.config.model + "," + std::to_string(b.config.seed()) + "," +
                             io::hex64(config_hash(b.config)) + "," + kVersion + ",";
  std::string csv = "model,seed,config_hash,version,estimator,mean_relative_error,std,n,failures\n";
  csv += prefix + "nse," + fmt(nm) + "," + fmt(ns) + "," + std::to_string(cmp.nse.size()) + ",0\n";
  csv += prefix + "nse_fine_tuned," + fmt(fm) + "," + fmt(fsd) + "," + std::to_string(cmp.nse.size()) + ",0\n";
  csv += prefix + "ukf," + fmt(um) + "," + fmt(us) + "," + std::to_string(cmp.nse.size()) + "," +
         std::to_string(cmp.ukf_failures) + "\n";
  io::write_file(bundle_dir / "reports" / "compare_se.csv", csv);
  io::write_json(bundle_dir / "reports" / "compare_se.json", report);
  return report;
}

}  // namespace npm::exp
