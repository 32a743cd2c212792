#pragma once

// Uncertainty-aware active learning: pool points rejected by the current rule are
// labeled, split between training and calibration at the current ratio, and the
// monitor, calibration and rule are rebuilt.

#include <cmath>
#include <vector>

#include "npm/pipeline.hpp"

namespace npm {

struct ActiveOptions {
  MonitorTrainOptions train;
  CalibrationOptions calibration;
  bool warm_start = true;
  double train_fraction = -1.0;  // share of queried points sent to training; < 0: current ratio
  std::uint64_t seed = 0;
  double eps = 0.05;             // significance for the recorded coverage/efficiency
};

struct ALState {
  MonitorModel model;
  Dataset train, calib;  // scaled
  CalibrationArtifacts cal;
  int iteration = 0;
  std::uint64_t test_hash = 0;
  io::json history = io::json::array();
};

inline constexpr std::uint64_t kPoolThetaSalt = 0x9001ULL;

/// Indices of pool points the current rule rejects, in pool order.
inline std::vector<std::size_t> query(const Dataset& pool, const ALState& s, std::uint64_t theta_seed) {
  if (pool.empty()) throw InsufficientData("query: empty pool");
  if (!pool.scaled) throw ConfigError("query expects a scaled pool");
  const auto preds = predict(s.model, pool);
  const auto thetas = cp::draw_thetas(pool.size(), theta_seed ^ kPoolThetaSalt);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto p = cp::classification_p_values(s.cal.monitor, preds[i].likelihood, thetas[i]);
    if (s.cal.rule.reject(cp::confidence_credibility(p))) out.push_back(i);
  }
  return out;
}

inline io::json metrics_row(const Evaluation& e, double eps) {
  const auto cs = monitor_summary(e, eps);
  io::json j = to_json(e.detection);
  j["eps"] = eps;
  j["coverage"] = cs.coverage;
  j["efficiency"] = cs.efficiency;
  return j;
}

inline ALState initial_state(MonitorModel model, Dataset train, Dataset calib, const Dataset& test,
                             const CalibrationOptions& copts) {
  ALState s;
  s.cal = calibrate(model, calib, copts);
  s.model = std::move(model);
  s.train = std::move(train);
  s.calib = std::move(calib);
  s.test_hash = content_hash(test);
  return s;
}

/// One query / label / retrain / recalibrate round. The test set is only evaluated,
/// never mixed in; its hash must match the one recorded in the state.
inline ALState al_iteration(ALState s, const Dataset& pool, const Dataset& test, const ActiveOptions& o) {
  if (content_hash(test) != s.test_hash) throw IntegrityError("active learning: test set changed between iterations");
  const Evaluation before = evaluate(s.model, s.cal, test, o.seed);
  const auto selected = query(pool, s, o.seed);

  io::json row = {{"iteration", s.iteration + 1},
                  {"pool_size", pool.size()},
                  {"selected", selected.size()},
                  {"train_size_before", s.train.size()},
                  {"calib_size_before", s.calib.size()},
                  {"before", metrics_row(before, o.eps)}};

  if (selected.empty()) {
    row["added_train"] = 0;
    row["added_calib"] = 0;
    row["after"] = row["before"];
    row["train_size_after"] = s.train.size();
    row["calib_size_after"] = s.calib.size();
    s.history.push_back(row);
    ++s.iteration;
    return s;
  }

  const double frac = o.train_fraction >= 0.0
                          ? o.train_fraction
                          : static_cast<double>(s.train.size()) / static_cast<double>(s.train.size() + s.calib.size());
  std::vector<std::size_t> order = selected;
  Rng rng = substream(o.seed, static_cast<std::uint64_t>(s.iteration), 0xa11u);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(frac * static_cast<double>(order.size())));
  for (std::size_t r = 0; r < order.size(); ++r)
    (r < n_train ? s.train : s.calib).samples.push_back(pool.samples[order[r]]);

  s.model = train_monitor(s.train, s.model.kind, o.train, o.warm_start ? &s.model : nullptr);
  s.cal = calibrate(s.model, s.calib, o.calibration);
  const Evaluation after = evaluate(s.model, s.cal, test, o.seed);

  row["added_train"] = n_train;
  row["added_calib"] = order.size() - n_train;
  row["train_size_after"] = s.train.size();
  row["calib_size_after"] = s.calib.size();
  row["calibration_scores"] = s.cal.monitor.size();
  row["after"] = metrics_row(after, o.eps);
  s.history.push_back(row);
  ++s.iteration;
  return s;
}

}  // namespace npm
