#pragma once

// Calibration and evaluation of a trained monitor: conformal calibration sets,
// the cross-validated rejection rule, and per-test-point p-values, regions and
// rejection decisions.

#include <vector>

#include "npm/conformal.hpp"
#include "npm/detection.hpp"
#include "npm/monitor.hpp"

namespace npm {

struct CalibrationArtifacts {
  cp::CalibrationSet monitor;  // deployed classifier: end-to-end net, or NSC applied to NSE output
  cp::CalibrationSet nsc;      // two_step only: NSC on true states
  cp::CalibrationSet nse;      // two_step only: state-sequence regression scores
  RejectionRule rule;
  std::uint64_t seed = 0;
};

struct CalibrationOptions {
  int k_folds = kDefaultFolds;
  SvcOptions svc;
  std::uint64_t seed = 0;
};

inline std::vector<std::array<double, 2>> likelihoods_of(const std::vector<Prediction>& preds) {
  std::vector<std::array<double, 2>> out;
  out.reserve(preds.size());
  for (const auto& p : preds) out.push_back(p.likelihood);
  return out;
}

inline std::vector<double> classification_scores(std::span<const std::array<double, 2>> lik,
                                                 std::span<const int> labels) {
  std::vector<double> s(lik.size());
  for (std::size_t i = 0; i < lik.size(); ++i) s[i] = cp::ncf_classification(lik[i], labels[i]);
  return s;
}

/// Likelihoods of the NSC applied to true state sequences.
inline std::vector<std::array<double, 2>> nsc_on_states(const MonitorModel& m, const Dataset& scaled) {
  const nn::Tensor z = m.classifier().predict(state_tensor(scaled));
  std::vector<std::array<double, 2>> out(z.n);
  for (std::size_t b = 0; b < z.n; ++b) out[b] = nn::softmax2(z.at(b, 0, 0), z.at(b, 1, 0));
  return out;
}

inline std::vector<double> nse_scores(const std::vector<Prediction>& preds, const Dataset& scaled) {
  std::vector<double> s(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) s[i] = cp::ncf_regression(preds[i].states, scaled.samples[i].states);
  return s;
}

inline CalibrationArtifacts calibrate(const MonitorModel& m, const Dataset& calib, const CalibrationOptions& o) {
  if (!calib.scaled) throw ConfigError("calibrate expects a scaled dataset");
  CalibrationArtifacts a;
  a.seed = o.seed;
  const auto preds = predict(m, calib);
  const auto lik = likelihoods_of(preds);
  const auto labels = label_vector(calib);
  a.monitor = cp::CalibrationSet(classification_scores(lik, labels));
  const auto cv = cv_uncertainty_labels(lik, labels, o.k_folds, o.seed);
  a.rule = train_rule(cv.points, o.svc);
  if (m.kind == Approach::two_step) {
    a.nsc = cp::CalibrationSet(classification_scores(nsc_on_states(m, calib), labels));
    a.nse = cp::CalibrationSet(nse_scores(preds, calib));
  }
  return a;
}

struct TestPoint {
  int truth = 0;
  int predicted = 0;
  cp::PValues p{0.0, 0.0};
  cp::Uncertainty u;
  bool rejected = false;
};

struct Evaluation {
  std::vector<TestPoint> points;
  DetectionReport detection;
  // two_step only
  std::vector<cp::PValues> nsc_p;
  std::vector<int> nsc_predicted;
  std::vector<double> nse_scores;
  std::vector<Prediction> predictions;
};

/// Tie-breaking draws for test points come from their own stream so pools and
/// test sets evaluated with the same calibration seed stay independent.
inline constexpr std::uint64_t kTestThetaSalt = 0x7e57ULL;

inline Evaluation evaluate(const MonitorModel& m, const CalibrationArtifacts& a, const Dataset& test,
                           std::uint64_t theta_seed) {
  if (!test.scaled) throw ConfigError("evaluate expects a scaled dataset");
  if (test.empty()) throw InsufficientData("evaluate: empty test set");
  Evaluation e;
  e.predictions = predict(m, test);
  const auto labels = label_vector(test);
  const auto thetas = cp::draw_thetas(test.size(), theta_seed ^ kTestThetaSalt);
  std::vector<int> pred(test.size());
  std::vector<bool> rej(test.size());
  e.points.resize(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto& tp = e.points[i];
    tp.truth = labels[i];
    tp.predicted = e.predictions[i].label;
    tp.p = cp::classification_p_values(a.monitor, e.predictions[i].likelihood, thetas[i]);
    tp.u = cp::confidence_credibility(tp.p);
    tp.rejected = a.rule.reject(tp.u);
    pred[i] = tp.predicted;
    rej[i] = tp.rejected;
  }
  e.detection = detection_metrics(pred, labels, rej);
  if (m.kind == Approach::two_step) {
    const auto lik = nsc_on_states(m, test);
    for (std::size_t i = 0; i < test.size(); ++i) {
      e.nsc_p.push_back(cp::classification_p_values(a.nsc, lik[i], thetas[i]));
      e.nsc_predicted.push_back(argmax_label(lik[i]));
    }
    e.nse_scores = nse_scores(e.predictions, test);
  }
  return e;
}

struct CpSummary {
  double eps = 0.0;
  double coverage = 0.0;
  double efficiency = 0.0;  // classification: singleton fraction; regression: mean width
};

inline CpSummary classification_summary(std::span<const cp::PValues> p, std::span<const int> truth, double eps) {
  std::vector<cp::LabelSet> regions;
  regions.reserve(p.size());
  for (const auto& pv : p) regions.push_back(cp::classify_region(pv, eps));
  return {eps, cp::coverage(regions, truth), cp::efficiency(regions)};
}

inline std::vector<int> truths(const Evaluation& e) {
  std::vector<int> t;
  for (const auto& p : e.points) t.push_back(p.truth);
  return t;
}

inline CpSummary monitor_summary(const Evaluation& e, double eps) {
  std::vector<cp::PValues> p;
  for (const auto& tp : e.points) p.push_back(tp.p);
  return classification_summary(p, truths(e), eps);
}

inline CpSummary nsc_summary(const Evaluation& e, double eps) {
  if (e.nsc_p.empty()) throw ConfigError("nsc summary needs a two-step evaluation");
  return classification_summary(e.nsc_p, truths(e), eps);
}

inline CpSummary nse_summary(const CalibrationArtifacts& a, const Evaluation& e, double eps) {
  if (e.nse_scores.empty()) throw ConfigError("nse summary needs a two-step evaluation");
  const auto region = cp::regress_region(a.nse, eps);
  return {eps, cp::coverage(region, e.nse_scores), region.width()};
}

}  // namespace npm
