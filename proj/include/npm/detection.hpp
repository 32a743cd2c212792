#pragma once

// Error detection: cross-validated (confidence, credibility) over the calibration
// set, a class-weighted linear SVC over those two features, and the
// accuracy / detection / rejection report.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "npm/conformal.hpp"

namespace npm {

struct InsufficientData : ConfigError {
  using ConfigError::ConfigError;
};

struct LabeledUncertainty {
  cp::Uncertainty u;
  int error = 0;  // 1 when the monitor misclassified the point
};

inline int argmax_label(const std::array<double, 2>& lik) { return lik[1] > lik[0] ? 1 : 0; }

inline constexpr int kDefaultFolds = 5;
inline constexpr std::size_t kMinFoldSize = 50;

struct CvUncertainty {
  std::vector<LabeledUncertainty> points;  // aligned with the calibration inputs
  std::vector<int> fold;                   // fold each point was held out in
};

/// For every calibration point, (gamma, c) against the scores of the other k-1 folds.
/// The monitor is fixed; only the calibration pool rotates.
inline CvUncertainty cv_uncertainty_labels(std::span<const std::array<double, 2>> likelihoods,
                                           std::span<const int> labels, int k_folds, std::uint64_t seed) {
  if (k_folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
  if (likelihoods.size() != labels.size()) throw ShapeError("cv_uncertainty_labels: size mismatch");
  const std::size_t n = labels.size(), k = static_cast<std::size_t>(k_folds);
  if (n / k < kMinFoldSize)
    throw InsufficientData("calibration set of " + std::to_string(n) + " points is too small for " +
                           std::to_string(k) + " folds of at least " + std::to_string(kMinFoldSize));

  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) scores[i] = cp::ncf_classification(likelihoods[i], labels[i]);

  Rng rng = substream(seed, 0, 0xcf01u);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  CvUncertainty out;
  out.fold.assign(n, -1);
  for (std::size_t r = 0; r < n; ++r) out.fold[perm[r]] = static_cast<int>(r * k / n);

  const auto thetas = cp::draw_thetas(n, seed);
  out.points.resize(n);
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<double> pool;
    pool.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      if (out.fold[i] != static_cast<int>(f)) pool.push_back(scores[i]);
    const cp::CalibrationSet calib(std::move(pool));
    for (std::size_t i = 0; i < n; ++i) {
      if (out.fold[i] != static_cast<int>(f)) continue;
      const auto p = cp::classification_p_values(calib, likelihoods[i], thetas[i]);
      out.points[i] = {cp::confidence_credibility(p), argmax_label(likelihoods[i]) != labels[i] ? 1 : 0};
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rejection rule

struct SvcOptions {
  double lambda = 1e-3;  // L2 regularization strength
  int iterations = 2000;
  double step = 0.5;     // initial step, decays as 1/sqrt(t)
};

/// Linear rule over standardized (confidence, credibility): reject iff w.z + b > 0.
struct RejectionRule {
  std::array<double, 2> w{0.0, 0.0};
  double b = -1.0;
  std::array<double, 2> mean{0.0, 0.0};
  std::array<double, 2> scale{1.0, 1.0};
  std::array<double, 2> class_weight{1.0, 1.0};  // {correct, error}
  bool degenerate = false;
  std::string note;

  double decision(const cp::Uncertainty& u) const {
    const double z0 = (u.confidence - mean[0]) / scale[0];
    const double z1 = (u.credibility - mean[1]) / scale[1];
    return w[0] * z0 + w[1] * z1 + b;
  }
  bool reject(const cp::Uncertainty& u) const { return decision(u) > 0.0; }
};

inline RejectionRule reject_nothing(std::string note) {
  RejectionRule r;
  r.degenerate = true;
  r.note = std::move(note);
  return r;
}

inline RejectionRule reject_everything(std::string note) {
  RejectionRule r;
  r.b = 1.0;
  r.degenerate = true;
  r.note = std::move(note);
  return r;
}

/// Full-batch subgradient descent on the class-weighted hinge loss. Deterministic;
/// the iterate with the lowest objective is kept since subgradient steps are not monotone.
inline RejectionRule train_rule(std::span<const LabeledUncertainty> pts, const SvcOptions& opts = {}) {
  if (pts.empty()) throw InsufficientData("no points to train the rejection rule");
  std::size_t n_err = 0;
  for (const auto& p : pts) n_err += p.error == 1;
  const std::size_t n = pts.size();
  if (n_err == 0) return reject_nothing("single-class training set: no errors");
  if (n_err == n) return reject_everything("single-class training set: all errors");

  RejectionRule rule;
  std::array<std::vector<double>, 2> feat;
  for (const auto& p : pts) {
    feat[0].push_back(p.u.confidence);
    feat[1].push_back(p.u.credibility);
  }
  for (std::size_t d = 0; d < 2; ++d) {
    const double m = std::accumulate(feat[d].begin(), feat[d].end(), 0.0) / static_cast<double>(n);
    double v = 0.0;
    for (double x : feat[d]) v += (x - m) * (x - m);
    const double sd = std::sqrt(v / static_cast<double>(n));
    rule.mean[d] = m;
    rule.scale[d] = sd > 0.0 ? sd : 1.0;
    for (double& x : feat[d]) x = (x - m) / rule.scale[d];
  }
  // Inverse-frequency weights, normalized so the weights average to one over the sample.
  rule.class_weight = {static_cast<double>(n) / (2.0 * static_cast<double>(n - n_err)),
                       static_cast<double>(n) / (2.0 * static_cast<double>(n_err))};

  auto objective = [&](const std::array<double, 3>& p) {
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double y = pts[i].error ? 1.0 : -1.0;
      const double m = y * (p[0] * feat[0][i] + p[1] * feat[1][i] + p[2]);
      if (m < 1.0) loss += rule.class_weight[static_cast<std::size_t>(pts[i].error)] * (1.0 - m);
    }
    return 0.5 * opts.lambda * (p[0] * p[0] + p[1] * p[1]) + loss / static_cast<double>(n);
  };

  std::array<double, 3> p{0.0, 0.0, 0.0}, best = p;
  double best_obj = objective(p);
  for (int t = 1; t <= opts.iterations; ++t) {
    std::array<double, 3> g{opts.lambda * p[0], opts.lambda * p[1], 0.0};
    for (std::size_t i = 0; i < n; ++i) {
      const double y = pts[i].error ? 1.0 : -1.0;
      const double m = y * (p[0] * feat[0][i] + p[1] * feat[1][i] + p[2]);
      if (m < 1.0) {
        const double c = rule.class_weight[static_cast<std::size_t>(pts[i].error)] / static_cast<double>(n);
        g[0] -= c * y * feat[0][i];
        g[1] -= c * y * feat[1][i];
        g[2] -= c * y;
      }
    }
    const double eta = opts.step / std::sqrt(static_cast<double>(t));
    for (std::size_t j = 0; j < 3; ++j) p[j] -= eta * g[j];
    const double obj = objective(p);
    if (obj < best_obj) {
      best_obj = obj;
      best = p;
    }
  }
  if (!std::isfinite(best_obj)) throw NumericalError("rejection rule training diverged");
  rule.w = {best[0], best[1]};
  rule.b = best[2];
  return rule;
}

inline nlohmann::json to_json(const RejectionRule& r) {
  return {{"w", r.w},         {"b", r.b},
          {"mean", r.mean},   {"scale", r.scale},
          {"class_weight", r.class_weight}, {"degenerate", r.degenerate},
          {"note", r.note}};
}

inline RejectionRule rule_from_json(const nlohmann::json& j) {
  RejectionRule r;
  r.w = j.at("w").get<std::array<double, 2>>();
  r.b = j.at("b").get<double>();
  r.mean = j.at("mean").get<std::array<double, 2>>();
  r.scale = j.at("scale").get<std::array<double, 2>>();
  r.class_weight = j.at("class_weight").get<std::array<double, 2>>();
  r.degenerate = j.at("degenerate").get<bool>();
  r.note = j.at("note").get<std::string>();
  if (!all_finite(std::array{r.w[0], r.w[1], r.b, r.mean[0], r.mean[1], r.scale[0], r.scale[1]}))
    throw IntegrityError("rejection rule has non-finite parameters");
  return r;
}

// ---------------------------------------------------------------------------
// Report

struct DetectionReport {
  std::size_t n = 0;
  std::size_t errors = 0;
  std::size_t false_negatives = 0, detected_fn = 0;  // truth 1, predicted 0
  std::size_t false_positives = 0, detected_fp = 0;  // truth 0, predicted 1
  std::size_t rejected = 0;
  std::size_t accepted_errors = 0;

  double accuracy() const { return 1.0 - static_cast<double>(errors) / static_cast<double>(n); }
  std::size_t detected() const { return detected_fn + detected_fp; }
  /// Detected errors over all errors; 1 when there is nothing to detect.
  double detection_rate() const {
    return errors == 0 ? 1.0 : static_cast<double>(detected()) / static_cast<double>(errors);
  }
  double rejection_rate() const { return static_cast<double>(rejected) / static_cast<double>(n); }
  double error_rate() const { return static_cast<double>(errors) / static_cast<double>(n); }
  /// Error rate among accepted points (0 when everything is rejected).
  double accepted_error_rate() const {
    const std::size_t acc = n - rejected;
    return acc == 0 ? 0.0 : static_cast<double>(accepted_errors) / static_cast<double>(acc);
  }
  std::string fn_string() const { return std::to_string(detected_fn) + "/" + std::to_string(false_negatives); }
  std::string fp_string() const { return std::to_string(detected_fp) + "/" + std::to_string(false_positives); }
};

inline DetectionReport detection_metrics(std::span<const int> predicted, std::span<const int> truth,
                                         const std::vector<bool>& rejected) {
  if (predicted.empty()) throw InsufficientData("detection_metrics: empty test set");
  if (predicted.size() != truth.size() || predicted.size() != rejected.size())
    throw ShapeError("detection_metrics: misaligned inputs");
  DetectionReport r;
  r.n = predicted.size();
  for (std::size_t i = 0; i < r.n; ++i) {
    const bool err = predicted[i] != truth[i];
    r.rejected += rejected[i];
    if (!err) continue;
    ++r.errors;
    if (truth[i] == 1) {
      ++r.false_negatives;
      r.detected_fn += rejected[i];
    } else {
      ++r.false_positives;
      r.detected_fp += rejected[i];
    }
    r.accepted_errors += !rejected[i];
  }
  return r;
}

inline nlohmann::json to_json(const DetectionReport& r) {
  return {{"n", r.n},
          {"accuracy", r.accuracy()},
          {"detection_rate", r.detection_rate()},
          {"fn", r.fn_string()},
          {"fp", r.fp_string()},
          {"rejection_rate", r.rejection_rate()},
          {"errors", r.errors},
          {"rejected", r.rejected},
          {"accepted_error_rate", r.accepted_error_rate()}};
}

}  // namespace npm
