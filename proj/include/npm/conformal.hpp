#pragma once

// Inductive conformal prediction: nonconformity scores, smoothed p-values,
// prediction regions, confidence/credibility and coverage/efficiency metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "npm/common.hpp"

namespace npm::cp {

struct InvalidLikelihoods : NumericalError {
  using NumericalError::NumericalError;
};

inline constexpr double kNormalizationTolerance = 1e-9;

/// 1 - likelihood[label]; likelihoods must be a probability vector.
inline double ncf_classification(std::span<const double> likelihoods, int label) {
  double sum = 0.0;
  for (double p : likelihoods) {
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidLikelihoods("likelihood outside [0, 1]");
    sum += p;
  }
  if (std::abs(sum - 1.0) > kNormalizationTolerance) throw InvalidLikelihoods("likelihoods do not sum to 1");
  if (label < 0 || static_cast<std::size_t>(label) >= likelihoods.size())
    throw InvalidLikelihoods("label " + std::to_string(label) + " out of range");
  return 1.0 - likelihoods[static_cast<std::size_t>(label)];
}

/// Euclidean norm of the flattened difference.
inline double ncf_regression(std::span<const double> predicted, std::span<const double> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("ncf_regression: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double d = predicted[i] - truth[i];
    s += d * d;
  }
  return std::sqrt(s);
}

/// Sorted nonconformity scores of the calibration set.
class CalibrationSet {
 public:
  CalibrationSet() = default;
  explicit CalibrationSet(std::vector<double> scores) : scores_(std::move(scores)) {
    if (!all_finite(scores_)) throw NumericalError("calibration scores must be finite");
    std::sort(scores_.begin(), scores_.end());
  }

  std::size_t size() const { return scores_.size(); }
  bool empty() const { return scores_.empty(); }
  const std::vector<double>& scores() const { return scores_; }

  std::size_t count_greater(double a) const {
    return static_cast<std::size_t>(scores_.end() - std::upper_bound(scores_.begin(), scores_.end(), a));
  }
  std::size_t count_equal(double a) const {
    const auto r = std::equal_range(scores_.begin(), scores_.end(), a);
    return static_cast<std::size_t>(r.second - r.first);
  }

  /// The k-th largest score, k >= 1.
  double kth_largest(std::size_t k) const { return scores_.at(scores_.size() - k); }

  friend bool operator==(const CalibrationSet&, const CalibrationSet&) = default;

 private:
  std::vector<double> scores_;
};

/// Smoothed p-value: (#{a_i > a*} + theta * (#{a_i = a*} + 1)) / (n + 1).
inline double p_value(const CalibrationSet& calib, double alpha_star, double theta) {
  const double gt = static_cast<double>(calib.count_greater(alpha_star));
  const double eq = static_cast<double>(calib.count_equal(alpha_star));
  return (gt + theta * (eq + 1.0)) / (static_cast<double>(calib.size()) + 1.0);
}

/// One tie-breaking draw per test point, from its own seeded stream.
inline std::vector<double> draw_thetas(std::size_t n, std::uint64_t seed) {
  Rng rng = substream(seed, 0, 0x7e7au);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> t(n);
  for (double& v : t) v = u(rng);
  return t;
}

// ---------------------------------------------------------------------------
// Classification

/// Subset of {0, 1}.
struct LabelSet {
  std::array<bool, 2> has{false, false};

  std::size_t size() const { return static_cast<std::size_t>(has[0]) + static_cast<std::size_t>(has[1]); }
  bool contains(int label) const { return has.at(static_cast<std::size_t>(label)); }
  bool singleton() const { return size() == 1; }
  bool subset_of(const LabelSet& o) const { return (!has[0] || o.has[0]) && (!has[1] || o.has[1]); }

  friend bool operator==(const LabelSet&, const LabelSet&) = default;
};

using PValues = std::array<double, 2>;

/// {l : p_l > eps}.
inline LabelSet classify_region(const PValues& p, double eps) { return {{p[0] > eps, p[1] > eps}}; }

/// General form for any number of labels.
inline std::vector<int> classify_region(std::span<const double> p, double eps) {
  std::vector<int> out;
  for (std::size_t j = 0; j < p.size(); ++j)
    if (p[j] > eps) out.push_back(static_cast<int>(j));
  return out;
}

/// Binary p-values for a test point, using one theta for both labels.
inline PValues classification_p_values(const CalibrationSet& calib, const std::array<double, 2>& likelihoods,
                                       double theta) {
  return {p_value(calib, ncf_classification(likelihoods, 0), theta),
          p_value(calib, ncf_classification(likelihoods, 1), theta)};
}

/// gamma is kept exactly; 1 - confidence need not round-trip to it in floating point.
struct Uncertainty {
  double confidence = 0.0;   // 1 - gamma
  double credibility = 0.0;  // largest p-value
  double gamma = 0.0;        // second largest p-value
};

inline Uncertainty confidence_credibility(const PValues& p) {
  const double gamma = std::min(p[0], p[1]);
  return {1.0 - gamma, std::max(p[0], p[1]), gamma};
}

inline Uncertainty confidence_credibility(std::span<const double> p) {
  if (p.size() < 2) throw ShapeError("confidence_credibility needs at least two p-values");
  std::vector<double> s(p.begin(), p.end());
  std::partial_sort(s.begin(), s.begin() + 2, s.end(), std::greater<>());
  return {1.0 - s[1], s[0], s[1]};
}

// ---------------------------------------------------------------------------
// Regression

/// Ball of the calibrated radius around the predicted sequence.
struct RegressionRegion {
  double radius = 0.0;
  bool unbounded = false;

  double width() const { return unbounded ? std::numeric_limits<double>::infinity() : 2.0 * radius; }
  /// Whether a target whose score against the prediction is `score` lies in the region.
  bool contains_score(double score) const { return unbounded || score <= radius; }
  /// Interval around a scalar prediction.
  std::array<double, 2> interval(double center) const {
    if (unbounded) return {-std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
    return {center - radius, center + radius};
  }
};

/// alpha_(eps) is the floor(eps (n + 1))-th largest calibration score; an index below 1
/// means no finite radius reaches the requested coverage, so the region is unbounded.
inline RegressionRegion regress_region(const CalibrationSet& calib, double eps) {
  if (calib.empty()) throw ConfigError("regress_region: empty calibration set");
  if (!(eps > 0.0 && eps < 1.0)) throw ConfigError("significance must lie in (0, 1)");
  const auto k = static_cast<std::size_t>(std::floor(eps * (static_cast<double>(calib.size()) + 1.0)));
  if (k < 1) return {std::numeric_limits<double>::infinity(), true};
  return {calib.kth_largest(std::min(k, calib.size())), false};
}

// ---------------------------------------------------------------------------
// Metrics

inline double coverage(std::span<const LabelSet> regions, std::span<const int> truths) {
  if (regions.empty() || regions.size() != truths.size()) throw ShapeError("coverage: empty or misaligned input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < regions.size(); ++i) hit += regions[i].contains(truths[i]);
  return static_cast<double>(hit) / static_cast<double>(regions.size());
}

/// Fraction of singleton regions.
inline double efficiency(std::span<const LabelSet> regions) {
  if (regions.empty()) throw ShapeError("efficiency: empty input");
  std::size_t single = 0;
  for (const auto& r : regions) single += r.singleton();
  return static_cast<double>(single) / static_cast<double>(regions.size());
}

/// Fraction of test scores inside a constant-radius region.
inline double coverage(const RegressionRegion& region, std::span<const double> test_scores) {
  if (test_scores.empty()) throw ShapeError("coverage: empty input");
  std::size_t hit = 0;
  for (double s : test_scores) hit += region.contains_score(s);
  return static_cast<double>(hit) / static_cast<double>(test_scores.size());
}

/// Mean interval width; constant-width regions make this 2 * radius.
inline double efficiency(std::span<const RegressionRegion> regions) {
  if (regions.empty()) throw ShapeError("efficiency: empty input");
  double w = 0.0;
  for (const auto& r : regions) w += r.width();
  return w / static_cast<double>(regions.size());
}

}  // namespace npm::cp
