#pragma once

// Unscented Kalman filter baseline for state estimation, and the relative-error
// metric used to compare it with the neural state estimator.

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <vector>

#include "npm/dataset.hpp"
#include "npm/hybrid.hpp"

namespace npm {

struct FilterDiverged : NumericalError {
  using NumericalError::NumericalError;
};

struct UkfConfig {
  double alpha = 1e-3;
  double beta = 2.0;
  double kappa = 0.0;
  double process_noise = 1e-4;      // diagonal of Q
  std::vector<double> init_mean;    // prior on the first state of the window
  std::vector<double> init_var;     // diagonal prior covariance
  std::vector<double> meas_var;     // empty: spec.noise_std squared
};

/// Prior from the training states: per-dimension mean and variance over all window steps.
inline UkfConfig ukf_config_from(const Dataset& train_unscaled) {
  if (train_unscaled.scaled) throw ConfigError("ukf prior needs unscaled states");
  if (train_unscaled.empty()) throw ConfigError("ukf prior needs a nonempty training set");
  const std::size_t d = static_cast<std::size_t>(train_unscaled.state_dim);
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  std::size_t count = 0;
  for (const auto& s : train_unscaled.samples)
    for (std::size_t i = 0; i < s.states.size(); ++i) {
      sum[i % d] += s.states[i];
      sq[i % d] += s.states[i] * s.states[i];
      if (i % d == 0) ++count;
    }
  UkfConfig c;
  for (std::size_t k = 0; k < d; ++k) {
    const double m = sum[k] / static_cast<double>(count);
    c.init_mean.push_back(m);
    c.init_var.push_back(std::max(sq[k] / static_cast<double>(count) - m * m, 1e-8));
  }
  return c;
}

namespace detail {

/// Cholesky factor of a covariance, retrying with growing diagonal jitter.
inline Eigen::MatrixXd robust_cholesky(Eigen::MatrixXd P) {
  P = 0.5 * (P + P.transpose());
  const double base = std::max(P.diagonal().cwiseAbs().maxCoeff(), 1e-12);
  double jitter = 0.0;
  for (int attempt = 0; attempt < 5; ++attempt) {  // jitter up to 1e-4 of the diagonal scale
    Eigen::LLT<Eigen::MatrixXd> llt(P + jitter * Eigen::MatrixXd::Identity(P.rows(), P.cols()));
    if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().allFinite()) return llt.matrixL();
    jitter = jitter == 0.0 ? base * 1e-10 : jitter * 100.0;
  }
  throw FilterDiverged("covariance is not positive definite after regularization");
}

}  // namespace detail

/// Filtered state estimates (time-major, window x state_dim) for an observation
/// sequence (time-major, length x obs_dim). Sigma points go through the full
/// hybrid step, jumps included; the discrete mode follows the mean estimate.
inline std::vector<double> ukf_estimate(const HybridSystemSpec& spec, std::span<const double> obs,
                                        const UkfConfig& cfg) {
  using Eigen::MatrixXd;
  using Eigen::VectorXd;
  const int n = spec.state_dim, m = spec.obs_dim;
  if (obs.empty() || obs.size() % static_cast<std::size_t>(m) != 0) throw ShapeError("ukf: bad observation length");
  if (static_cast<int>(cfg.init_mean.size()) != n || static_cast<int>(cfg.init_var.size()) != n)
    throw ConfigError("ukf: prior has wrong dimension");
  const std::size_t T = obs.size() / static_cast<std::size_t>(m);

  const double lambda = cfg.alpha * cfg.alpha * (n + cfg.kappa) - n;
  const int ns = 2 * n + 1;
  VectorXd wm(ns), wc(ns);
  wm(0) = lambda / (n + lambda);
  wc(0) = wm(0) + (1.0 - cfg.alpha * cfg.alpha + cfg.beta);
  for (int i = 1; i < ns; ++i) wm(i) = wc(i) = 1.0 / (2.0 * (n + lambda));

  MatrixXd Q = cfg.process_noise * MatrixXd::Identity(n, n);
  MatrixXd R = MatrixXd::Zero(m, m);
  for (int k = 0; k < m; ++k) {
    const double v = cfg.meas_var.empty() ? spec.noise_std[static_cast<std::size_t>(k)] * spec.noise_std[static_cast<std::size_t>(k)]
                                          : cfg.meas_var.at(static_cast<std::size_t>(k));
    R(k, k) = std::max(v, 1e-12);
  }

  VectorXd x = Eigen::Map<const VectorXd>(cfg.init_mean.data(), n);
  MatrixXd P = Eigen::Map<const VectorXd>(cfg.init_var.data(), n).asDiagonal();
  int q = spec.initial_mode ? spec.initial_mode(cfg.init_mean) : 0;

  auto sigma_points = [&](const VectorXd& mean, const MatrixXd& cov) {
    const MatrixXd L = detail::robust_cholesky((n + lambda) * cov);
    MatrixXd X(n, ns);
    X.col(0) = mean;
    for (int i = 0; i < n; ++i) {
      X.col(1 + i) = mean + L.col(i);
      X.col(1 + n + i) = mean - L.col(i);
    }
    return X;
  };
  auto to_vec = [](const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };

  std::vector<double> out;
  out.reserve(T * static_cast<std::size_t>(n));
  for (std::size_t t = 0; t < T; ++t) {
    if (t > 0) {
      // Predict.
      const MatrixXd X = sigma_points(x, P);
      MatrixXd Y(n, ns);
      try {
        for (int i = 0; i < ns; ++i) {
          const HybridState next = step(spec, {to_vec(X.col(i)), q});
          Y.col(i) = Eigen::Map<const VectorXd>(next.v.data(), n);
        }
        q = step(spec, {to_vec(x), q}).q;
      } catch (const Error& e) {
        throw FilterDiverged(std::string("ukf prediction failed: ") + e.what());
      }
      x = Y * wm;
      P = Q;
      for (int i = 0; i < ns; ++i) P += wc(i) * (Y.col(i) - x) * (Y.col(i) - x).transpose();
    }
    // Update.
    const MatrixXd X = sigma_points(x, P);
    MatrixXd Z(m, ns);
    for (int i = 0; i < ns; ++i) {
      const auto z = spec.observe(to_vec(X.col(i)), q);
      Z.col(i) = Eigen::Map<const VectorXd>(z.data(), m);
    }
    const VectorXd zbar = Z * wm;
    MatrixXd S = R;
    MatrixXd C = MatrixXd::Zero(n, m);
    for (int i = 0; i < ns; ++i) {
      S += wc(i) * (Z.col(i) - zbar) * (Z.col(i) - zbar).transpose();
      C += wc(i) * (X.col(i) - x) * (Z.col(i) - zbar).transpose();
    }
    const MatrixXd K = C * S.ldlt().solve(MatrixXd::Identity(m, m));
    const VectorXd z = Eigen::Map<const VectorXd>(obs.data() + t * static_cast<std::size_t>(m), m);
    x += K * (z - zbar);
    P -= K * S * K.transpose();
    P = 0.5 * (P + P.transpose());
    if (!x.allFinite() || !P.allFinite()) throw FilterDiverged("ukf state became non-finite at step " + std::to_string(t));
    out.insert(out.end(), x.data(), x.data() + n);
  }
  return out;
}

/// ||true - est|| over dimensions with positive range, divided by the largest range.
inline double relative_error(std::span<const double> truth, std::span<const double> est,
                             std::span<const double> state_range) {
  if (truth.size() != est.size() || state_range.empty() || truth.size() % state_range.size() != 0)
    throw ShapeError("relative_error: shape mismatch");
  const std::size_t d = state_range.size();
  double max_range = 0.0;
  for (double r : state_range) max_range = std::max(max_range, r);
  if (!(max_range > 0.0)) throw ConfigError("relative_error: every state dimension has zero range");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!(state_range[i % d] > 0.0)) continue;
    const double diff = truth[i] - est[i];
    s += diff * diff;
  }
  return std::sqrt(s) / max_range;
}

}  // namespace npm
