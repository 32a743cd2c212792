#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "npm/models.hpp"
#include "npm/ukf.hpp"

using namespace npm;

namespace {

HybridSystemSpec linear(const std::string& text) {
  std::istringstream in(text);
  return models::load_linear_system(in);
}

std::vector<double> observe_all(const HybridSystemSpec& spec, const Trajectory& tr, Rng* rng) {
  std::vector<double> y;
  for (const auto& s : tr.states) {
    auto o = spec.observe(s.v, s.q);
    for (std::size_t k = 0; k < o.size(); ++k) {
      if (rng) o[k] += std::normal_distribution<double>(0.0, spec.noise_std[k])(*rng);
      y.push_back(o[k]);
    }
  }
  return y;
}

}  // namespace

TEST(Ukf, LinearScalarConvergesNoiseless) {
  const auto spec = linear("dim 1\nobserve 0\nunsafe 0 ge 5\nhorizons 1 1\ndt 0.1\nA\n-0.5\n");
  for (double x0 : {-0.9, 0.3, 0.8}) {
    const auto tr = simulate(spec, {{x0}, 0}, 20);
    UkfConfig cfg;
    cfg.init_mean = {0.0};
    cfg.init_var = {1.0};
    const auto est = ukf_estimate(spec, observe_all(spec, tr, nullptr), cfg);
    ASSERT_EQ(est.size(), 21u);
    for (std::size_t t = 10; t < est.size(); ++t) EXPECT_NEAR(est[t], tr[t].v[0], 1e-3) << t;
  }
}

TEST(Ukf, LinearOscillatorRecoversUnobservedVelocity) {
  // Position-only measurements of a damped oscillator; velocity is inferred through the dynamics.
  const auto spec = linear("dim 2\nobserve 0\nunsafe 0 ge 5\nhorizons 1 1\ndt 0.1\nA\n0 1\n-1 -0.1\n");
  const auto tr = simulate(spec, {{0.7, -0.4}, 0}, 30);
  UkfConfig cfg;
  cfg.init_mean = {0.0, 0.0};
  cfg.init_var = {1.0, 1.0};
  const auto est = ukf_estimate(spec, observe_all(spec, tr, nullptr), cfg);
  for (std::size_t t = 10; t < tr.size(); ++t) {
    EXPECT_NEAR(est[2 * t], tr[t].v[0], 1e-3) << t;
    EXPECT_NEAR(est[2 * t + 1], tr[t].v[1], 1e-3) << t;
  }
}

TEST(Ukf, TwtEstimateWithinThreeNoiseStd) {
  auto spec = models::by_name("twt");
  const double sigma = 1e-3;
  spec.noise_std.assign(3, sigma);
  Rng rng = substream(4, 0, 0x77);
  std::uniform_real_distribution<double> u(4.6, 5.4);
  for (int trial = 0; trial < 20; ++trial) {
    HybridState s0{{u(rng), u(rng), u(rng)}, 0};
    s0.q = spec.initial_mode(s0.v);
    const auto tr = simulate(spec, s0, 31);
    UkfConfig cfg;
    cfg.init_mean = {5.0, 5.0, 5.0};
    cfg.init_var = {0.1, 0.1, 0.1};
    const auto est = ukf_estimate(spec, observe_all(spec, tr, &rng), cfg);
    for (std::size_t t = 0; t < tr.size(); ++t) {
      double sq = 0.0;
      for (std::size_t k = 0; k < 3; ++k) sq += std::pow(est[3 * t + k] - tr[t].v[k], 2);
      EXPECT_LT(std::sqrt(sq / 3.0), 3.0 * sigma) << "trial " << trial << " step " << t;
    }
  }
}

TEST(Ukf, Deterministic) {
  const auto spec = models::by_name("ip");
  const auto tr = simulate(spec, {{0.1, -0.2}, 0}, 5);
  Rng rng = substream(1, 0, 0x78);
  const auto y = observe_all(spec, tr, &rng);
  UkfConfig cfg;
  cfg.init_mean = {0.0, 0.0};
  cfg.init_var = {0.2, 0.5};
  EXPECT_EQ(ukf_estimate(spec, y, cfg), ukf_estimate(spec, y, cfg));
}

TEST(Ukf, BadInputs) {
  const auto spec = models::by_name("ip");
  UkfConfig cfg;
  cfg.init_mean = {0.0, 0.0};
  cfg.init_var = {1.0, 1.0};
  EXPECT_THROW(ukf_estimate(spec, std::vector<double>{}, cfg), ShapeError);
  cfg.init_var = {1.0};
  EXPECT_THROW(ukf_estimate(spec, std::vector<double>{0.1}, cfg), ConfigError);
}

TEST(Ukf, NonFiniteObservationDiverges) {
  const auto spec = models::by_name("twt");
  UkfConfig cfg;
  cfg.init_mean = {5.0, 5.0, 5.0};
  cfg.init_var = {0.1, 0.1, 0.1};
  const std::vector<double> y{5.0, 5.0, 5.0, std::nan(""), 5.0, 5.0};
  EXPECT_THROW(ukf_estimate(spec, y, cfg), FilterDiverged);
}

TEST(Cholesky, JitterRescuesSemidefinite) {
  Eigen::MatrixXd P(2, 2);
  P << 1.0, 1.0, 1.0, 1.0;
  const Eigen::MatrixXd L = detail::robust_cholesky(P);
  EXPECT_LT((L * L.transpose() - P).cwiseAbs().maxCoeff(), 1e-6);
  Eigen::MatrixXd N(2, 2);
  N << -1.0, 0.0, 0.0, -1.0;
  EXPECT_THROW(detail::robust_cholesky(N), FilterDiverged);
}

TEST(RelativeError, Examples) {
  const std::vector<double> truth{0.0, 1.0, 2.0, 3.0}, range{2.0, 4.0};
  EXPECT_EQ(relative_error(truth, truth, range), 0.0);
  // One full range unit of offset on dim 0 at both steps: sqrt(2 * 2^2) / 4.
  const std::vector<double> off{2.0, 1.0, 4.0, 3.0};
  EXPECT_DOUBLE_EQ(relative_error(truth, off, range), std::sqrt(8.0) / 4.0);
}

TEST(RelativeError, ZeroRangeDimensionExcluded) {
  const std::vector<double> truth{0.0, 1.0}, est{0.0, 7.0}, range{1.0, 0.0};
  EXPECT_EQ(relative_error(truth, est, range), 0.0);
  EXPECT_THROW(relative_error(truth, est, std::vector<double>{0.0, 0.0}), ConfigError);
  EXPECT_THROW(relative_error(truth, std::vector<double>{0.0}, range), ShapeError);
}

TEST(RelativeError, NonnegativeAndZeroOnlyWhenEqual) {
  Rng rng = substream(2, 0, 0x79);
  std::normal_distribution<double> z(0.0, 1.0);
  const std::vector<double> range{1.0, 3.0, 0.5};
  for (int i = 0; i < 500; ++i) {
    std::vector<double> a(6), b(6);
    for (auto& x : a) x = z(rng);
    b = a;
    EXPECT_EQ(relative_error(a, b, range), 0.0);
    b[static_cast<std::size_t>(i % 6)] += 1e-3 + std::abs(z(rng));
    EXPECT_GT(relative_error(a, b, range), 0.0);
  }
}

TEST(UkfPrior, FromTrainingStates) {
  Dataset d;
  d.state_dim = 2;
  d.samples.resize(2);
  d.samples[0].states = {0.0, 1.0, 2.0, 3.0};
  d.samples[1].states = {4.0, 5.0, 6.0, 7.0};
  const auto c = ukf_config_from(d);
  EXPECT_DOUBLE_EQ(c.init_mean[0], 3.0);
  EXPECT_DOUBLE_EQ(c.init_mean[1], 4.0);
  EXPECT_DOUBLE_EQ(c.init_var[0], 5.0);
  EXPECT_DOUBLE_EQ(c.init_var[1], 5.0);
  d.scaled = true;
  EXPECT_THROW(ukf_config_from(d), ConfigError);
}
