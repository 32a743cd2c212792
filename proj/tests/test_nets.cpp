#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "npm/models.hpp"
#include "npm/monitor.hpp"

using namespace npm;
using namespace npm::nn;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("npm_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

Tensor random_tensor(std::size_t n, std::size_t c, std::size_t l, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(n, c, l);
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data) v = u(rng);
  return t;
}

// Direct nested-loop convolution with "same" padding, no activation.
Tensor conv_oracle(const Tensor& x, const std::vector<double>& w, const std::vector<double>& b, int out_c, int k) {
  Tensor y(x.n, static_cast<std::size_t>(out_c), x.l);
  const int pad = (k - 1) / 2;
  for (std::size_t n = 0; n < x.n; ++n)
    for (int o = 0; o < out_c; ++o)
      for (int t = 0; t < static_cast<int>(x.l); ++t) {
        double acc = b[static_cast<std::size_t>(o)];
        for (int i = 0; i < static_cast<int>(x.c); ++i)
          for (int j = 0; j < k; ++j) {
            const int src = t + j - pad;
            if (src < 0 || src >= static_cast<int>(x.l)) continue;
            acc += w[static_cast<std::size_t>((o * static_cast<int>(x.c) + i) * k + j)] *
                   x.at(n, static_cast<std::size_t>(i), static_cast<std::size_t>(src));
          }
        y.at(n, static_cast<std::size_t>(o), static_cast<std::size_t>(t)) = acc;
      }
  return y;
}

NetSpec tiny_classifier(int c, int l) {
  NetSpec s;
  s.in_channels = c;
  s.in_length = l;
  s.layers = {LayerSpec::conv(4, 3, Activation::leaky_relu), LayerSpec::dropout(0.2),
              LayerSpec::dense(5, Activation::tanh), LayerSpec::dense(2, Activation::relu)};
  return s;
}

NetSpec tiny_regressor(int c_in, int c_out, int l) {
  NetSpec s;
  s.in_channels = c_in;
  s.in_length = l;
  s.head = Head::regressor;
  s.layers = {LayerSpec::conv(4, 5, Activation::leaky_relu), LayerSpec::conv(c_out, 3, Activation::tanh)};
  return s;
}

std::vector<int> random_labels(std::size_t n, Rng& rng) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng() & 1u);
  return y;
}

// Central differences of a scalar loss over every weight.
template <typename Loss>
std::vector<double> numeric_gradient(Network& net, Loss&& loss, double h = 1e-4) {
  auto w = net.weights();
  std::vector<double> g(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double w0 = w[i];
    w[i] = w0 + h;
    net.set_weights(w);
    const double fp = loss();
    w[i] = w0 - h;
    net.set_weights(w);
    const double fm = loss();
    w[i] = w0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  net.set_weights(w);
  return g;
}

double max_relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), 1e-6});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

Dataset scaled_twt(int n, std::uint64_t seed, double noise_scale) {
  auto spec = models::triple_water_tank();
  Dataset d = gen_independent(spec, n, 2, seed, noise_scale);
  d.scaler = fit_scaler(d);
  return scale(d);
}

}  // namespace

// --- forward ---------------------------------------------------------------

TEST(Forward, IdentityDensePassesInputThrough) {
  NetSpec s;
  s.in_channels = 2;
  s.in_length = 1;
  s.layers = {LayerSpec::dense(2, Activation::identity), LayerSpec::dense(2, Activation::relu)};
  Network net(s, 1);
  std::vector<double> w = {1, 0, 0, 1, 0, 0, 1, 0, 0, 1, 0, 0};
  net.set_weights(w);
  Tensor x(1, 2, 1);
  x.data = {0.25, 0.75};
  EXPECT_EQ(net.predict(x).data, x.data);
}

TEST(Forward, ZeroWeightClassifierGivesEqualLogitsAndLabelZero) {
  Network net(tiny_classifier(2, 4), 3);
  net.set_weights(std::vector<double>(net.num_params(), 0.0));
  Rng rng(1);
  const Tensor x = random_tensor(5, 2, 4, rng);
  const Tensor z = net.predict(x);
  for (std::size_t b = 0; b < 5; ++b) EXPECT_EQ(z.at(b, 0, 0), z.at(b, 1, 0));

  MonitorModel m;
  m.nets.push_back(net);
  for (const auto& p : predict(m, x)) {
    EXPECT_EQ(p.label, 0);
    EXPECT_EQ(p.likelihood[0], 0.5);
    EXPECT_EQ(p.likelihood[1], 0.5);
  }
}

TEST(Forward, ConvMatchesNestedLoopOracle) {
  Rng rng(7);
  for (int k : {1, 2, 3, 4, 5}) {
    NetSpec s;
    s.in_channels = 3;
    s.in_length = 8;
    s.head = Head::regressor;
    s.layers = {LayerSpec::conv(4, k, Activation::tanh)};
    Network net(s, 11);
    auto w = net.weights();
    std::uniform_real_distribution<double> u(-1, 1);
    for (auto& v : w) v = u(rng);
    net.set_weights(w);
    const Tensor x = random_tensor(2, 3, 8, rng);
    const std::vector<double> weights(w.begin(), w.end() - 4), bias(w.end() - 4, w.end());
    Tensor expect = conv_oracle(x, weights, bias, 4, k);
    for (double& v : expect.data) v = std::tanh(v);
    const Tensor got = net.predict(x);
    ASSERT_TRUE(got.same_shape(expect));
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got.data[i], expect.data[i], 1e-6) << "k=" << k;
  }
}

TEST(Forward, ShapeMismatchThrows) {
  Network net(tiny_classifier(2, 4), 1);
  EXPECT_THROW(net.predict(Tensor(1, 3, 4)), ShapeError);
  EXPECT_THROW(net.predict(Tensor(1, 2, 5)), ShapeError);
}

TEST(Forward, InvalidSpecsRejected) {
  NetSpec s = tiny_classifier(2, 4);
  s.layers.back() = LayerSpec::dense(2, Activation::tanh);
  EXPECT_THROW(Network(s, 0), ShapeError);
  s = tiny_classifier(2, 4);
  s.layers[1] = LayerSpec::dropout(1.0);
  EXPECT_THROW(Network(s, 0), ShapeError);
  s = tiny_regressor(2, 3, 4);
  s.layers.back().activation = Activation::relu;
  EXPECT_THROW(Network(s, 0), ShapeError);
}

TEST(Forward, DropoutIsIdentityInEvalMode) {
  NetSpec s;
  s.in_channels = 1;
  s.in_length = 16;
  s.head = Head::regressor;
  s.layers = {LayerSpec::dropout(0.5), LayerSpec::conv(1, 1, Activation::tanh)};
  Network net(s, 0);
  net.set_weights(std::vector<double>{1.0, 0.0});
  Rng rng(3);
  const Tensor x = random_tensor(4, 1, 16, rng);
  Tensor expect = x;
  for (double& v : expect.data) v = std::tanh(v);
  EXPECT_EQ(net.predict(x).data, expect.data);
  Rng drop(5);
  const Tensor train = net.forward(x, true, drop);
  EXPECT_NE(train.data, expect.data);
}

TEST(Forward, ClassifierHeadIsNonnegative) {
  Rng rng(9);
  for (int seed = 0; seed < 10; ++seed) {
    Network net(classifier_spec(Profile::desk, 3, 6), static_cast<std::uint64_t>(seed));
    const Tensor z = net.predict(random_tensor(20, 3, 6, rng, -5, 5));
    for (double v : z.data) EXPECT_GE(v, 0.0);
  }
}

TEST(Forward, EvalModeIsDeterministic) {
  Network net(classifier_spec(Profile::desk, 2, 3), 4);
  Rng rng(1);
  const Tensor x = random_tensor(8, 2, 3, rng);
  EXPECT_EQ(net.predict(x).data, net.predict(x).data);
}

TEST(Forward, CopiesAreIndependent) {
  Network a(tiny_classifier(1, 3), 1);
  Network b = a;
  auto w = b.weights();
  w[0] += 1.0;
  b.set_weights(w);
  EXPECT_NE(a.weights(), b.weights());
}

// --- gradients -------------------------------------------------------------

TEST(Gradients, ZeroTargetMseOnZeroNetIsZero) {
  Network net(tiny_regressor(2, 3, 6), 0);
  net.set_weights(std::vector<double>(net.num_params(), 0.0));
  Rng rng(2);
  const Tensor x = random_tensor(4, 2, 6, rng);
  regressor_gradients(net, x, Tensor(4, 3, 6), rng, false);
  for (double g : net.gradient()) EXPECT_EQ(g, 0.0);
}

// Random architectures covering every layer type and activation.
TEST(Gradients, FiniteDifferenceOnTwentyRandomNets) {
  Rng arch(2024);
  const std::vector<Activation> acts = {Activation::identity, Activation::relu, Activation::leaky_relu,
                                        Activation::tanh};
  for (int trial = 0; trial < 20; ++trial) {
    const int c = 1 + static_cast<int>(arch() % 3), l = 2 + static_cast<int>(arch() % 6);
    NetSpec s;
    s.in_channels = c;
    s.in_length = l;
    const int convs = 1 + static_cast<int>(arch() % 2);
    for (int i = 0; i < convs; ++i)
      s.layers.push_back(LayerSpec::conv(2 + static_cast<int>(arch() % 3), 1 + static_cast<int>(arch() % 5),
                                         acts[arch() % acts.size()]));
    s.layers.push_back(LayerSpec::dropout(0.3));
    const bool classifier = trial % 2 == 0;
    if (classifier) {
      s.layers.push_back(LayerSpec::dense(3 + static_cast<int>(arch() % 3), acts[arch() % acts.size()]));
      s.layers.push_back(LayerSpec::dense(2, Activation::relu));
    } else {
      s.head = Head::regressor;
      s.layers.push_back(LayerSpec::conv(2, 3, Activation::tanh));
    }
    Network net(s, static_cast<std::uint64_t>(trial));
    // Positive bias on the head keeps the ReLU outputs active so the check is not vacuous.
    Rng data(static_cast<std::uint64_t>(100 + trial));
    const Tensor x = random_tensor(3, static_cast<std::size_t>(c), static_cast<std::size_t>(l), data);
    std::vector<double> analytic, numeric;
    if (classifier) {
      auto w = net.weights();
      w[w.size() - 1] = 0.5;
      w[w.size() - 2] = 0.5;
      net.set_weights(w);
      const auto y = random_labels(3, data);
      Rng unused(0);
      classifier_gradients(net, x, y, unused, false);
      analytic = net.gradient();
      numeric = numeric_gradient(net, [&] {
        Tensor g;
        return cross_entropy(net.predict(x), y, g);
      });
    } else {
      const Tensor target = random_tensor(3, 2, static_cast<std::size_t>(l), data, -0.9, 0.9);
      Rng unused(0);
      regressor_gradients(net, x, target, unused, false);
      analytic = net.gradient();
      numeric = numeric_gradient(net, [&] {
        Tensor g;
        return mse(net.predict(x), target, g);
      });
    }
    EXPECT_LT(max_relative_error(analytic, numeric), 1e-4) << "trial " << trial;
  }
}

TEST(Gradients, InputGradientMatchesFiniteDifference) {
  Network net(tiny_regressor(2, 2, 5), 8);
  Rng rng(4);
  Tensor x = random_tensor(2, 2, 5, rng);
  const Tensor target = random_tensor(2, 2, 5, rng, -0.5, 0.5);
  net.zero_grad();
  Tensor g;
  mse(net.forward(x, false, rng), target, g);
  const Tensor dx = net.backward(g);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x.data[i];
    x.data[i] = x0 + 1e-5;
    const double fp = mse(net.predict(x), target, g);
    x.data[i] = x0 - 1e-5;
    const double fm = mse(net.predict(x), target, g);
    x.data[i] = x0;
    EXPECT_NEAR(dx.data[i], (fp - fm) / 2e-5, 1e-7);
  }
}

TEST(Gradients, CombinedIsSumOfParts) {
  Network nse(tiny_regressor(2, 3, 4), 1), nsc(tiny_classifier(3, 4), 2);
  auto w = nsc.weights();
  w[w.size() - 1] = w[w.size() - 2] = 0.5;
  nsc.set_weights(w);
  Rng rng(6);
  const Tensor y = random_tensor(5, 2, 4, rng), s = random_tensor(5, 3, 4, rng, -0.8, 0.8);
  const auto l = random_labels(5, rng);
  auto grads = [&](LossKind k) {
    Rng unused(0);
    pipeline_gradients(nse, nsc, y, s, l, k, unused, false);
    auto a = nse.gradient(), b = nsc.gradient();
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  const auto gm = grads(LossKind::mse), gc = grads(LossKind::cross_entropy), gs = grads(LossKind::combined);
  for (std::size_t i = 0; i < gs.size(); ++i) EXPECT_NEAR(gs[i], gm[i] + gc[i], 1e-10);

  // The classifier path contributes to the estimator's gradient.
  const std::size_t ne = nse.num_params();
  double diff = 0.0;
  for (std::size_t i = 0; i < ne; ++i) diff = std::max(diff, std::abs(gs[i] - gm[i]));
  EXPECT_GT(diff, 1e-8);
}

TEST(Gradients, PipelineMatchesFiniteDifference) {
  Network nse(tiny_regressor(1, 2, 4), 3), nsc(tiny_classifier(2, 4), 4);
  auto w = nsc.weights();
  w[w.size() - 1] = w[w.size() - 2] = 0.5;
  nsc.set_weights(w);
  Rng rng(8);
  const Tensor y = random_tensor(3, 1, 4, rng), s = random_tensor(3, 2, 4, rng, -0.8, 0.8);
  const auto l = random_labels(3, rng);
  Rng unused(0);
  pipeline_gradients(nse, nsc, y, s, l, LossKind::combined, unused, false);
  const auto analytic = nse.gradient();
  const auto numeric = numeric_gradient(nse, [&] {
    Tensor g;
    const Tensor shat = nse.predict(y);
    return mse(shat, s, g) + cross_entropy(nsc.predict(shat), l, g);
  });
  EXPECT_LT(max_relative_error(analytic, numeric), 1e-4);
}

TEST(Gradients, NonFiniteLossThrows) {
  Network net(tiny_regressor(1, 1, 3), 0);
  Tensor x(1, 1, 3), target(1, 1, 3);
  target.data[0] = std::numeric_limits<double>::quiet_NaN();
  Rng rng(0);
  EXPECT_THROW(regressor_gradients(net, x, target, rng), NumericalError);
}

// --- training --------------------------------------------------------------

TEST(Training, SeparableToySetReachesFullAccuracy) {
  Rng rng(31);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Tensor x(200, 1, 1);
  std::vector<int> y(200);
  for (std::size_t i = 0; i < 200; ++i) {
    const bool pos = i % 2 == 0;
    x.data[i] = pos ? u(rng) : -u(rng);
    y[i] = pos ? 1 : 0;
  }
  TrainLog log;
  const Network net = train_classifier(x, y, classifier_spec(Profile::desk, 1, 1), {1e-2, 50, 16, 5}, &log);
  EXPECT_EQ(accuracy(classify(net, x), y), 1.0);
  EXPECT_EQ(log.epoch_loss.size(), 50u);
  EXPECT_LT(log.epoch_loss.back(), log.epoch_loss.front());
}

TEST(Training, FlippedDuplicatesAreUnlearnable) {
  Rng rng(32);
  const Tensor half = random_tensor(200, 1, 3, rng);
  Tensor x(400, 1, 3);
  std::vector<int> y(400);
  for (std::size_t i = 0; i < 200; ++i) {
    std::copy_n(half.sample(i).begin(), 3, x.sample(i).begin());
    std::copy_n(half.sample(i).begin(), 3, x.sample(200 + i).begin());
    y[i] = static_cast<int>(i % 2);
    y[200 + i] = 1 - y[i];
  }
  const Network net = train_classifier(x, y, classifier_spec(Profile::desk, 1, 3), {1e-3, 30, 32, 6});
  EXPECT_NEAR(accuracy(classify(net, x), y), 0.5, 0.05);
}

TEST(Training, PaperProfileOptionsAreEchoed) {
  auto spec = models::inverted_pendulum();
  Dataset d = gen_independent(spec, 8, 2, 3);
  d.scaler = fit_scaler(d);
  d = scale(d);
  const auto opts = paper_train_options(Approach::end_to_end, 17);
  EXPECT_EQ(opts.classifier, (TrainOptions{1e-5, 200, 64, 17}));
  const MonitorModel m = train_monitor(d, Approach::end_to_end, opts);
  EXPECT_EQ(m.metadata.at("profile"), "paper");
  EXPECT_EQ(train_options_from_json(m.metadata.at("classifier").at("opts")), opts.classifier);
  EXPECT_EQ(m.metadata.at("classifier").at("loss_curve").size(), 200u);
  EXPECT_EQ(m.nets[0].spec(), classifier_spec(Profile::paper, 1, 2));

  const auto two = paper_train_options(Approach::two_step, 17);
  EXPECT_EQ(two.classifier.lr, 1e-6);
  EXPECT_EQ(two.estimator.lr, 1e-6);
  EXPECT_EQ(two.fine_tune, (TrainOptions{1e-7, 100, 64, 17}));
}

TEST(Training, SameSeedGivesBitwiseIdenticalWeights) {
  Rng rng(40);
  const Tensor x = random_tensor(64, 2, 3, rng);
  const auto y = random_labels(64, rng);
  const auto spec = classifier_spec(Profile::desk, 2, 3);
  const auto a = train_classifier(x, y, spec, {1e-3, 3, 16, 9}).weights();
  const auto b = train_classifier(x, y, spec, {1e-3, 3, 16, 9}).weights();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0);
  const auto c = train_classifier(x, y, spec, {1e-3, 3, 16, 10}).weights();
  EXPECT_NE(a, c);
}

TEST(Training, InvalidOptionsRejected) {
  Tensor x(4, 1, 1);
  std::vector<int> y(4, 0);
  const auto spec = classifier_spec(Profile::desk, 1, 1);
  EXPECT_THROW(train_classifier(x, y, spec, {0.0, 1, 4, 0}), ConfigError);
  EXPECT_THROW(train_classifier(x, y, spec, {1e-3, 1, 0, 0}), ConfigError);
  EXPECT_THROW(train_classifier(x, std::vector<int>(3, 0), spec, {1e-3, 1, 4, 0}), ShapeError);
}

TEST(Training, DivergenceAbortsWithDiagnostics) {
  Rng rng(41);
  Tensor x = random_tensor(16, 1, 2, rng);
  x.data[5] = std::numeric_limits<double>::infinity();
  try {
    train_classifier(x, std::vector<int>(16, 1), classifier_spec(Profile::desk, 1, 2), {1e-3, 2, 4, 0});
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos) << e.what();
  }
}

TEST(Estimator, LearnsIdentityObservationOfWaterTank) {
  const Dataset d = scaled_twt(1200, 5, 0.0);
  std::vector<std::size_t> tr(1000), te(200);
  std::iota(tr.begin(), tr.end(), 0);
  std::iota(te.begin(), te.end(), 1000);
  const Dataset train = d.subset(tr), test = d.subset(te);
  const Network nse = train_estimator(obs_tensor(train), state_tensor(train),
                                      estimator_spec(Profile::desk, 3, 3, train.window), {2e-3, 80, 32, 1});
  Tensor g;
  EXPECT_LT(mse(nse.predict(obs_tensor(test)), state_tensor(test), g), 1e-3);
}

TEST(Estimator, ConstantTargetIsLearned) {
  Rng rng(50);
  const Tensor y = random_tensor(128, 2, 4, rng);
  Tensor s(128, 3, 4, 0.3);
  const Network nse = train_estimator(y, s, estimator_spec(Profile::desk, 2, 3, 4), {3e-3, 150, 32, 2});
  Tensor g;
  EXPECT_LT(mse(nse.predict(y), s, g), 1e-4);
}

TEST(Estimator, OutputsStayInUnitBox) {
  Rng rng(51);
  const Tensor y = random_tensor(64, 2, 5, rng, -50, 50);
  for (int seed = 0; seed < 5; ++seed) {
    Network nse(estimator_spec(Profile::desk, 2, 4, 5), static_cast<std::uint64_t>(seed));
    auto w = nse.weights();
    for (auto& v : w) v *= 10.0;
    nse.set_weights(w);
    for (double v : nse.predict(y).data) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(FineTune, ZeroEpochsLeavesWeightsUnchanged) {
  Rng rng(60);
  Network nse(estimator_spec(Profile::desk, 1, 2, 3), 1), nsc(classifier_spec(Profile::desk, 2, 3), 2);
  const auto we = nse.weights(), wc = nsc.weights();
  const Tensor y = random_tensor(30, 1, 3, rng), s = random_tensor(30, 2, 3, rng);
  const auto rep = fine_tune(nse, nsc, y, s, random_labels(30, rng), {1e-3, 0, 8, 0});
  EXPECT_EQ(std::memcmp(we.data(), nse.weights().data(), we.size() * sizeof(double)), 0);
  EXPECT_EQ(std::memcmp(wc.data(), nsc.weights().data(), wc.size() * sizeof(double)), 0);
  EXPECT_FALSE(rep.reverted);
}

TEST(FineTune, DivergenceRestoresWeights) {
  Rng rng(61);
  Network nse(estimator_spec(Profile::desk, 1, 2, 3), 1), nsc(classifier_spec(Profile::desk, 2, 3), 2);
  const auto we = nse.weights(), wc = nsc.weights();
  Tensor y = random_tensor(30, 1, 3, rng);
  Tensor s = random_tensor(30, 2, 3, rng);
  s.data[3] = std::numeric_limits<double>::quiet_NaN();
  const auto rep = fine_tune(nse, nsc, y, s, random_labels(30, rng), {1e-3, 2, 8, 0});
  EXPECT_TRUE(rep.reverted);
  EXPECT_EQ(nse.weights(), we);
  EXPECT_EQ(nsc.weights(), wc);
}

TEST(FineTune, GuardKeepsHeldOutAccuracy) {
  Rng rng(62);
  Network nse(estimator_spec(Profile::desk, 1, 2, 3), 1), nsc(classifier_spec(Profile::desk, 2, 3), 2);
  const Tensor y = random_tensor(200, 1, 3, rng), s = random_tensor(200, 2, 3, rng);
  const auto rep = fine_tune(nse, nsc, y, s, random_labels(200, rng), {5e-2, 3, 16, 3});
  EXPECT_GE(rep.holdout_accuracy_after, rep.holdout_accuracy_before - kFineTuneTolerance);
}

// --- monitor model ---------------------------------------------------------

class TrainedTwoStep : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new Dataset(scaled_twt(300, 12, 1.0));
    MonitorTrainOptions o;
    o.classifier = {1e-3, 3, 32, 1};
    o.estimator = {1e-3, 3, 32, 2};
    o.fine_tune = {1e-4, 2, 32, 3};
    model_ = new MonitorModel(train_monitor(*data_, Approach::two_step, o));
  }
  static void TearDownTestSuite() {
    delete model_;
    delete data_;
  }
  static Dataset* data_;
  static MonitorModel* model_;
};
Dataset* TrainedTwoStep::data_ = nullptr;
MonitorModel* TrainedTwoStep::model_ = nullptr;

TEST_F(TrainedTwoStep, PredictEqualsManualComposition) {
  const Tensor y = obs_tensor(*data_);
  const auto preds = predict(*model_, y);
  const Tensor shat = model_->nets[0].predict(y);
  const Tensor z = model_->nets[1].predict(shat);
  for (std::size_t b = 0; b < y.n; ++b) {
    const auto p = softmax2(z.at(b, 0, 0), z.at(b, 1, 0));
    EXPECT_EQ(preds[b].likelihood, p);
    EXPECT_EQ(preds[b].label, p[1] > p[0] ? 1 : 0);
    EXPECT_EQ(preds[b].states, time_major(shat, b));
  }
  EXPECT_TRUE(model_->metadata.contains("fine_tune"));
}

TEST_F(TrainedTwoStep, CheckpointRoundTripIsBitwise) {
  const auto dir = temp_dir("model");
  save(*model_, dir);
  const MonitorModel back = load_model(dir);
  ASSERT_EQ(back.nets.size(), 3u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.nets[i].spec(), model_->nets[i].spec());
    EXPECT_EQ(back.nets[i].weights(), model_->nets[i].weights());
  }
  EXPECT_EQ(back.metadata, model_->metadata);
  const auto a = predict(*model_, *data_), b = predict(back, *data_);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].likelihood, b[i].likelihood);
    EXPECT_EQ(a[i].states, b[i].states);
  }
  fs::remove_all(dir);
}

TEST_F(TrainedTwoStep, CorruptedCheckpointIsRejected) {
  const auto dir = temp_dir("model_bad");
  save(*model_, dir);
  {
    std::fstream f(dir / "weights_1.f32", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(10);
    f.put('\x7f');
  }
  EXPECT_THROW(load_model(dir), IntegrityError);
  fs::remove_all(dir);
  EXPECT_THROW(load_model(dir), MissingArtifact);
}

TEST_F(TrainedTwoStep, StateEstimatorIsTheNseBeforeFineTuning) {
  const auto& se = model_->state_estimator();
  EXPECT_EQ(se.spec(), model_->estimator().spec());
  // Rebuild the NSE stage alone with the same options: it must match the snapshot exactly.
  Network nse(estimator_spec(Profile::desk, data_->obs_dim, data_->state_dim, data_->window), 2);
  fit_estimator(nse, obs_tensor(*data_), state_tensor(*data_), {1e-3, 3, 32, 2});
  nse.round_to_float();
  EXPECT_EQ(se.weights(), nse.weights());
  if (!model_->metadata["fine_tune"]["reverted"].get<bool>()) {
    EXPECT_NE(se.weights(), model_->estimator().weights());
  }
}

TEST(Monitor, EndToEndHasNoEstimator) {
  MonitorModel m;
  m.nets.emplace_back(classifier_spec(Profile::desk, 1, 2), 0);
  EXPECT_THROW(m.estimator(), ConfigError);
  EXPECT_THROW(m.state_estimator(), ConfigError);
  EXPECT_THROW(predict(m, Tensor(1, 2, 2)), ShapeError);
}
