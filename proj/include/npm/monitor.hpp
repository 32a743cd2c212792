#pragma once

// Monitor training: end-to-end classifier, neural state estimator (NSE),
// state classifier (NSC), joint fine-tuning, prediction and checkpoints.

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "npm/dataset.hpp"
#include "npm/io.hpp"
#include "npm/nets.hpp"

namespace npm {

enum class Approach { end_to_end, two_step };

inline std::string to_string(Approach a) { return a == Approach::end_to_end ? "end_to_end" : "two_step"; }

inline Approach approach_from_string(const std::string& s) {
  if (s == "end_to_end" || s == "e2e") return Approach::end_to_end;
  if (s == "two_step" || s == "two-step" || s == "2step") return Approach::two_step;
  throw ConfigError("unknown approach '" + s + "'");
}

enum class Profile { desk, paper };

inline Profile profile_from_string(const std::string& s) {
  if (s == "desk") return Profile::desk;
  if (s == "paper") return Profile::paper;
  throw ConfigError("unknown profile '" + s + "'");
}

inline std::string to_string(Profile p) { return p == Profile::desk ? "desk" : "paper"; }

/// Classifier over a (channels x length) sequence: end-to-end net and NSC share it.
inline nn::NetSpec classifier_spec(Profile p, int channels, int length) {
  using nn::Activation;
  using nn::LayerSpec;
  nn::NetSpec s;
  s.in_channels = channels;
  s.in_length = length;
  s.head = nn::Head::classifier;
  const int convs = p == Profile::desk ? 2 : 4;
  const int filters = p == Profile::desk ? 32 : 128;
  for (int i = 0; i < convs; ++i) s.layers.push_back(LayerSpec::conv(filters, 3, Activation::leaky_relu));
  s.layers.push_back(LayerSpec::dropout(0.2));
  s.layers.push_back(LayerSpec::dense(p == Profile::desk ? 64 : 100, Activation::leaky_relu));
  s.layers.push_back(LayerSpec::dense(2, Activation::relu));
  return s;
}

/// Observation sequence -> state sequence of the same length, tanh output.
inline nn::NetSpec estimator_spec(Profile p, int obs_dim, int state_dim, int length) {
  using nn::Activation;
  using nn::LayerSpec;
  nn::NetSpec s;
  s.in_channels = obs_dim;
  s.in_length = length;
  s.head = nn::Head::regressor;
  const int hidden = p == Profile::desk ? 2 : 4;
  const int filters = p == Profile::desk ? 32 : 128;
  for (int i = 0; i < hidden; ++i) s.layers.push_back(LayerSpec::conv(filters, 5, Activation::leaky_relu));
  s.layers.push_back(LayerSpec::dropout(0.2));
  s.layers.push_back(LayerSpec::conv(state_dim, 5, Activation::tanh));
  return s;
}

struct TrainOptions {
  double lr = 1e-3;
  int epochs = 100;
  int batch = 64;
  std::uint64_t seed = 0;

  friend bool operator==(const TrainOptions&, const TrainOptions&) = default;
};

inline io::json to_json(const TrainOptions& o) {
  return {{"lr", o.lr}, {"epochs", o.epochs}, {"batch", o.batch}, {"seed", o.seed}};
}

inline TrainOptions train_options_from_json(const io::json& j) {
  return {j.at("lr").get<double>(), j.at("epochs").get<int>(), j.at("batch").get<int>(),
          j.at("seed").get<std::uint64_t>()};
}

inline void validate(const TrainOptions& o) {
  if (!(o.lr > 0.0) || !std::isfinite(o.lr)) throw ConfigError("learning rate must be positive");
  if (o.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (o.batch < 1) throw ConfigError("batch size must be >= 1");
}

// ---------------------------------------------------------------------------
// Dataset -> tensors. Samples are time-major; nets want channel-major.

inline nn::Tensor to_channels(const std::vector<double>& time_major, std::size_t dim, std::size_t len,
                              nn::Tensor& out, std::size_t b) {
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t k = 0; k < dim; ++k) out.at(b, k, t) = time_major[t * dim + k];
  return out;
}

inline nn::Tensor obs_tensor(const Dataset& d) {
  nn::Tensor x(d.size(), static_cast<std::size_t>(d.obs_dim), static_cast<std::size_t>(d.window));
  for (std::size_t i = 0; i < d.size(); ++i) to_channels(d.samples[i].obs, x.c, x.l, x, i);
  return x;
}

inline nn::Tensor state_tensor(const Dataset& d) {
  nn::Tensor x(d.size(), static_cast<std::size_t>(d.state_dim), static_cast<std::size_t>(d.window));
  for (std::size_t i = 0; i < d.size(); ++i) to_channels(d.samples[i].states, x.c, x.l, x, i);
  return x;
}

inline std::vector<int> label_vector(const Dataset& d) {
  std::vector<int> y(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) y[i] = to_int(d.samples[i].label);
  return y;
}

/// Time-major copy of sample b of a channel-major tensor.
inline std::vector<double> time_major(const nn::Tensor& x, std::size_t b) {
  std::vector<double> out(x.row());
  for (std::size_t t = 0; t < x.l; ++t)
    for (std::size_t k = 0; k < x.c; ++k) out[t * x.c + k] = x.at(b, k, t);
  return out;
}

// ---------------------------------------------------------------------------
// Losses and gradients

enum class LossKind { cross_entropy, mse, combined };

inline void require_finite_loss(double loss, const std::string& where) {
  if (!std::isfinite(loss)) throw NumericalError("non-finite loss in " + where);
}

inline void require_finite_gradient(const nn::Network& net, const std::string& where) {
  if (!all_finite(net.gradient())) throw NumericalError("non-finite gradient in " + where);
}

/// Cross-entropy loss of a classifier; gradients are accumulated into the net.
inline double classifier_gradients(nn::Network& net, const nn::Tensor& x, std::span<const int> labels,
                                   Rng& rng, bool training = true) {
  net.zero_grad();
  const nn::Tensor z = net.forward(x, training, rng);
  nn::Tensor g;
  const double loss = nn::cross_entropy(z, labels, g);
  require_finite_loss(loss, "classifier");
  net.backward(g);
  require_finite_gradient(net, "classifier");
  return loss;
}

/// MSE loss of a regressor against `target`; gradients are accumulated into the net.
inline double regressor_gradients(nn::Network& net, const nn::Tensor& x, const nn::Tensor& target, Rng& rng,
                                  bool training = true) {
  net.zero_grad();
  const nn::Tensor z = net.forward(x, training, rng);
  nn::Tensor g;
  const double loss = nn::mse(z, target, g);
  require_finite_loss(loss, "estimator");
  net.backward(g);
  require_finite_gradient(net, "estimator");
  return loss;
}

/// Pipeline loss for NSC(NSE(y)): mse(NSE(y), s), cross_entropy(NSC(NSE(y)), l), or their sum.
/// Gradients for both nets are left accumulated in the nets.
inline double pipeline_gradients(nn::Network& nse, nn::Network& nsc, const nn::Tensor& y, const nn::Tensor& s,
                                 std::span<const int> labels, LossKind kind, Rng& rng, bool training = true) {
  nse.zero_grad();
  nsc.zero_grad();
  const nn::Tensor shat = nse.forward(y, training, rng);
  double loss = 0.0;
  nn::Tensor g_shat(shat.n, shat.c, shat.l);
  if (kind != LossKind::cross_entropy) {
    loss += nn::mse(shat, s, g_shat);
  }
  if (kind != LossKind::mse) {
    const nn::Tensor z = nsc.forward(shat, training, rng);
    nn::Tensor gz;
    loss += nn::cross_entropy(z, labels, gz);
    const nn::Tensor back = nsc.backward(gz);
    for (std::size_t i = 0; i < g_shat.size(); ++i) g_shat.data[i] += back.data[i];
  }
  require_finite_loss(loss, "pipeline");
  nse.backward(g_shat);
  require_finite_gradient(nse, "pipeline");
  require_finite_gradient(nsc, "pipeline");
  return loss;
}

// ---------------------------------------------------------------------------
// Training

struct TrainLog {
  std::vector<double> epoch_loss;
};

namespace detail {

/// Shuffled minibatch loop. `step(idx)` computes gradients for the batch and returns its loss.
template <typename Step, typename Update>
TrainLog run_epochs(std::size_t n, const TrainOptions& opts, Rng& rng, Step&& step, Update&& update,
                    const std::string& what) {
  validate(opts);
  TrainLog log;
  if (n == 0 && opts.epochs > 0) throw ConfigError(what + ": empty training set");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = static_cast<std::size_t>(opts.batch);
  for (int e = 0; e < opts.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      double loss;
      try {
        loss = step(idx);
      } catch (const NumericalError& err) {
        throw NumericalError(what + " diverged at epoch " + std::to_string(e) + ", batch " +
                             std::to_string(batches) + ": " + err.what());
      }
      update();
      total += loss;
      ++batches;
    }
    log.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  return log;
}

inline std::vector<int> gather_labels(std::span<const int> labels, std::span<const std::size_t> idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
  return out;
}

inline void check_weights(const nn::Network& net, const std::string& what) {
  if (!net.finite()) throw NumericalError(what + ": weights became non-finite");
}

}  // namespace detail

/// Trains `net` in place from its current weights.
inline TrainLog fit_classifier(nn::Network& net, const nn::Tensor& x, std::span<const int> labels,
                               const TrainOptions& opts) {
  if (labels.size() != x.n) throw ShapeError("train_classifier: label count mismatch");
  nn::Adam adam(net, {opts.lr});
  Rng rng = substream(opts.seed, 1, 0x7a11u);
  auto log = detail::run_epochs(
      x.n, opts, rng,
      [&](std::span<const std::size_t> idx) {
        const auto yb = detail::gather_labels(labels, idx);
        return classifier_gradients(net, x.gather(idx), yb, rng);
      },
      [&] { adam.step(net); }, "classifier training");
  detail::check_weights(net, "classifier training");
  net.round_to_float();
  return log;
}

inline TrainLog fit_estimator(nn::Network& net, const nn::Tensor& y, const nn::Tensor& s, const TrainOptions& opts) {
  if (y.n != s.n) throw ShapeError("train_estimator: sample count mismatch");
  nn::Adam adam(net, {opts.lr});
  Rng rng = substream(opts.seed, 1, 0x7a12u);
  auto log = detail::run_epochs(
      y.n, opts, rng,
      [&](std::span<const std::size_t> idx) { return regressor_gradients(net, y.gather(idx), s.gather(idx), rng); },
      [&] { adam.step(net); }, "estimator training");
  detail::check_weights(net, "estimator training");
  net.round_to_float();
  return log;
}

inline nn::Network train_classifier(const nn::Tensor& x, std::span<const int> labels, const nn::NetSpec& spec,
                                    const TrainOptions& opts, TrainLog* log = nullptr) {
  nn::Network net(spec, opts.seed);
  auto result = fit_classifier(net, x, labels, opts);
  if (log) *log = std::move(result);
  return net;
}

inline nn::Network train_estimator(const nn::Tensor& y, const nn::Tensor& s, const nn::NetSpec& spec,
                                   const TrainOptions& opts, TrainLog* log = nullptr) {
  nn::Network net(spec, opts.seed);
  auto result = fit_estimator(net, y, s, opts);
  if (log) *log = std::move(result);
  return net;
}

/// Eval-mode labels, argmax with ties to 0.
inline std::vector<int> classify(const nn::Network& net, const nn::Tensor& x) {
  const nn::Tensor z = net.predict(x);
  std::vector<int> out(x.n);
  for (std::size_t b = 0; b < x.n; ++b) {
    const auto p = nn::softmax2(z.at(b, 0, 0), z.at(b, 1, 0));
    out[b] = p[1] > p[0] ? 1 : 0;
  }
  return out;
}

inline double accuracy(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) throw ShapeError("accuracy: size mismatch");
  if (pred.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == truth[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

struct FineTuneReport {
  double holdout_accuracy_before = 0.0;
  double holdout_accuracy_after = 0.0;
  bool reverted = false;
  std::string revert_reason;
  TrainLog log;
};

inline constexpr double kFineTuneTolerance = 0.005;
inline constexpr double kHoldoutFraction = 0.1;

/// Joint update of NSE and NSC on mse + cross-entropy through the composed pipeline.
/// A random 10% of the data is held out; if combined accuracy there drops by more
/// than 0.5 points, or training diverges, the pre-fine-tune weights are restored.
inline FineTuneReport fine_tune(nn::Network& nse, nn::Network& nsc, const nn::Tensor& y, const nn::Tensor& s,
                                std::span<const int> labels, const TrainOptions& opts) {
  validate(opts);
  FineTuneReport rep;
  if (opts.epochs == 0) return rep;
  if (y.n != s.n || labels.size() != y.n) throw ShapeError("fine_tune: sample count mismatch");

  Rng rng = substream(opts.seed, 2, 0xf17eu);
  std::vector<std::size_t> perm(y.n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t n_hold = y.n >= 10 ? static_cast<std::size_t>(static_cast<double>(y.n) * kHoldoutFraction) : 0;
  const std::span<const std::size_t> hold_idx(perm.data(), n_hold);
  const std::span<const std::size_t> fit_idx(perm.data() + n_hold, y.n - n_hold);
  const nn::Tensor y_fit = y.gather(fit_idx), s_fit = s.gather(fit_idx);
  const auto l_fit = detail::gather_labels(labels, fit_idx);
  const nn::Tensor y_hold = y.gather(hold_idx);
  const auto l_hold = detail::gather_labels(labels, hold_idx);

  auto holdout_acc = [&] { return n_hold ? accuracy(classify(nsc, nse.predict(y_hold)), l_hold) : 0.0; };
  rep.holdout_accuracy_before = holdout_acc();

  const nn::Network nse0 = nse, nsc0 = nsc;
  nn::Adam adam_e(nse, {opts.lr}), adam_c(nsc, {opts.lr});
  try {
    rep.log = detail::run_epochs(
        y_fit.n, opts, rng,
        [&](std::span<const std::size_t> idx) {
          const auto lb = detail::gather_labels(l_fit, idx);
          return pipeline_gradients(nse, nsc, y_fit.gather(idx), s_fit.gather(idx), lb, LossKind::combined, rng);
        },
        [&] {
          adam_e.step(nse);
          adam_c.step(nsc);
        },
        "fine-tuning");
    detail::check_weights(nse, "fine-tuning");
    detail::check_weights(nsc, "fine-tuning");
  } catch (const NumericalError& e) {
    nse = nse0;
    nsc = nsc0;
    rep.reverted = true;
    rep.revert_reason = e.what();
    rep.holdout_accuracy_after = rep.holdout_accuracy_before;
    return rep;
  }
  nse.round_to_float();
  nsc.round_to_float();
  rep.holdout_accuracy_after = holdout_acc();
  if (rep.holdout_accuracy_after < rep.holdout_accuracy_before - kFineTuneTolerance) {
    nse = nse0;
    nsc = nsc0;
    rep.reverted = true;
    rep.revert_reason = "held-out accuracy dropped";
    rep.holdout_accuracy_after = rep.holdout_accuracy_before;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// MonitorModel

struct MonitorModel {
  Approach kind = Approach::end_to_end;
  // end_to_end: {classifier}; two_step: {nse, nsc, nse before fine-tuning}. Fine-tuning trades
  // exact-state accuracy for classification accuracy, so state-estimation comparisons use the last one.
  std::vector<nn::Network> nets;
  io::json metadata = io::json::object();

  const nn::Network& classifier() const { return nets.at(kind == Approach::end_to_end ? 0 : 1); }
  const nn::Network& estimator() const {
    if (kind != Approach::two_step) throw ConfigError("end-to-end model has no state estimator");
    return nets.at(0);
  }
  const nn::Network& state_estimator() const {
    if (kind != Approach::two_step) throw ConfigError("end-to-end model has no state estimator");
    return nets.at(2);
  }

  void validate() const {
    if (nets.size() != (kind == Approach::end_to_end ? 1u : 3u)) throw IntegrityError("monitor: wrong number of nets");
    for (const auto& n : nets)
      if (!n.finite()) throw IntegrityError("monitor: non-finite weights");
  }
};

struct MonitorTrainOptions {
  Profile profile = Profile::desk;
  TrainOptions classifier{1e-3, 60, 64, 0};  // end-to-end classifier or NSC
  TrainOptions estimator{1e-3, 60, 64, 0};
  TrainOptions fine_tune{1e-4, 10, 64, 0};
};

/// Paper settings: lr 1e-5 (end-to-end), 1e-6 (NSE/NSC), 1e-7 (fine-tune); 200/200/100 epochs; batch 64.
inline MonitorTrainOptions paper_train_options(Approach a, std::uint64_t seed) {
  MonitorTrainOptions o;
  o.profile = Profile::paper;
  o.classifier = {a == Approach::end_to_end ? 1e-5 : 1e-6, 200, 64, seed};
  o.estimator = {1e-6, 200, 64, seed};
  o.fine_tune = {1e-7, 100, 64, seed};
  return o;
}

/// Trains a monitor on a scaled dataset, from fresh weights or warm-started from `warm`.
inline MonitorModel train_monitor(const Dataset& train, Approach kind, const MonitorTrainOptions& o,
                                  const MonitorModel* warm = nullptr) {
  if (!train.scaled) throw ConfigError("train_monitor expects a scaled dataset");
  if (warm && warm->kind != kind) throw ConfigError("warm start model has a different approach");
  MonitorModel m;
  m.kind = kind;
  const auto y = obs_tensor(train);
  const auto labels = label_vector(train);
  m.metadata["profile"] = to_string(o.profile);
  m.metadata["train_size"] = train.size();
  m.metadata["warm_start"] = warm != nullptr;
  if (kind == Approach::end_to_end) {
    nn::Network net = warm ? warm->nets.at(0)
                           : nn::Network(classifier_spec(o.profile, train.obs_dim, train.window), o.classifier.seed);
    const TrainLog log = fit_classifier(net, y, labels, o.classifier);
    m.metadata["classifier"] = {{"opts", to_json(o.classifier)}, {"loss_curve", log.epoch_loss}};
    m.nets.push_back(std::move(net));
    return m;
  }
  const auto s = state_tensor(train);
  nn::Network nse = warm ? warm->nets.at(0)
                         : nn::Network(estimator_spec(o.profile, train.obs_dim, train.state_dim, train.window),
                                       o.estimator.seed);
  nn::Network nsc = warm ? warm->nets.at(1)
                         : nn::Network(classifier_spec(o.profile, train.state_dim, train.window), o.classifier.seed);
  const TrainLog le = fit_estimator(nse, y, s, o.estimator);
  nn::Network nse_state = nse;
  const TrainLog lc = fit_classifier(nsc, s, labels, o.classifier);
  const FineTuneReport ft = fine_tune(nse, nsc, y, s, labels, o.fine_tune);
  m.metadata["estimator"] = {{"opts", to_json(o.estimator)}, {"loss_curve", le.epoch_loss}};
  m.metadata["classifier"] = {{"opts", to_json(o.classifier)}, {"loss_curve", lc.epoch_loss}};
  m.metadata["fine_tune"] = {{"opts", to_json(o.fine_tune)},
                             {"loss_curve", ft.log.epoch_loss},
                             {"holdout_accuracy_before", ft.holdout_accuracy_before},
                             {"holdout_accuracy_after", ft.holdout_accuracy_after},
                             {"reverted", ft.reverted},
                             {"revert_reason", ft.revert_reason}};
  m.nets.push_back(std::move(nse));
  m.nets.push_back(std::move(nsc));
  m.nets.push_back(std::move(nse_state));
  return m;
}

struct Prediction {
  int label = 0;
  std::array<double, 2> likelihood{0.5, 0.5};
  std::vector<double> states;  // two_step only: reconstructed, scaled, time-major
};

/// Eval-mode inference on scaled observation windows, processed in fixed chunks.
inline std::vector<Prediction> predict(const MonitorModel& m, const nn::Tensor& obs) {
  constexpr std::size_t kChunk = 1024;
  std::vector<Prediction> out(obs.n);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < obs.n; start += kChunk) {
    const std::size_t end = std::min(obs.n, start + kChunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const nn::Tensor y = obs.gather(idx);
    nn::Tensor z;
    if (m.kind == Approach::two_step) {
      const nn::Tensor shat = m.estimator().predict(y);
      for (std::size_t b = 0; b < shat.n; ++b) out[start + b].states = time_major(shat, b);
      z = m.classifier().predict(shat);
    } else {
      z = m.classifier().predict(y);
    }
    for (std::size_t b = 0; b < z.n; ++b) {
      auto& p = out[start + b];
      p.likelihood = nn::softmax2(z.at(b, 0, 0), z.at(b, 1, 0));
      p.label = p.likelihood[1] > p.likelihood[0] ? 1 : 0;
    }
  }
  return out;
}

inline std::vector<Prediction> predict(const MonitorModel& m, const Dataset& scaled) {
  if (!scaled.scaled) throw ConfigError("predict expects a scaled dataset");
  return predict(m, obs_tensor(scaled));
}

// ---------------------------------------------------------------------------
// Checkpoints: meta.json + one f32 weight array per net.

inline constexpr int kModelFormatVersion = 1;

inline void save(const MonitorModel& m, const std::filesystem::path& dir) {
  m.validate();
  std::filesystem::create_directories(dir);
  io::json files = io::json::object();
  io::json nets = io::json::array();
  for (std::size_t i = 0; i < m.nets.size(); ++i) {
    const std::string name = "weights_" + std::to_string(i) + ".f32";
    io::write_array(dir, name, io::to_f32(m.nets[i].weights()), files);
    nets.push_back({{"spec", nn::to_json(m.nets[i].spec())}, {"file", name}});
  }
  io::json meta = {{"format", "npm-model"},
                   {"format_version", kModelFormatVersion},
                   {"kind", to_string(m.kind)},
                   {"nets", nets},
                   {"metadata", m.metadata},
                   {"files", files}};
  io::write_json(dir / "meta.json", meta);
}

inline MonitorModel load_model(const std::filesystem::path& dir) {
  const io::json meta = io::read_json(dir / "meta.json");
  io::check_format(meta, "npm-model", kModelFormatVersion);
  MonitorModel m;
  try {
    m.kind = approach_from_string(meta.at("kind").get<std::string>());
    m.metadata = meta.at("metadata");
    for (const auto& entry : meta.at("nets")) {
      nn::Network net(nn::netspec_from_json(entry.at("spec")), 0);
      const auto w = io::to_f64(io::read_array<float>(dir, entry.at("file").get<std::string>(), meta.at("files")));
      if (w.size() != net.num_params()) throw IntegrityError("weight count does not match the network spec");
      net.set_weights(w);
      m.nets.push_back(std::move(net));
    }
  } catch (const io::json::exception& e) {
    throw IntegrityError(std::string("malformed model meta: ") + e.what());
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("malformed model meta: ") + e.what());
  } catch (const ShapeError& e) {
    throw IntegrityError(std::string("malformed model meta: ") + e.what());
  }
  m.validate();
  return m;
}

}  // namespace npm
