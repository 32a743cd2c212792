#pragma once

// Small reverse-mode network engine: 1-D convolutions, dense layers,
// activations, dropout, softmax cross-entropy / MSE losses and Adam.
// Tensors are [batch, channels, length], row-major. Everything is double
// precision and single-threaded, so a fixed seed gives bitwise-identical runs.

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "npm/common.hpp"

namespace npm::nn {

struct Tensor {
  std::size_t n = 0, c = 0, l = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t n_, std::size_t c_, std::size_t l_, double fill = 0.0)
      : n(n_), c(c_), l(l_), data(n_ * c_ * l_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t row() const { return c * l; }
  double& at(std::size_t b, std::size_t ch, std::size_t t) { return data[(b * c + ch) * l + t]; }
  double at(std::size_t b, std::size_t ch, std::size_t t) const { return data[(b * c + ch) * l + t]; }
  double* ptr(std::size_t b, std::size_t ch) { return data.data() + (b * c + ch) * l; }
  const double* ptr(std::size_t b, std::size_t ch) const { return data.data() + (b * c + ch) * l; }
  std::span<double> sample(std::size_t b) { return {data.data() + b * row(), row()}; }
  std::span<const double> sample(std::size_t b) const { return {data.data() + b * row(), row()}; }

  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && l == o.l; }

  /// Rows `idx` of this tensor, in order.
  Tensor gather(std::span<const std::size_t> idx) const {
    Tensor out(idx.size(), c, l);
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(sample(idx[i]).begin(), row(), out.sample(i).begin());
    return out;
  }
};

enum class Activation { identity, relu, leaky_relu, tanh };

inline constexpr double kLeakySlope = 0.2;

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "leaky_relu") return Activation::leaky_relu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

struct LayerSpec {
  enum class Kind { conv1d, dense, dropout };
  Kind kind = Kind::dense;
  int units = 0;   // conv1d: filters; dense: width
  int kernel = 0;  // conv1d only
  Activation activation = Activation::identity;
  double rate = 0.0;  // dropout only

  static LayerSpec conv(int filters, int kernel, Activation a) { return {Kind::conv1d, filters, kernel, a, 0.0}; }
  static LayerSpec dense(int width, Activation a) { return {Kind::dense, width, 0, a, 0.0}; }
  static LayerSpec dropout(double rate) { return {Kind::dropout, 0, 0, Activation::identity, rate}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

enum class Head { classifier, regressor };

struct NetSpec {
  int in_channels = 1;
  int in_length = 1;
  std::vector<LayerSpec> layers;
  Head head = Head::classifier;

  friend bool operator==(const NetSpec&, const NetSpec&) = default;

  /// Output shape, after checking that the layers chain and the head matches.
  std::pair<int, int> output_shape() const {
    if (in_channels < 1 || in_length < 1) throw ShapeError("netspec: empty input shape");
    if (layers.empty()) throw ShapeError("netspec: no layers");
    int c = in_channels, l = in_length;
    for (const auto& ls : layers) {
      switch (ls.kind) {
        case LayerSpec::Kind::conv1d:
          if (ls.units < 1 || ls.kernel < 1) throw ShapeError("netspec: bad conv1d");
          c = ls.units;
          break;
        case LayerSpec::Kind::dense:
          if (ls.units < 1) throw ShapeError("netspec: bad dense width");
          c = ls.units;
          l = 1;
          break;
        case LayerSpec::Kind::dropout:
          if (!(ls.rate >= 0.0 && ls.rate < 1.0)) throw ShapeError("netspec: dropout rate outside [0, 1)");
          break;
      }
    }
    const auto& last = layers.back();
    if (head == Head::classifier &&
        (last.kind != LayerSpec::Kind::dense || last.units != 2 ||
         !(last.activation == Activation::relu)))
      throw ShapeError("netspec: classifier must end in a 2-unit dense layer with nonnegative activation");
    if (head == Head::regressor && (last.kind != LayerSpec::Kind::conv1d || last.activation != Activation::tanh))
      throw ShapeError("netspec: regressor must end in a tanh conv1d layer");
    return {c, l};
  }
};

inline nlohmann::json to_json(const NetSpec& s) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : s.layers) {
    switch (l.kind) {
      case LayerSpec::Kind::conv1d:
        layers.push_back({{"type", "conv1d"}, {"filters", l.units}, {"kernel", l.kernel},
                          {"activation", to_string(l.activation)}});
        break;
      case LayerSpec::Kind::dense:
        layers.push_back({{"type", "dense"}, {"width", l.units}, {"activation", to_string(l.activation)}});
        break;
      case LayerSpec::Kind::dropout:
        layers.push_back({{"type", "dropout"}, {"rate", l.rate}});
        break;
    }
  }
  return {{"in_channels", s.in_channels},
          {"in_length", s.in_length},
          {"head", s.head == Head::classifier ? "classifier" : "regressor"},
          {"layers", layers}};
}

inline NetSpec netspec_from_json(const nlohmann::json& j) {
  NetSpec s;
  s.in_channels = j.at("in_channels").get<int>();
  s.in_length = j.at("in_length").get<int>();
  const auto head = j.at("head").get<std::string>();
  if (head != "classifier" && head != "regressor") throw ConfigError("unknown head " + head);
  s.head = head == "classifier" ? Head::classifier : Head::regressor;
  for (const auto& l : j.at("layers")) {
    const auto type = l.at("type").get<std::string>();
    if (type == "conv1d")
      s.layers.push_back(LayerSpec::conv(l.at("filters"), l.at("kernel"),
                                         activation_from_string(l.at("activation"))));
    else if (type == "dense")
      s.layers.push_back(LayerSpec::dense(l.at("width"), activation_from_string(l.at("activation"))));
    else if (type == "dropout")
      s.layers.push_back(LayerSpec::dropout(l.at("rate")));
    else
      throw ConfigError("unknown layer type " + type);
  }
  s.output_shape();
  return s;
}

// ---------------------------------------------------------------------------
// Layers

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool training, Rng& rng) = 0;
  /// Gradient w.r.t. the last forward input; accumulates parameter gradients.
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual std::span<double> params() { return {}; }
  virtual std::span<double> grads() { return {}; }
  virtual std::unique_ptr<Layer> clone() const = 0;
};

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::leaky_relu: return x > 0.0 ? x : kLeakySlope * x;
    case Activation::tanh: return std::tanh(x);
  }
  return x;
}

// Derivative expressed through the pre-activation x and output y.
inline double activate_grad(Activation a, double x, double y) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::leaky_relu: return x > 0.0 ? 1.0 : kLeakySlope;
    case Activation::tanh: return 1.0 - y * y;
  }
  return 1.0;
}

/// Shared parts of parametric layers: params = [weights..., bias...], fused activation.
class ParamLayer : public Layer {
 public:
  std::span<double> params() override { return params_; }
  std::span<double> grads() override { return grads_; }

 protected:
  ParamLayer(std::size_t n_weights, std::size_t n_bias, Activation a)
      : n_weights_(n_weights), params_(n_weights + n_bias, 0.0), grads_(n_weights + n_bias, 0.0), act_(a) {}

  double* w() { return params_.data(); }
  double* b() { return params_.data() + n_weights_; }
  double* gw() { return grads_.data(); }
  double* gb() { return grads_.data() + n_weights_; }

  Tensor activate_cached(Tensor pre) {
    pre_ = pre;
    for (double& v : pre.data) v = activate(act_, v);
    out_ = pre;
    return pre;
  }
  Tensor grad_through_activation(const Tensor& grad_out) const {
    if (!grad_out.same_shape(out_)) throw ShapeError("backward: gradient shape mismatch");
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] *= activate_grad(act_, pre_.data[i], out_.data[i]);
    return g;
  }

  std::size_t n_weights_;
  std::vector<double> params_, grads_;
  Activation act_;
  Tensor in_, pre_, out_;
};

/// Stride-1 convolution with "same" zero padding: left pad (k-1)/2.
class Conv1d final : public ParamLayer {
 public:
  Conv1d(int in_c, int out_c, int kernel, Activation a)
      : ParamLayer(static_cast<std::size_t>(out_c * in_c * kernel), static_cast<std::size_t>(out_c), a),
        in_c_(static_cast<std::size_t>(in_c)), out_c_(static_cast<std::size_t>(out_c)),
        k_(static_cast<std::size_t>(kernel)) {}

  Tensor forward(const Tensor& x, bool, Rng&) override {
    if (x.c != in_c_) throw ShapeError("conv1d: expected " + std::to_string(in_c_) + " channels, got " + std::to_string(x.c));
    in_ = x;
    const std::size_t L = x.l;
    const long pad = static_cast<long>((k_ - 1) / 2);
    Tensor y(x.n, out_c_, L);
    for (std::size_t bi = 0; bi < x.n; ++bi)
      for (std::size_t o = 0; o < out_c_; ++o) {
        double* yrow = y.ptr(bi, o);
        for (std::size_t t = 0; t < L; ++t) yrow[t] = b()[o];
        for (std::size_t i = 0; i < in_c_; ++i) {
          const double* xrow = x.ptr(bi, i);
          const double* wk = w() + (o * in_c_ + i) * k_;
          for (std::size_t j = 0; j < k_; ++j) {
            const long shift = static_cast<long>(j) - pad;
            const std::size_t t0 = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
            const std::size_t t1 = shift > 0 ? (L > static_cast<std::size_t>(shift) ? L - static_cast<std::size_t>(shift) : 0) : L;
            for (std::size_t t = t0; t < t1; ++t) yrow[t] += wk[j] * xrow[static_cast<long>(t) + shift];
          }
        }
      }
    return activate_cached(std::move(y));
  }

  Tensor backward(const Tensor& grad_out) override {
    const Tensor g = grad_through_activation(grad_out);
    const std::size_t L = in_.l;
    const long pad = static_cast<long>((k_ - 1) / 2);
    Tensor dx(in_.n, in_c_, L);
    for (std::size_t bi = 0; bi < in_.n; ++bi)
      for (std::size_t o = 0; o < out_c_; ++o) {
        const double* grow = g.ptr(bi, o);
        for (std::size_t t = 0; t < L; ++t) gb()[o] += grow[t];
        for (std::size_t i = 0; i < in_c_; ++i) {
          const double* xrow = in_.ptr(bi, i);
          double* dxrow = dx.ptr(bi, i);
          const double* wk = w() + (o * in_c_ + i) * k_;
          double* gwk = gw() + (o * in_c_ + i) * k_;
          for (std::size_t j = 0; j < k_; ++j) {
            const long shift = static_cast<long>(j) - pad;
            const std::size_t t0 = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
            const std::size_t t1 = shift > 0 ? (L > static_cast<std::size_t>(shift) ? L - static_cast<std::size_t>(shift) : 0) : L;
            double acc = 0.0;
            for (std::size_t t = t0; t < t1; ++t) {
              const std::size_t src = static_cast<std::size_t>(static_cast<long>(t) + shift);
              acc += grow[t] * xrow[src];
              dxrow[src] += grow[t] * wk[j];
            }
            gwk[j] += acc;
          }
        }
      }
    return dx;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv1d>(*this); }

 private:
  std::size_t in_c_, out_c_, k_;
};

/// Fully connected layer over the flattened (channels x length) input; output is [n, width, 1].
class Dense final : public ParamLayer {
 public:
  Dense(int in, int out, Activation a)
      : ParamLayer(static_cast<std::size_t>(in * out), static_cast<std::size_t>(out), a),
        in_(static_cast<std::size_t>(in)), out_n_(static_cast<std::size_t>(out)) {}

  Tensor forward(const Tensor& x, bool, Rng&) override {
    if (x.row() != in_) throw ShapeError("dense: expected " + std::to_string(in_) + " features, got " + std::to_string(x.row()));
    ParamLayer::in_ = x;
    Tensor y(x.n, out_n_, 1);
    for (std::size_t bi = 0; bi < x.n; ++bi) {
      const auto xs = x.sample(bi);
      for (std::size_t o = 0; o < out_n_; ++o) {
        const double* wr = w() + o * in_;
        double acc = b()[o];
        for (std::size_t i = 0; i < in_; ++i) acc += wr[i] * xs[i];
        y.at(bi, o, 0) = acc;
      }
    }
    return activate_cached(std::move(y));
  }

  Tensor backward(const Tensor& grad_out) override {
    const Tensor g = grad_through_activation(grad_out);
    const Tensor& x = ParamLayer::in_;
    Tensor dx(x.n, x.c, x.l);
    for (std::size_t bi = 0; bi < x.n; ++bi) {
      const auto xs = x.sample(bi);
      auto dxs = dx.sample(bi);
      for (std::size_t o = 0; o < out_n_; ++o) {
        const double go = g.at(bi, o, 0);
        if (go == 0.0) continue;
        gb()[o] += go;
        const double* wr = w() + o * in_;
        double* gwr = gw() + o * in_;
        for (std::size_t i = 0; i < in_; ++i) {
          gwr[i] += go * xs[i];
          dxs[i] += go * wr[i];
        }
      }
    }
    return dx;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }

 private:
  std::size_t in_, out_n_;
};

/// Inverted dropout; the identity in eval mode.
class Dropout final : public Layer {
 public:
  explicit Dropout(double rate) : rate_(rate) {}

  Tensor forward(const Tensor& x, bool training, Rng& rng) override {
    if (!training || rate_ == 0.0) {
      mask_.clear();
      return x;
    }
    std::bernoulli_distribution keep(1.0 - rate_);
    const double scale = 1.0 / (1.0 - rate_);
    mask_.resize(x.size());
    Tensor y = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      mask_[i] = keep(rng) ? scale : 0.0;
      y.data[i] *= mask_[i];
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out) override {
    if (mask_.empty()) return grad_out;
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] *= mask_[i];
    return g;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dropout>(*this); }

 private:
  double rate_;
  std::vector<double> mask_;
};

// ---------------------------------------------------------------------------
// Network

class Network {
 public:
  Network() = default;

  /// He-uniform weights, zero biases.
  Network(NetSpec spec, std::uint64_t init_seed) : spec_(std::move(spec)) {
    build();
    Rng rng = substream(init_seed, 0, 0x1417u);
    int c = spec_.in_channels, l = spec_.in_length;
    std::size_t li = 0;
    for (const auto& ls : spec_.layers) {
      auto& layer = layers_[li++];
      if (ls.kind == LayerSpec::Kind::dropout) continue;
      const int fan_in = ls.kind == LayerSpec::Kind::conv1d ? c * ls.kernel : c * l;
      const double bound = std::sqrt(6.0 / fan_in);
      std::uniform_real_distribution<double> u(-bound, bound);
      auto p = layer->params();
      const std::size_t n_bias = static_cast<std::size_t>(ls.units);
      for (std::size_t i = 0; i + n_bias < p.size(); ++i) p[i] = u(rng);
      if (ls.kind == LayerSpec::Kind::conv1d) c = ls.units;
      else {
        c = ls.units;
        l = 1;
      }
    }
  }

  Network(const Network& o) : spec_(o.spec_) {
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
  }
  Network& operator=(const Network& o) {
    if (this != &o) {
      Network tmp(o);
      *this = std::move(tmp);
    }
    return *this;
  }
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const NetSpec& spec() const { return spec_; }

  Tensor forward(const Tensor& x, bool training, Rng& rng) {
    if (x.c != static_cast<std::size_t>(spec_.in_channels) || x.l != static_cast<std::size_t>(spec_.in_length))
      throw ShapeError("network: input is " + std::to_string(x.c) + "x" + std::to_string(x.l) + ", expected " +
                       std::to_string(spec_.in_channels) + "x" + std::to_string(spec_.in_length));
    Tensor h = x;
    for (auto& l : layers_) h = l->forward(h, training, rng);
    return h;
  }

  /// Eval-mode forward (dropout off, no randomness consumed).
  Tensor predict(const Tensor& x) const {
    Rng unused(0);
    Network& self = const_cast<Network&>(*this);  // forward caches activations only
    return self.forward(x, false, unused);
  }

  Tensor backward(const Tensor& grad_out) {
    Tensor g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  void zero_grad() {
    for (auto& l : layers_) std::fill(l->grads().begin(), l->grads().end(), 0.0);
  }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l->params().size();
    return n;
  }

  std::vector<double> weights() const { return collect(&Layer::params); }
  std::vector<double> gradient() const { return collect(&Layer::grads); }

  void set_weights(std::span<const double> w) {
    if (w.size() != num_params()) throw ShapeError("set_weights: size mismatch");
    std::size_t pos = 0;
    for (auto& l : layers_) {
      auto p = l->params();
      std::copy_n(w.begin() + static_cast<std::ptrdiff_t>(pos), p.size(), p.begin());
      pos += p.size();
    }
  }

  template <typename F>
  void for_each_param(F&& f) {
    for (auto& l : layers_) f(l->params(), l->grads());
  }

  bool finite() const { return all_finite(weights()); }

  /// Rounds every weight to float precision, the checkpoint storage precision.
  void round_to_float() {
    for (auto& l : layers_)
      for (double& v : l->params()) v = to_float_precision(v);
  }

 private:
  void build() {
    spec_.output_shape();
    layers_.clear();
    int c = spec_.in_channels, l = spec_.in_length;
    for (const auto& ls : spec_.layers) {
      switch (ls.kind) {
        case LayerSpec::Kind::conv1d:
          layers_.push_back(std::make_unique<Conv1d>(c, ls.units, ls.kernel, ls.activation));
          c = ls.units;
          break;
        case LayerSpec::Kind::dense:
          layers_.push_back(std::make_unique<Dense>(c * l, ls.units, ls.activation));
          c = ls.units;
          l = 1;
          break;
        case LayerSpec::Kind::dropout:
          layers_.push_back(std::make_unique<Dropout>(ls.rate));
          break;
      }
    }
  }

  std::vector<double> collect(std::span<double> (Layer::*get)()) const {
    std::vector<double> out;
    out.reserve(num_params());
    for (const auto& l : layers_) {
      auto s = ((*l).*get)();
      out.insert(out.end(), s.begin(), s.end());
    }
    return out;
  }

  NetSpec spec_;
  std::vector<std::unique_ptr<Layer>> layers_;
};

// ---------------------------------------------------------------------------
// Losses. Each returns the batch-mean loss and writes dLoss/dOutput.

/// Class likelihoods: softmax over the two head outputs.
inline std::array<double, 2> softmax2(double z0, double z1) {
  const double m = std::max(z0, z1);
  const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
  return {e0 / (e0 + e1), e1 / (e0 + e1)};
}

inline double cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor& grad) {
  if (logits.c != 2 || logits.l != 1 || labels.size() != logits.n) throw ShapeError("cross_entropy: shape mismatch");
  grad = Tensor(logits.n, 2, 1);
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(logits.n);
  for (std::size_t b = 0; b < logits.n; ++b) {
    const auto p = softmax2(logits.at(b, 0, 0), logits.at(b, 1, 0));
    const int y = labels[b];
    loss -= std::log(std::max(p[static_cast<std::size_t>(y)], 1e-300));
    grad.at(b, 0, 0) = (p[0] - (y == 0 ? 1.0 : 0.0)) * inv_n;
    grad.at(b, 1, 0) = (p[1] - (y == 1 ? 1.0 : 0.0)) * inv_n;
  }
  return loss * inv_n;
}

inline double mse(const Tensor& pred, const Tensor& target, Tensor& grad) {
  if (!pred.same_shape(target)) throw ShapeError("mse: shape mismatch");
  grad = Tensor(pred.n, pred.c, pred.l);
  double loss = 0.0;
  const double inv = 1.0 / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.data[i] - target.data[i];
    loss += d * d;
    grad.data[i] = 2.0 * d * inv;
  }
  return loss * inv;
}

// ---------------------------------------------------------------------------
// Adam (beta1 0.9, beta2 0.999, eps 1e-8 unless configured).

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const Network& net, AdamConfig cfg) : cfg_(cfg), m_(net.num_params(), 0.0), v_(net.num_params(), 0.0) {}

  void step(Network& net) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t k = 0;
    net.for_each_param([&](std::span<double> p, std::span<double> g) {
      for (std::size_t i = 0; i < p.size(); ++i, ++k) {
        m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * g[i];
        v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * g[i] * g[i];
        p[i] -= cfg_.lr * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + cfg_.eps);
      }
    });
  }

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

}  // namespace npm::nn
