#ifndef ICNN_NETWORK_HPP
#define ICNN_NETWORK_HPP

// Layered feed-forward patch classifier: valid convolution, non-overlapping
// max-pooling, ReLU, fully-connected and a two-way softmax head, with
// hand-written backpropagation, momentum SGD and a finite-difference checker.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "icnn/common.hpp"
#include "icnn/tensor.hpp"

namespace icnn {

enum class LayerKind { conv, maxpool, relu, fullyconnected, softmax };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 0;

  static LayerSpec conv(std::size_t kh, std::size_t kw, std::size_t out) {
    return {LayerKind::conv, kh, kw, out, 0};
  }
  static LayerSpec maxpool(std::size_t s) { return {LayerKind::maxpool, s, s, 0, s}; }
  static LayerSpec relu() { return {LayerKind::relu, 0, 0, 0, 0}; }
  static LayerSpec fc(std::size_t out) { return {LayerKind::fullyconnected, 0, 0, out, 0}; }
  static LayerSpec softmax() { return {LayerKind::softmax, 0, 0, 2, 0}; }

  bool has_params() const {
    return kind == LayerKind::conv || kind == LayerKind::fullyconnected ||
           kind == LayerKind::softmax;
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  std::size_t input_side = 17;
  std::size_t input_channels = 1;
  std::vector<LayerSpec> layers;
  std::size_t class_count = 2;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct FeatureShape {
  std::size_t c = 0, h = 0, w = 0;
  std::size_t size() const { return c * h * w; }
  friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
};

/// Shapes of the input and of every layer output; validates the spec.
inline std::vector<FeatureShape> feature_shapes(const NetworkSpec& spec) {
  if (spec.class_count != 2) throw ShapeError("class_count must be 2");
  if (spec.input_side == 0 || spec.input_channels == 0)
    throw ShapeError("input side and channels must be >= 1");
  if (spec.layers.empty() || spec.layers.back().kind != LayerKind::softmax)
    throw ShapeError("network must end with a softmax layer");
  std::vector<FeatureShape> shapes{{spec.input_channels, spec.input_side, spec.input_side}};
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    FeatureShape s = shapes.back();
    const std::string where = "layer " + std::to_string(i) + ": ";
    switch (l.kind) {
      case LayerKind::conv:
        if (l.kernel_h == 0 || l.kernel_w == 0 || l.out_channels == 0)
          throw ShapeError(where + "conv needs kernel and out_channels >= 1");
        if (l.kernel_h > s.h || l.kernel_w > s.w)
          throw ShapeError(where + "conv kernel larger than " + std::to_string(s.h) + "x" +
                           std::to_string(s.w) + " input");
        s = {l.out_channels, s.h - l.kernel_h + 1, s.w - l.kernel_w + 1};
        break;
      case LayerKind::maxpool:
        if (l.stride == 0 || l.stride > s.h || l.stride > s.w)
          throw ShapeError(where + "bad pooling stride");
        s = {s.c, s.h / l.stride, s.w / l.stride};
        break;
      case LayerKind::relu:
        break;
      case LayerKind::fullyconnected:
      case LayerKind::softmax:
        if (s.h != 1 || s.w != 1)
          throw ShapeError(where + "spatial extent must be 1x1 before a dense layer, got " +
                           std::to_string(s.h) + "x" + std::to_string(s.w));
        if (l.kind == LayerKind::softmax && i + 1 != spec.layers.size())
          throw ShapeError(where + "softmax must appear exactly once, last");
        if (l.out_channels == 0) throw ShapeError(where + "dense layer needs out_channels");
        s = {l.kind == LayerKind::softmax ? spec.class_count : l.out_channels, 1, 1};
        break;
    }
    shapes.push_back(s);
  }
  return shapes;
}

inline void validate(const NetworkSpec& spec) { (void)feature_shapes(spec); }

/// Text form used by config files, e.g.
/// "conv:4x4x16,relu,maxpool:2,conv:6x6x16,relu,maxpool:2,fc:32,relu,softmax".
inline std::string format_layers(const std::vector<LayerSpec>& layers) {
  std::ostringstream os;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) os << ',';
    const LayerSpec& l = layers[i];
    switch (l.kind) {
      case LayerKind::conv:
        os << "conv:" << l.kernel_h << 'x' << l.kernel_w << 'x' << l.out_channels;
        break;
      case LayerKind::maxpool: os << "maxpool:" << l.stride; break;
      case LayerKind::relu: os << "relu"; break;
      case LayerKind::fullyconnected: os << "fc:" << l.out_channels; break;
      case LayerKind::softmax: os << "softmax"; break;
    }
  }
  return os.str();
}

inline std::vector<LayerSpec> parse_layers(std::string_view text) {
  auto to_size = [&](std::string_view s) -> std::size_t {
    std::size_t v = 0;
    if (s.empty()) throw ConfigError("bad layer list: " + std::string(text));
    for (char c : s) {
      if (c < '0' || c > '9') throw ConfigError("bad layer list: " + std::string(text));
      v = v * 10 + static_cast<std::size_t>(c - '0');
    }
    return v;
  };
  std::vector<LayerSpec> layers;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find(',', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view item = text.substr(pos, end - pos);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    const std::size_t colon = item.find(':');
    const std::string_view name = item.substr(0, colon);
    const std::string_view arg = colon == std::string_view::npos ? "" : item.substr(colon + 1);
    if (name == "conv") {
      const std::size_t x1 = arg.find('x');
      const std::size_t x2 = arg.find('x', x1 + 1);
      if (x1 == std::string_view::npos || x2 == std::string_view::npos)
        throw ConfigError("conv layer needs KHxKWxOUT: " + std::string(item));
      layers.push_back(LayerSpec::conv(to_size(arg.substr(0, x1)),
                                       to_size(arg.substr(x1 + 1, x2 - x1 - 1)),
                                       to_size(arg.substr(x2 + 1))));
    } else if (name == "maxpool") {
      layers.push_back(LayerSpec::maxpool(to_size(arg)));
    } else if (name == "relu") {
      layers.push_back(LayerSpec::relu());
    } else if (name == "fc") {
      layers.push_back(LayerSpec::fc(to_size(arg)));
    } else if (name == "softmax") {
      layers.push_back(LayerSpec::softmax());
    } else {
      throw ConfigError("unknown layer kind '" + std::string(name) + "'");
    }
    pos = end + 1;
  }
  return layers;
}

/// Small default used for tests and desk-scale experiments.
inline NetworkSpec desk_spec() {
  return {17, 1, parse_layers("conv:4x4x16,relu,maxpool:2,conv:6x6x16,relu,maxpool:2,fc:32,relu,softmax"), 2};
}

/// Full-size patch classifier on 65x65 inputs.
inline NetworkSpec base_spec() {
  return {65, 1,
          parse_layers("conv:5x5x48,relu,maxpool:2,conv:5x5x48,relu,maxpool:2,"
                       "conv:5x5x48,relu,maxpool:2,conv:4x4x48,relu,fc:200,relu,softmax"),
          2};
}

struct LayerParams {
  Tensor weights;
  Tensor bias;
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct NetworkParams {
  std::vector<LayerParams> layers;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weights.size() + l.bias.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& l : layers) {
      for (double v : l.weights.values())
        if (!std::isfinite(v)) return false;
      for (double v : l.bias.values())
        if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const NetworkParams&, const NetworkParams&) = default;
};

/// Zero-valued params with the layout implied by spec.
inline NetworkParams zero_params(const NetworkSpec& spec) {
  const auto shapes = feature_shapes(spec);
  NetworkParams p;
  p.layers.resize(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::size_t in_c = shapes[i].c;
    if (l.kind == LayerKind::conv) {
      p.layers[i].weights = Tensor({l.out_channels, in_c, l.kernel_h, l.kernel_w});
      p.layers[i].bias = Tensor({l.out_channels});
    } else if (l.kind == LayerKind::fullyconnected || l.kind == LayerKind::softmax) {
      const std::size_t out = shapes[i + 1].c;
      p.layers[i].weights = Tensor({out, in_c});
      p.layers[i].bias = Tensor({out});
    }
  }
  return p;
}

inline void check_params(const NetworkSpec& spec, const NetworkParams& params) {
  const NetworkParams ref = zero_params(spec);
  if (ref.layers.size() != params.layers.size())
    throw ShapeError("params have " + std::to_string(params.layers.size()) +
                     " layers, spec has " + std::to_string(ref.layers.size()));
  for (std::size_t i = 0; i < ref.layers.size(); ++i) {
    if (!ref.layers[i].weights.same_shape(params.layers[i].weights) ||
        !ref.layers[i].bias.same_shape(params.layers[i].bias))
      throw ShapeError("layer " + std::to_string(i) + " params " +
                       Tensor::shape_string(params.layers[i].weights.shape()) + " expected " +
                       Tensor::shape_string(ref.layers[i].weights.shape()));
  }
}

/// He-normal weights (std sqrt(2 / fan_in)), zero biases.
inline NetworkParams init_params(const NetworkSpec& spec, std::uint64_t seed) {
  NetworkParams p = zero_params(spec);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    Tensor& w = p.layers[i].weights;
    if (w.empty()) continue;
    const std::size_t fan_in = w.size() / w.extent(0);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (double& v : w.values()) v = dist(rng);
  }
  return p;
}

namespace kernels {

// Valid convolution, stride 1. Weights laid out [O][C][KH][KW].
// Each output is bias + sum over (c, ky, kx) in that order; the dense and
// patchwise paths both route through here so their sums agree bit-for-bit.
inline void conv_forward(const double* in, FeatureShape is, const double* w, const double* b,
                         std::size_t out_c, std::size_t kh, std::size_t kw, double* out) {
  const std::size_t oh = is.h - kh + 1, ow = is.w - kw + 1;
  for (std::size_t o = 0; o < out_c; ++o) {
    double* op = out + o * oh * ow;
    std::fill(op, op + oh * ow, b[o]);
    for (std::size_t c = 0; c < is.c; ++c) {
      const double* ip = in + c * is.h * is.w;
      const double* wp = w + (o * is.c + c) * kh * kw;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double wv = wp[ky * kw + kx];
          for (std::size_t y = 0; y < oh; ++y) {
            const double* row = ip + (y + ky) * is.w + kx;
            double* orow = op + y * ow;
            for (std::size_t x = 0; x < ow; ++x) orow[x] += wv * row[x];
          }
        }
      }
    }
  }
}

// din may be null (first layer).
inline void conv_backward(const double* in, FeatureShape is, const double* w, std::size_t out_c,
                          std::size_t kh, std::size_t kw, const double* dout, double* dw,
                          double* db, double* din) {
  const std::size_t oh = is.h - kh + 1, ow = is.w - kw + 1;
  if (din) std::fill(din, din + is.size(), 0.0);
  for (std::size_t o = 0; o < out_c; ++o) {
    const double* gp = dout + o * oh * ow;
    double bsum = 0.0;
    for (std::size_t i = 0; i < oh * ow; ++i) bsum += gp[i];
    db[o] += bsum;
    for (std::size_t c = 0; c < is.c; ++c) {
      const double* ip = in + c * is.h * is.w;
      const double* wp = w + (o * is.c + c) * kh * kw;
      double* dwp = dw + (o * is.c + c) * kh * kw;
      double* dip = din ? din + c * is.h * is.w : nullptr;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double wv = wp[ky * kw + kx];
          double acc = 0.0;
          for (std::size_t y = 0; y < oh; ++y) {
            const double* row = ip + (y + ky) * is.w + kx;
            const double* grow = gp + y * ow;
            for (std::size_t x = 0; x < ow; ++x) acc += grow[x] * row[x];
            if (dip) {
              double* drow = dip + (y + ky) * is.w + kx;
              for (std::size_t x = 0; x < ow; ++x) drow[x] += wv * grow[x];
            }
          }
          dwp[ky * kw + kx] += acc;
        }
      }
    }
  }
}

// Non-overlapping max-pool with window = stride = s over the window grid
// anchored at (0, 0); trailing rows/cols that do not fill a window are
// dropped. Ties go to the row-major earliest element. argmax may be null.
inline void maxpool_forward(const double* in, FeatureShape is, std::size_t s, double* out,
                            std::uint32_t* argmax) {
  const std::size_t oh = is.h / s, ow = is.w / s;
  for (std::size_t c = 0; c < is.c; ++c) {
    const double* ip = in + c * is.h * is.w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = (y * s) * is.w + x * s;
        double m = ip[best];
        for (std::size_t dy = 0; dy < s; ++dy) {
          for (std::size_t dx = 0; dx < s; ++dx) {
            const std::size_t idx = (y * s + dy) * is.w + x * s + dx;
            if (ip[idx] > m) {
              m = ip[idx];
              best = idx;
            }
          }
        }
        const std::size_t o = (c * oh + y) * ow + x;
        out[o] = m;
        if (argmax) argmax[o] = static_cast<std::uint32_t>(c * is.h * is.w + best);
      }
    }
  }
}

inline void relu_inplace(double* v, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) v[i] = v[i] > 0.0 ? v[i] : 0.0;
}

/// Two-way softmax of logits; returns probability of class 1.
inline std::array<double, 2> softmax2(double z0, double z1) {
  const double m = std::max(z0, z1);
  const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
  const double s = e0 + e1;
  return {e0 / s, e1 / s};
}

}  // namespace kernels

/// Per-layer forward cache. outputs[0] is the input patch, outputs[i + 1]
/// the output of layer i.
struct Activations {
  std::vector<Tensor> outputs;
  std::vector<std::vector<std::uint32_t>> pool_argmax;
  std::array<double, 2> logits{};
  std::array<double, 2> probs{};
  const NetworkParams* source = nullptr;
};

struct ForwardResult {
  double prob_membrane = 0.0;
  Activations cache;
};

inline ForwardResult forward(const NetworkSpec& spec, const NetworkParams& params,
                             const Tensor& patch) {
  const auto shapes = feature_shapes(spec);
  const FeatureShape in = shapes.front();
  if (patch.rank() != 3 || patch.extent(0) != in.c || patch.extent(1) != in.h ||
      patch.extent(2) != in.w)
    throw ShapeError("patch shape " + Tensor::shape_string(patch.shape()) + " does not match " +
                     "network input [" + std::to_string(in.c) + "x" + std::to_string(in.h) + "x" +
                     std::to_string(in.w) + "]");
  if (params.layers.size() != spec.layers.size())
    throw ShapeError("params/spec layer count mismatch");

  ForwardResult r;
  Activations& a = r.cache;
  a.source = &params;
  a.outputs.reserve(spec.layers.size() + 1);
  a.outputs.push_back(patch);
  a.pool_argmax.resize(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const FeatureShape is = shapes[i], os = shapes[i + 1];
    const Tensor& x = a.outputs.back();
    Tensor y({os.c, os.h, os.w});
    switch (l.kind) {
      case LayerKind::conv:
        kernels::conv_forward(x.data(), is, params.layers[i].weights.data(),
                              params.layers[i].bias.data(), l.out_channels, l.kernel_h,
                              l.kernel_w, y.data());
        break;
      case LayerKind::maxpool:
        a.pool_argmax[i].resize(os.size());
        kernels::maxpool_forward(x.data(), is, l.stride, y.data(), a.pool_argmax[i].data());
        break;
      case LayerKind::relu:
        y = x;
        kernels::relu_inplace(y.data(), y.size());
        break;
      case LayerKind::fullyconnected:
      case LayerKind::softmax:
        kernels::conv_forward(x.data(), is, params.layers[i].weights.data(),
                              params.layers[i].bias.data(), os.c, 1, 1, y.data());
        break;
    }
    if (l.kind == LayerKind::softmax) {
      a.logits = {y[0], y[1]};
      if (!std::isfinite(y[0]) || !std::isfinite(y[1]))
        throw NumericError("non-finite logits in forward pass");
      a.probs = kernels::softmax2(y[0], y[1]);
      y[0] = a.probs[0];
      y[1] = a.probs[1];
    }
    a.outputs.push_back(std::move(y));
  }
  r.prob_membrane = a.probs[1];
  return r;
}

/// Probability of the membrane class, without keeping the cache.
inline double predict(const NetworkSpec& spec, const NetworkParams& params, const Tensor& patch) {
  return forward(spec, params, patch).prob_membrane;
}

/// Cross-entropy -log p(label) computed from the cached logits.
inline double cross_entropy(const Activations& a, int label) {
  const double m = std::max(a.logits[0], a.logits[1]);
  const double lse = m + std::log(std::exp(a.logits[0] - m) + std::exp(a.logits[1] - m));
  return lse - a.logits[label == 1 ? 1 : 0];
}

struct BackwardResult {
  NetworkParams grads;
  double loss = 0.0;
};

inline BackwardResult backward(const NetworkSpec& spec, const NetworkParams& params,
                               const Activations& cache, int true_label) {
  if (true_label != 0 && true_label != 1) throw Error("label must be 0 or 1");
  if (cache.source != &params || cache.outputs.size() != spec.layers.size() + 1)
    throw Error("backward: activation cache missing or from a different parameter set");
  const auto shapes = feature_shapes(spec);

  BackwardResult r;
  r.grads = zero_params(spec);
  r.loss = cross_entropy(cache, true_label);

  // d loss / d logits = p - onehot.
  Tensor grad({2, 1, 1});
  grad[0] = cache.probs[0] - (true_label == 0 ? 1.0 : 0.0);
  grad[1] = cache.probs[1] - (true_label == 1 ? 1.0 : 0.0);

  for (std::size_t li = spec.layers.size(); li-- > 0;) {
    const LayerSpec& l = spec.layers[li];
    const FeatureShape is = shapes[li];
    const Tensor& x = cache.outputs[li];
    const bool need_input_grad = li > 0;
    Tensor dx;
    if (need_input_grad) dx = Tensor({is.c, is.h, is.w});
    switch (l.kind) {
      case LayerKind::conv:
        kernels::conv_backward(x.data(), is, params.layers[li].weights.data(), l.out_channels,
                               l.kernel_h, l.kernel_w, grad.data(),
                               r.grads.layers[li].weights.data(), r.grads.layers[li].bias.data(),
                               need_input_grad ? dx.data() : nullptr);
        break;
      case LayerKind::fullyconnected:
      case LayerKind::softmax:
        kernels::conv_backward(x.data(), is, params.layers[li].weights.data(), shapes[li + 1].c,
                               1, 1, grad.data(), r.grads.layers[li].weights.data(),
                               r.grads.layers[li].bias.data(),
                               need_input_grad ? dx.data() : nullptr);
        break;
      case LayerKind::maxpool:
        if (need_input_grad) {
          const auto& am = cache.pool_argmax[li];
          for (std::size_t i = 0; i < am.size(); ++i) dx[am[i]] += grad[i];
        }
        break;
      case LayerKind::relu:
        if (need_input_grad)
          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = x[i] > 0.0 ? grad[i] : 0.0;
        break;
    }
    if (need_input_grad) grad = std::move(dx);
  }
  return r;
}

/// In-place accumulate: acc += g.
inline void accumulate(NetworkParams& acc, const NetworkParams& g) {
  for (std::size_t i = 0; i < acc.layers.size(); ++i) {
    auto& aw = acc.layers[i].weights;
    auto& ab = acc.layers[i].bias;
    for (std::size_t k = 0; k < aw.size(); ++k) aw[k] += g.layers[i].weights[k];
    for (std::size_t k = 0; k < ab.size(); ++k) ab[k] += g.layers[i].bias[k];
  }
}

inline void scale(NetworkParams& p, double s) {
  for (auto& l : p.layers) {
    for (double& v : l.weights.values()) v *= s;
    for (double& v : l.bias.values()) v *= s;
  }
}

/// Momentum SGD: v' = momentum * v - lr * g; w' = w + v'. velocity must be
/// zero_params-shaped (initially zero). Throws NumericError and leaves params
/// untouched if any updated value would be non-finite.
inline void sgd_step(NetworkParams& params, const NetworkParams& grads, double lr,
                     double momentum, NetworkParams& velocity) {
  if (!(lr > 0.0) || !(momentum >= 0.0 && momentum < 1.0))
    throw Error("sgd_step: need lr > 0 and momentum in [0, 1)");
  if (params.layers.size() != grads.layers.size() ||
      params.layers.size() != velocity.layers.size())
    throw ShapeError("sgd_step: params/grads/velocity layer count mismatch");
  NetworkParams next_v = velocity;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    auto update = [&](const Tensor& w, const Tensor& g, Tensor& v) {
      if (!w.same_shape(g) || !w.same_shape(v)) throw ShapeError("sgd_step: shape mismatch");
      for (std::size_t k = 0; k < w.size(); ++k) {
        v[k] = momentum * v[k] - lr * g[k];
        if (!std::isfinite(v[k]) || !std::isfinite(w[k] + v[k]))
          throw NumericError("sgd_step: non-finite update in layer " + std::to_string(i));
      }
    };
    update(params.layers[i].weights, grads.layers[i].weights, next_v.layers[i].weights);
    update(params.layers[i].bias, grads.layers[i].bias, next_v.layers[i].bias);
  }
  velocity = std::move(next_v);
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    auto& w = params.layers[i].weights;
    auto& b = params.layers[i].bias;
    for (std::size_t k = 0; k < w.size(); ++k) w[k] += velocity.layers[i].weights[k];
    for (std::size_t k = 0; k < b.size(); ++k) b[k] += velocity.layers[i].bias[k];
  }
}

using BackwardFn =
    std::function<BackwardResult(const NetworkSpec&, const NetworkParams&, const Activations&, int)>;

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // perturbation crossed a ReLU or pooling kink
};

namespace detail {
// Which side of every ReLU and which element won every pool window.
inline std::vector<std::uint32_t> kink_pattern(const NetworkSpec& spec, const Activations& a) {
  std::vector<std::uint32_t> pat;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind == LayerKind::relu) {
      for (double v : a.outputs[i].values()) pat.push_back(v > 0.0 ? 1u : 0u);
    } else if (spec.layers[i].kind == LayerKind::maxpool) {
      pat.insert(pat.end(), a.pool_argmax[i].begin(), a.pool_argmax[i].end());
    }
  }
  return pat;
}
}  // namespace detail

/// Compares analytic gradients with central differences of step h for every
/// parameter, skipping parameters whose perturbation flips a ReLU or pooling
/// decision.
inline GradCheckReport grad_check(const NetworkSpec& spec, const NetworkParams& params,
                                  const Tensor& patch, int label, double h,
                                  const BackwardFn& backward_fn = backward) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw Error("grad_check: h must be in [1e-7, 1e-3]");
  const ForwardResult base = forward(spec, params, patch);
  const NetworkParams analytic = backward_fn(spec, params, base.cache, label).grads;
  const auto base_pattern = detail::kink_pattern(spec, base.cache);

  GradCheckReport rep;
  NetworkParams probe = params;
  auto check_tensor = [&](Tensor& w, const Tensor& g) {
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double orig = w[k];
      w[k] = orig + h;
      const ForwardResult plus = forward(spec, probe, patch);
      w[k] = orig - h;
      const ForwardResult minus = forward(spec, probe, patch);
      w[k] = orig;
      if (detail::kink_pattern(spec, plus.cache) != base_pattern ||
          detail::kink_pattern(spec, minus.cache) != base_pattern) {
        ++rep.skipped;
        continue;
      }
      const double numeric =
          (cross_entropy(plus.cache, label) - cross_entropy(minus.cache, label)) / (2.0 * h);
      const double denom = std::max({std::abs(g[k]), std::abs(numeric), 1e-12});
      rep.max_relative_error = std::max(rep.max_relative_error, std::abs(g[k] - numeric) / denom);
      ++rep.checked;
    }
  };
  for (std::size_t i = 0; i < probe.layers.size(); ++i) {
    check_tensor(probe.layers[i].weights, analytic.layers[i].weights);
    check_tensor(probe.layers[i].bias, analytic.layers[i].bias);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Parameter files: "MRNN1\n", "layers=<n>\n", then per layer an ASCII line
// "w=<d0>,<d1>,... b=<n>\n" (w=- for parameter-free layers) followed by the
// weights and then the biases as little-endian IEEE-754 doubles.

namespace detail {
inline void put_le64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(buf, 8);
}
inline double get_le64(std::istream& is) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), 8)) throw FormatError("truncated parameter payload");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}
}  // namespace detail

inline void write_params(std::ostream& os, const NetworkParams& p) {
  os << "MRNN1\n" << "layers=" << p.layers.size() << '\n';
  for (const auto& l : p.layers) {
    os << "w=";
    if (l.weights.empty()) {
      os << '-';
    } else {
      for (std::size_t i = 0; i < l.weights.rank(); ++i) os << (i ? "," : "") << l.weights.extent(i);
    }
    os << " b=" << l.bias.size() << '\n';
    for (double v : l.weights.values()) detail::put_le64(os, v);
    for (double v : l.bias.values()) detail::put_le64(os, v);
  }
}

inline NetworkParams read_params(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "MRNN1") throw FormatError("bad parameter file magic");
  if (!std::getline(is, line) || line.rfind("layers=", 0) != 0)
    throw FormatError("missing layers= header");
  const std::size_t n = std::stoul(line.substr(7));
  NetworkParams p;
  p.layers.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(is, line)) throw FormatError("truncated parameter file");
    std::istringstream ls(line);
    std::string wtok, btok;
    ls >> wtok >> btok;
    if (wtok.rfind("w=", 0) != 0 || btok.rfind("b=", 0) != 0)
      throw FormatError("bad layer shape line: " + line);
    std::vector<std::size_t> shape;
    const std::string dims = wtok.substr(2);
    if (dims != "-") {
      std::istringstream ds(dims);
      std::string d;
      while (std::getline(ds, d, ',')) shape.push_back(std::stoul(d));
    }
    const std::size_t nb = std::stoul(btok.substr(2));
    if (!shape.empty()) {
      std::vector<double> w(Tensor::element_count(shape));
      for (double& v : w) v = detail::get_le64(is);
      p.layers[i].weights = Tensor(shape, std::move(w));
    }
    if (nb > 0) {
      std::vector<double> b(nb);
      for (double& v : b) v = detail::get_le64(is);
      p.layers[i].bias = Tensor({nb}, std::move(b));
    }
  }
  return p;
}

inline void save_params(const std::string& path, const NetworkParams& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  write_params(os, p);
  if (!os) throw Error("write failed: " + path);
}

inline NetworkParams load_params(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_params(is);
}

}  // namespace icnn

#endif  // ICNN_NETWORK_HPP
