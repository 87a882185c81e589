// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#ifndef FDDA_NETWORK_HPP
#define FDDA_NETWORK_HPP

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fdda/ops.hpp"
#include "fdda/quantizer.hpp"
#include "fdda/tensor.hpp"

namespace fdda {

enum class LayerKind { Dense, Conv2d, BatchNorm, Relu, Tanh, AvgPool, Flatten, Reshape, Upsample };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Relu: return "relu";
    case LayerKind::Tanh: return "tanh";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Reshape: return "reshape";
    case LayerKind::Upsample: return "upsample";
  }
  return "?";
}

inline LayerKind layer_kind_from_name(const std::string& s) {
  for (auto k : {LayerKind::Dense, LayerKind::Conv2d, LayerKind::BatchNorm, LayerKind::Relu,
                 LayerKind::Tanh, LayerKind::AvgPool, LayerKind::Flatten, LayerKind::Reshape,
                 LayerKind::Upsample})
    if (s == layer_kind_name(k)) return k;
  throw Error("unknown layer kind '" + s + "'");
}

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::size_t in = 0;      // dense features / conv channels / bn channels
  std::size_t out = 0;
  std::size_t kernel = 0;  // conv kernel, pooling window or upsample factor
  std::size_t stride = 1;
  std::size_t pad = 0;
  Shape target;            // reshape target, batch dimension excluded

  static LayerSpec make(LayerKind kind, std::size_t in = 0, std::size_t out = 0, std::size_t kernel = 0,
                        std::size_t stride = 1, std::size_t pad = 0) {
    LayerSpec s;
    s.kind = kind;
    s.in = in;
    s.out = out;
    s.kernel = kernel;
    s.stride = stride;
    s.pad = pad;
    return s;
  }
  static LayerSpec dense(std::size_t in, std::size_t out) { return make(LayerKind::Dense, in, out); }
  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride = 1,
                        std::size_t pad = 0) {
    return make(LayerKind::Conv2d, in, out, k, stride, pad);
  }
  static LayerSpec batchnorm(std::size_t c) { return make(LayerKind::BatchNorm, c, c); }
  static LayerSpec relu() { return make(LayerKind::Relu); }
  static LayerSpec tanh() { return make(LayerKind::Tanh); }
  static LayerSpec avgpool(std::size_t k) { return make(LayerKind::AvgPool, 0, 0, k); }
  static LayerSpec flatten() { return make(LayerKind::Flatten); }
  static LayerSpec reshape(Shape target) {
    LayerSpec s = make(LayerKind::Reshape);
    s.target = std::move(target);
    return s;
  }
  static LayerSpec upsample(std::size_t f) { return make(LayerKind::Upsample, 0, 0, f); }

  bool is_weighted() const { return kind == LayerKind::Dense || kind == LayerKind::Conv2d; }
  bool is_activation() const { return kind == LayerKind::Relu || kind == LayerKind::Tanh; }

  bool operator==(const LayerSpec&) const = default;
};

template <typename T>
struct Layer {
  LayerSpec spec;
  std::vector<BasicTensor<T>> params;  // dense: {w, b}; conv: {w}; batchnorm: {gamma, beta}
  BasicTensor<T> running_mean;         // batchnorm only
  BasicTensor<T> running_var;
  int weight_bits = 0;                 // 0 keeps the weights in float
  std::optional<QuantParams> act_quant;  // applied to this layer's output
};

struct ForwardOptions {
  BnMode bn_mode = BnMode::Eval;
  bool update_running = false;
  double momentum = 0.1;
  bool capture_bn_inputs = false;
  bool capture_activations = false;
  bool quantize = true;  // apply weight/activation quantizers when configured
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> output;
  std::vector<BasicTensor<T>> bn_inputs;  // one per batchnorm layer, in order
  /// Values at activation-quantization sites before quantization: the
  /// network input first, then the output of every activation layer.
  std::vector<BasicTensor<T>> activations;
};

/// Sequential layer graph. Copies are deep.
template <typename T>
class Network {
 public:
  Network() = default;

  /// `input_shape` excludes the batch dimension.
  Network(Shape input_shape, const std::vector<LayerSpec>& specs) : input_shape_(std::move(input_shape)) {
    Shape cur = input_shape_;
    for (const auto& spec : specs) {
      Layer<T> layer;
      layer.spec = spec;
      cur = infer_shape(spec, cur);
      switch (spec.kind) {
        case LayerKind::Dense:
          layer.params = {BasicTensor<T>(Shape{spec.out, spec.in}), BasicTensor<T>(Shape{spec.out})};
          break;
        case LayerKind::Conv2d:
          layer.params = {BasicTensor<T>(Shape{spec.out, spec.in, spec.kernel, spec.kernel})};
          break;
        case LayerKind::BatchNorm:
          layer.params = {BasicTensor<T>(Shape{spec.in}, T(1)), BasicTensor<T>(Shape{spec.in})};
          layer.running_mean = BasicTensor<T>(Shape{spec.in});
          layer.running_var = BasicTensor<T>(Shape{spec.in}, T(1));
          break;
        default:
          break;
      }
      for (auto& p : layer.params) p.set_requires_grad(true);
      layers_.push_back(std::move(layer));
    }
    output_shape_ = cur;
  }

  Network(const Network& other) { *this = other; }
  Network& operator=(const Network& other) {
    if (this == &other) return *this;
    input_shape_ = other.input_shape_;
    output_shape_ = other.output_shape_;
    input_quant_ = other.input_quant_;
    layers_.clear();
    for (const auto& l : other.layers_) {
      Layer<T> c = l;
      for (auto& p : c.params) p = p.clone();
      c.running_mean = l.running_mean.clone();
      c.running_var = l.running_var.clone();
      layers_.push_back(std::move(c));
    }
    return *this;
  }
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  /// He-normal weights, zero biases, unit BN scale and running variance.
  template <typename Rng>
  void init(Rng& rng) {
    for (auto& l : layers_) {
      if (!l.spec.is_weighted()) continue;
      auto& w = l.params[0];
      const double fan_in = static_cast<double>(w.size() / w.dim(0));
      std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / fan_in));
      for (auto& v : w.vec()) v = static_cast<T>(nd(rng));
    }
  }

  ForwardResult<T> forward(const BasicTensor<T>& x, const ForwardOptions& opt = {}) {
    check_input(x);
    ForwardResult<T> res;
    BasicTensor<T> h = x;
    if (opt.capture_activations) res.activations.push_back(h);
    if (opt.quantize && input_quant_) h = fake_quantize_ste(h, *input_quant_);
    for (auto& l : layers_) {
      const auto& s = l.spec;
      switch (s.kind) {
        case LayerKind::Dense:
          h = dense(h, weight_of(l, opt), l.params[1]);
          break;
        case LayerKind::Conv2d:
          h = conv2d(h, weight_of(l, opt), s.stride, s.pad);
          break;
        case LayerKind::BatchNorm: {
          if (opt.capture_bn_inputs) res.bn_inputs.push_back(h);
          const bool upd = opt.bn_mode == BnMode::Train && opt.update_running;
          h = batchnorm_forward(h, l.params[0], l.params[1], opt.bn_mode,
                                upd || opt.bn_mode == BnMode::Eval ? &l.running_mean : nullptr,
                                upd || opt.bn_mode == BnMode::Eval ? &l.running_var : nullptr,
                                opt.momentum)
                  .y;
          break;
        }
        case LayerKind::Relu:
          h = relu(h);
          break;
        case LayerKind::Tanh:
          h = fdda::tanh(h);
          break;
        case LayerKind::AvgPool:
          h = avgpool(h, s.kernel);
          break;
        case LayerKind::Flatten:
          h = flatten(h);
          break;
        case LayerKind::Reshape: {
          Shape full{h.dim(0)};
          full.insert(full.end(), s.target.begin(), s.target.end());
          h = reshape(h, std::move(full));
          break;
        }
        case LayerKind::Upsample:
          h = upsample(h, s.kernel);
          break;
      }
      if (s.is_activation()) {
        if (opt.capture_activations) res.activations.push_back(h);
        if (opt.quantize && l.act_quant) h = fake_quantize_ste(h, *l.act_quant);
      }
    }
    res.output = h;
    return res;
  }

  std::size_t bn_layer_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.spec.kind == LayerKind::BatchNorm;
    return n;
  }

  /// Number of activation-quantization sites (network input + activations).
  std::size_t activation_site_count() const {
    std::size_t n = 1;
    for (const auto& l : layers_) n += l.spec.is_activation();
    return n;
  }

  std::vector<BasicTensor<T>> parameters() const {
    std::vector<BasicTensor<T>> out;
    for (const auto& l : layers_) out.insert(out.end(), l.params.begin(), l.params.end());
    return out;
  }

  /// Weight matrices and kernels only (the weight-decay set).
  std::vector<BasicTensor<T>> weight_parameters() const {
    std::vector<BasicTensor<T>> out;
    for (const auto& l : layers_)
      if (l.spec.is_weighted()) out.push_back(l.params[0]);
    return out;
  }

  void set_trainable(bool on) {
    for (auto& l : layers_)
      for (auto& p : l.params) p.set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& l : layers_)
      for (auto& p : l.params) p.zero_grad();
  }

  std::vector<std::pair<BasicTensor<T>, BasicTensor<T>>> running_stats() const {
    std::vector<std::pair<BasicTensor<T>, BasicTensor<T>>> out;
    for (const auto& l : layers_)
      if (l.spec.kind == LayerKind::BatchNorm) out.emplace_back(l.running_mean, l.running_var);
    return out;
  }

  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return output_shape_; }
  std::vector<Layer<T>>& layers() { return layers_; }
  const std::vector<Layer<T>>& layers() const { return layers_; }
  std::vector<LayerSpec> specs() const {
    std::vector<LayerSpec> out;
    for (const auto& l : layers_) out.push_back(l.spec);
    return out;
  }

  const std::optional<QuantParams>& input_quant() const { return input_quant_; }
  void set_input_quant(std::optional<QuantParams> q) { input_quant_ = std::move(q); }
  bool is_quantized() const {
    if (input_quant_) return true;
    for (const auto& l : layers_)
      if (l.weight_bits > 0 || l.act_quant) return true;
    return false;
  }

  static Shape infer_shape(const LayerSpec& s, const Shape& in) {
    auto fail = [&](const std::string& why) -> ShapeError {
      return ShapeError(std::string(layer_kind_name(s.kind)) + " layer cannot follow shape " +
                        to_string(in) + ": " + why);
    };
    switch (s.kind) {
      case LayerKind::Dense:
        if (in.size() != 1 || in[0] != s.in) throw fail("expects [" + std::to_string(s.in) + "]");
        return {s.out};
      case LayerKind::Conv2d: {
        if (in.size() != 3 || in[0] != s.in) throw fail("expects " + std::to_string(s.in) + " channels");
        if (s.kernel == 0 || s.stride == 0) throw fail("zero kernel or stride");
        if (s.kernel > in[1] + 2 * s.pad || s.kernel > in[2] + 2 * s.pad) throw fail("kernel too large");
        if ((in[1] + 2 * s.pad - s.kernel) % s.stride || (in[2] + 2 * s.pad - s.kernel) % s.stride)
          throw fail("non-integral output extent");
        return {s.out, (in[1] + 2 * s.pad - s.kernel) / s.stride + 1,
                (in[2] + 2 * s.pad - s.kernel) / s.stride + 1};
      }
      case LayerKind::BatchNorm:
        if ((in.size() != 1 && in.size() != 3) || in[0] != s.in)
          throw fail("expects " + std::to_string(s.in) + " channels");
        return in;
      case LayerKind::AvgPool:
        if (in.size() != 3 || s.kernel == 0 || in[1] % s.kernel || in[2] % s.kernel)
          throw fail("extent not divisible by window");
        return {in[0], in[1] / s.kernel, in[2] / s.kernel};
      case LayerKind::Flatten:
        return {numel(in)};
      case LayerKind::Reshape:
        if (numel(s.target) != numel(in)) throw fail("element count differs from " + to_string(s.target));
        return s.target;
      case LayerKind::Upsample:
        if (in.size() != 3 || s.kernel == 0) throw fail("expects [C,H,W]");
        return {in[0], in[1] * s.kernel, in[2] * s.kernel};
      case LayerKind::Relu:
      case LayerKind::Tanh:
        return in;
    }
    return in;
  }

 private:
  void check_input(const BasicTensor<T>& x) const {
    Shape expect{x.rank() ? x.dim(0) : 0};
    expect.insert(expect.end(), input_shape_.begin(), input_shape_.end());
    if (x.shape() != expect)
      throw ShapeError("network input " + to_string(x.shape()) + " does not match " +
                       to_string(input_shape_) + " per sample");
    if (x.dim(0) == 0) throw ShapeError("network input: empty batch");
  }

  static BasicTensor<T> weight_of(const Layer<T>& l, const ForwardOptions& opt) {
    if (!opt.quantize || l.weight_bits <= 0) return l.params[0];
    return quantize_weights_per_channel(l.params[0], l.weight_bits).weights;
  }

  Shape input_shape_;
  Shape output_shape_;
  std::optional<QuantParams> input_quant_;
  std::vector<Layer<T>> layers_;
};

/// Converts parameters, statistics and quantizer settings to another scalar type.
template <typename To, typename From>
Network<To> network_cast(const Network<From>& net) {
  Network<To> out(net.input_shape(), net.specs());
  out.set_input_quant(net.input_quant());
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const auto& src = net.layers()[i];
    auto& dst = out.layers()[i];
    for (std::size_t p = 0; p < src.params.size(); ++p) {
      dst.params[p] = tensor_cast<To>(src.params[p]);
    }
    if (src.spec.kind == LayerKind::BatchNorm) {
      dst.running_mean = tensor_cast<To>(src.running_mean);
      dst.running_var = tensor_cast<To>(src.running_var);
    }
    dst.weight_bits = src.weight_bits;
    dst.act_quant = src.act_quant;
  }
  return out;
}

/// Inference helper: eval-mode BN, quantizers active, no recording.
template <typename T>
BasicTensor<T> predict_logits(Network<T>& net, const BasicTensor<T>& x) {
  NoGradGuard ng;
  return net.forward(x).output;
}

}  // namespace fdda

#endif  // FDDA_NETWORK_HPP
