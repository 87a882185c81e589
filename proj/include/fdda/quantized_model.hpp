// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#ifndef FDDA_QUANTIZED_MODEL_HPP
#define FDDA_QUANTIZED_MODEL_HPP

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "fdda/network.hpp"
#include "fdda/quantizer.hpp"

namespace fdda {

/// Bit-widths of a quantized copy. Batch normalization is never quantized.
struct QuantPolicy {
  int default_bits = 4;     // interior weights
  int activation_bits = 4;  // interior activations
  int first_layer_bits = 4;
  int last_layer_bits = 4;

  void validate() const {
    for (auto [name, b] : {std::pair{"default_bits", default_bits}, {"activation_bits", activation_bits},
                           {"first_layer_bits", first_layer_bits}, {"last_layer_bits", last_layer_bits}})
      if (b < kMinBits || b > kMaxBits)
        throw QuantError(std::string("policy: ") + name + "=" + std::to_string(b) + " outside [" +
                         std::to_string(kMinBits) + ", " + std::to_string(kMaxBits) + "]");
  }
};

namespace detail {

/// Bits for each activation site: the input feeds the first weighted layer;
/// the last activation before the final weighted layer feeds the last one.
template <typename T>
std::vector<int> site_bits(const Network<T>& net, const QuantPolicy& p) {
  std::vector<int> bits{p.first_layer_bits};
  const auto& layers = net.layers();
  std::size_t last_weighted = layers.size();
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].spec.is_weighted()) last_weighted = i;
  std::size_t feeding_last = layers.size();
  for (std::size_t i = 0; i < last_weighted && i < layers.size(); ++i)
    if (layers[i].spec.is_activation()) feeding_last = i;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].spec.is_activation())
      bits.push_back(i == feeding_last ? p.last_layer_bits : p.activation_bits);
  return bits;
}

}  // namespace detail

/// Copy of `model` with per-channel weight quantizers installed. Activation
/// quantizers are installed by calibrate_activation_bounds().
template <typename T>
Network<T> make_quantized(const Network<T>& model, const QuantPolicy& policy) {
  policy.validate();
  Network<T> q = model;
  auto& layers = q.layers();
  std::vector<std::size_t> weighted;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].spec.is_weighted()) weighted.push_back(i);
  for (std::size_t w = 0; w < weighted.size(); ++w) {
    int bits = policy.default_bits;
    if (w == 0) bits = policy.first_layer_bits;
    if (w + 1 == weighted.size()) bits = policy.last_layer_bits;
    layers[weighted[w]].weight_bits = bits;
  }
  return q;
}

/// Observes min/max at every activation site over `data` and installs
/// layer-wise activation quantizers. Degenerate ranges are widened by ±1e-3.
/// Returns the installed parameters, input site first.
template <typename T>
std::vector<QuantParams> calibrate_activation_bounds(Network<T>& model, const BasicTensor<T>& data,
                                                     const QuantPolicy& policy) {
  if (data.rank() == 0 || data.dim(0) == 0) throw QuantError("calibrate_activation_bounds: empty batch");
  model.set_input_quant(std::nullopt);
  for (auto& l : model.layers()) l.act_quant.reset();
  ForwardOptions opt;
  opt.capture_activations = true;
  ForwardResult<T> res;
  {
    NoGradGuard ng;
    res = model.forward(data, opt);
  }
  const auto bits = detail::site_bits(model, policy);
  std::vector<QuantParams> params;
  for (std::size_t s = 0; s < res.activations.size(); ++s) {
    const auto& a = res.activations[s];
    const auto [mn, mx] = std::minmax_element(a.data().begin(), a.data().end());
    params.push_back(params_from_range(bits[s], static_cast<double>(*mn), static_cast<double>(*mx)));
  }
  model.set_input_quant(params[0]);
  std::size_t s = 1;
  for (auto& l : model.layers())
    if (l.spec.is_activation()) l.act_quant = params[s++];
  return params;
}

}  // namespace fdda

#endif  // FDDA_QUANTIZED_MODEL_HPP
