// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#ifndef FDDA_QUANTIZER_HPP
#define FDDA_QUANTIZER_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fdda/ops.hpp"
#include "fdda/tensor.hpp"

// Asymmetric uniform quantizer without zero point:
//   q = round(clip(x, l, u) / s),  x̄ = q · s,  s = (u - l) / (2^b - 1).

namespace fdda {

class QuantError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 8;

inline double compute_scale(int bits, double lower, double upper) {
  if (!(upper > lower))
    throw QuantError("quantizer: upper bound " + std::to_string(upper) +
                     " must exceed lower bound " + std::to_string(lower));
  if (bits < kMinBits || bits > 30) throw QuantError("quantizer: unsupported bit-width " + std::to_string(bits));
  return (upper - lower) / static_cast<double>((std::int64_t{1} << bits) - 1);
}

struct QuantParams {
  int bits = 8;
  double lower = 0.0;
  double upper = 1.0;
  double scale = 1.0 / 255.0;

  static QuantParams make(int bits, double lower, double upper) {
    return QuantParams{bits, lower, upper, compute_scale(bits, lower, upper)};
  }

  /// Smallest and largest integer codes. The range spans exactly 2^b codes
  /// starting at round(l/s); this matters when l/s and u/s are both ties of
  /// opposite sign, where rounding alone would produce 2^b + 1 codes.
  std::int64_t code_min() const { return std::llround(lower / scale); }
  std::int64_t code_max() const {
    return std::min<std::int64_t>(std::llround(upper / scale),
                                  code_min() + (std::int64_t{1} << bits) - 1);
  }

  bool operator==(const QuantParams&) const = default;
};

/// Per-output-channel weight quantizers sharing one bit-width.
struct ChannelQuantParams {
  int bits = 8;
  std::vector<QuantParams> channels;
};

inline double clip(double x, double lower, double upper) { return std::min(std::max(x, lower), upper); }

/// round(clip(x,l,u)/s) with ties rounded away from zero.
inline std::int64_t quantize(double x, const QuantParams& q) {
  const std::int64_t code = std::llround(clip(x, q.lower, q.upper) / q.scale);
  return std::clamp(code, q.code_min(), q.code_max());
}

template <typename T>
std::vector<std::int64_t> quantize(const BasicTensor<T>& x, const QuantParams& q) {
  std::vector<std::int64_t> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = quantize(static_cast<double>(x[i]), q);
  return out;
}

inline double dequantize(std::int64_t code, const QuantParams& q) { return static_cast<double>(code) * q.scale; }

inline std::vector<double> dequantize(const std::vector<std::int64_t>& codes, const QuantParams& q) {
  std::vector<double> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = dequantize(codes[i], q);
  return out;
}

inline double fake_quantize(double x, const QuantParams& q) { return dequantize(quantize(x, q), q); }

// ---------------------------------------------------------------------------
// Rounding pinning
//
// Fake quantization is piecewise constant, so finite differences cannot see
// the straight-through gradient. While a PinnedRounding scope is replaying,
// each fake-quantize call returns clip(x) + r, with r the rounding residual
// recorded at the base point (per-channel weight quantizers omit the clip,
// since their bounds track the weights). That function equals the quantized
// forward at the base point and its exact derivative is the STE rule.

enum class PinMode { Off, Record, Replay };

template <typename T>
struct PinState {
  PinMode mode = PinMode::Off;
  std::vector<std::vector<T>> residuals;
  std::size_t cursor = 0;
};

template <typename T>
PinState<T>& pin_state() {
  thread_local PinState<T> state;
  return state;
}

template <typename T>
class PinnedRounding {
 public:
  PinnedRounding() {
    auto& s = pin_state<T>();
    s = PinState<T>{};
    s.mode = PinMode::Record;
  }
  ~PinnedRounding() { pin_state<T>() = PinState<T>{}; }
  PinnedRounding(const PinnedRounding&) = delete;
  PinnedRounding& operator=(const PinnedRounding&) = delete;

  /// Stops recording; later calls reuse the recorded residuals in order.
  void freeze() {
    auto& s = pin_state<T>();
    s.mode = PinMode::Replay;
    s.cursor = 0;
  }
  void rewind() { pin_state<T>().cursor = 0; }
  std::size_t sites() const { return pin_state<T>().residuals.size(); }
};

namespace detail {

/// Shared body of the per-tensor and per-channel fake quantizers.
/// `params_of(i)` yields the quantizer for flat index i.
template <typename T, typename ParamsOf>
BasicTensor<T> fake_quantize_impl(const BasicTensor<T>& x, ParamsOf params_of, bool clip_in_replay) {
  BasicTensor<T> out(x.shape());
  std::vector<std::uint8_t> pass(x.size());
  auto& pin = pin_state<T>();
  if (pin.mode == PinMode::Replay) {
    if (pin.cursor >= pin.residuals.size() || pin.residuals[pin.cursor].size() != x.size())
      throw QuantError("pinned rounding: replay does not match the recorded forward pass");
    const auto& r = pin.residuals[pin.cursor++];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const QuantParams& q = params_of(i);
      const double xi = static_cast<double>(x[i]);
      const double base = clip_in_replay ? clip(xi, q.lower, q.upper) : xi;
      out[i] = static_cast<T>(base) + r[i];
      pass[i] = !clip_in_replay || (xi >= q.lower && xi <= q.upper);
    }
  } else {
    std::vector<T> residual;
    if (pin.mode == PinMode::Record) residual.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const QuantParams& q = params_of(i);
      const double xi = static_cast<double>(x[i]);
      out[i] = static_cast<T>(fake_quantize(xi, q));
      pass[i] = xi >= q.lower && xi <= q.upper;
      if (!residual.empty()) {
        const double base = clip_in_replay ? clip(xi, q.lower, q.upper) : xi;
        residual[i] = out[i] - static_cast<T>(base);
      }
    }
    if (pin.mode == PinMode::Record) pin.residuals.push_back(std::move(residual));
  }
  record(out, {x}, [x, out, pass]() {
    T* gx = grad_sink(x);
    const auto g = out.grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (pass[i]) gx[i] += g[i];
  });
  return out;
}

}  // namespace detail

/// dequantize(quantize(x)) forward; gradient passes unchanged where
/// l <= x <= u and is zero outside (clipped straight-through estimator).
template <typename T>
BasicTensor<T> fake_quantize_ste(const BasicTensor<T>& x, const QuantParams& q) {
  return detail::fake_quantize_impl(x, [&q](std::size_t) -> const QuantParams& { return q; }, true);
}

/// Fake quantization with one quantizer per slice along dimension 0.
template <typename T>
BasicTensor<T> fake_quantize_per_channel(const BasicTensor<T>& w, const ChannelQuantParams& cq) {
  if (w.rank() < 1 || cq.channels.size() != w.dim(0))
    throw QuantError("per-channel quantizer count " + std::to_string(cq.channels.size()) +
                     " does not match " + to_string(w.shape()));
  const std::size_t per = w.size() / w.dim(0);
  return detail::fake_quantize_impl(
      w, [&cq, per](std::size_t i) -> const QuantParams& { return cq.channels[i / per]; }, false);
}

/// Bounds from observed min/max; a degenerate range is widened by ±1e-3.
inline QuantParams params_from_range(int bits, double lo, double hi) {
  if (!(hi > lo)) {
    lo -= 1e-3;
    hi += 1e-3;
  }
  return QuantParams::make(bits, lo, hi);
}

/// Min/max per output channel of w[O, ...].
template <typename T>
ChannelQuantParams channel_params(const BasicTensor<T>& w, int bits) {
  if (w.rank() < 1 || w.dim(0) == 0) throw QuantError("per-channel quantization needs O >= 1");
  const std::size_t o = w.dim(0), per = w.size() / o;
  ChannelQuantParams cq{bits, {}};
  cq.channels.reserve(o);
  for (std::size_t c = 0; c < o; ++c) {
    const auto first = w.data().begin() + static_cast<std::ptrdiff_t>(c * per);
    const auto [mn, mx] = std::minmax_element(first, first + static_cast<std::ptrdiff_t>(per));
    cq.channels.push_back(params_from_range(bits, static_cast<double>(*mn), static_cast<double>(*mx)));
  }
  return cq;
}

template <typename T>
struct ChannelQuantized {
  BasicTensor<T> weights;
  ChannelQuantParams params;
};

/// Each output-channel slice gets (l,u) = (min,max) of that slice and is
/// fake-quantized independently. Differentiable through the STE.
template <typename T>
ChannelQuantized<T> quantize_weights_per_channel(const BasicTensor<T>& w, int bits) {
  auto cq = channel_params(w, bits);
  auto fq = fake_quantize_per_channel(w, cq);
  return {fq, std::move(cq)};
}

}  // namespace fdda

#endif  // FDDA_QUANTIZER_HPP
