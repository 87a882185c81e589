// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#ifndef FDDA_OPS_HPP
#define FDDA_OPS_HPP

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <type_traits>
#include <utility>
#include <vector>

#include "fdda/tensor.hpp"

// Differentiable operations. Every op computes its forward value eagerly and,
// when an input requires grad, pushes its adjoint onto the thread's tape.

namespace fdda {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

/// Elements per (sample, channel) pair of an [N,C] or [N,C,H,W] tensor.
template <typename T>
std::size_t spatial_size(const BasicTensor<T>& x) {
  std::size_t p = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) p *= x.dim(i);
  return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  record(out, {a, b}, [a, b, out]() {
    const auto g = out.grad();
    if (T* ga = grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (T* gb = grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
  return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  record(out, {a, b}, [a, b, out]() {
    const auto g = out.grad();
    if (T* ga = grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
    if (T* gb = grad_sink(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
  });
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T c) {
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * c;
  record(out, {a}, [a, out, c]() {
    const auto g = out.grad();
    T* ga = grad_sink(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
  });
  return out;
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  auto out = BasicTensor<T>::scalar(acc);
  record(out, {a}, [a, out]() {
    const T g = out.grad()[0];
    T* ga = grad_sink(a);
    for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g;
  });
  return out;
}

/// sum((a - target)^2); the target is a constant.
template <typename T>
BasicTensor<T> sum_squared_diff(const BasicTensor<T>& a, const BasicTensor<T>& target) {
  detail::require(a.size() == target.size(), "sum_squared_diff: size mismatch " +
                                                 to_string(a.shape()) + " vs " +
                                                 to_string(target.shape()));
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T d = a[i] - target[i];
    acc += d * d;
  }
  auto out = BasicTensor<T>::scalar(acc);
  const auto t = target.detach();
  record(out, {a}, [a, t, out]() {
    const T g = out.grad()[0];
    T* ga = grad_sink(a);
    for (std::size_t i = 0; i < a.size(); ++i) ga[i] += T(2) * g * (a[i] - t[i]);
  });
  return out;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  record(out, {x}, [x, out]() {
    const auto g = out.grad();
    T* gx = grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T(0)) gx[i] += g[i];
  });
  return out;
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  record(out, {x}, [x, out]() {
    const auto g = out.grad();
    T* gx = grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - out[i] * out[i]);
  });
  return out;
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  detail::require(numel(shape) == x.size(),
                  "reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  BasicTensor<T> out(std::move(shape), x.vec());
  record(out, {x}, [x, out]() {
    const auto g = out.grad();
    T* gx = grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& x) {
  detail::require(x.rank() >= 1, "flatten: scalar input");
  return reshape(x, Shape{x.dim(0), x.size() / std::max<std::size_t>(x.dim(0), 1)});
}

// ---------------------------------------------------------------------------
// Linear layers

/// y = x · wᵀ + b for x[batch,in], w[out,in], b[out].
template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  detail::require(x.rank() == 2 && w.rank() == 2 && b.rank() == 1 && x.dim(1) == w.dim(1) &&
                      b.dim(0) == w.dim(0),
                  "dense: incompatible shapes x" + to_string(x.shape()) + " w" +
                      to_string(w.shape()) + " b" + to_string(b.shape()));
  const auto n = x.dim(0), in = x.dim(1), o = w.dim(0);
  BasicTensor<T> out(Shape{n, o});
  {
    detail::ConstMatMap<T> X(x.data().data(), n, in);
    detail::ConstMatMap<T> W(w.data().data(), o, in);
    detail::MatMap<T> Y(out.data().data(), n, o);
    Y.noalias() = X * W.transpose();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < o; ++c) Y(r, c) += b[c];
  }
  record(out, {x, w, b}, [x, w, b, out, n, in, o]() {
    detail::ConstMatMap<T> G(out.grad().data(), n, o);
    if (T* gx = grad_sink(x)) {
      detail::MatMap<T> GX(gx, n, in);
      GX.noalias() += G * detail::ConstMatMap<T>(w.data().data(), o, in);
    }
    if (T* gw = grad_sink(w)) {
      detail::MatMap<T> GW(gw, o, in);
      GW.noalias() += G.transpose() * detail::ConstMatMap<T>(x.data().data(), n, in);
    }
    if (T* gb = grad_sink(b))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < o; ++c) gb[c] += G(r, c);
  });
  return out;
}

namespace detail {

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return ho * wo; }
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t p = g.positions();
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((ch * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            row[oy * g.wo + ox] = inside ? img[(ch * g.h + iy) * g.w + ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t p = g.positions();
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((ch * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(ch * g.h + iy) * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation of x[N,C,H,W] with w[O,C,kh,kw]; no bias.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t stride,
                      std::size_t pad) {
  detail::require(x.rank() == 4 && w.rank() == 4 && x.dim(1) == w.dim(1),
                  "conv2d: incompatible shapes x" + to_string(x.shape()) + " w" +
                      to_string(w.shape()));
  detail::require(stride >= 1, "conv2d: stride must be positive");
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3),
                         stride, pad, 0, 0};
  detail::require(g.kh <= g.h + 2 * pad && g.kw <= g.w + 2 * pad,
                  "conv2d: kernel larger than padded input");
  detail::require((g.h + 2 * pad - g.kh) % stride == 0 && (g.w + 2 * pad - g.kw) % stride == 0,
                  "conv2d: non-integral output extent for input " + to_string(x.shape()));
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;

  const std::size_t k = g.patch(), p = g.positions();
  BasicTensor<T> out(Shape{g.n, g.o, g.ho, g.wo});
  auto cols = std::make_shared<std::vector<T>>(g.n * k * p);
  detail::ConstMatMap<T> W(w.data().data(), g.o, k);
  for (std::size_t n = 0; n < g.n; ++n) {
    T* c = cols->data() + n * k * p;
    detail::im2col(x.data().data() + n * g.c * g.h * g.w, g, c);
    detail::MatMap<T> Y(out.data().data() + n * g.o * p, g.o, p);
    Y.noalias() = W * detail::ConstMatMap<T>(c, k, p);
  }
  record(out, {x, w}, [x, w, out, cols, g]() {
    const std::size_t k = g.patch(), p = g.positions();
    T* gx = grad_sink(x);
    T* gw = grad_sink(w);
    detail::ConstMatMap<T> W(w.data().data(), g.o, k);
    std::vector<T> dcols(gx ? k * p : 0);
    for (std::size_t n = 0; n < g.n; ++n) {
      detail::ConstMatMap<T> G(out.grad().data() + n * g.o * p, g.o, p);
      detail::ConstMatMap<T> C(cols->data() + n * k * p, k, p);
      if (gw) detail::MatMap<T>(gw, g.o, k).noalias() += G * C.transpose();
      if (gx) {
        detail::MatMap<T> DC(dcols.data(), k, p);
        DC.noalias() = W.transpose() * G;
        detail::col2im_add(dcols.data(), g, gx + n * g.c * g.h * g.w);
      }
    }
  });
  return out;
}

/// Non-overlapping k×k average pooling of x[N,C,H,W].
template <typename T>
BasicTensor<T> avgpool(const BasicTensor<T>& x, std::size_t k) {
  detail::require(x.rank() == 4 && k >= 1 && x.dim(2) % k == 0 && x.dim(3) % k == 0,
                  "avgpool: extent of " + to_string(x.shape()) + " not divisible by " +
                      std::to_string(k));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h / k, wo = w / k;
  const T inv = T(1) / static_cast<T>(k * k);
  BasicTensor<T> out(Shape{n, c, ho, wo});
  for (std::size_t nc = 0; nc < n * c; ++nc)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T acc = 0;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) acc += x[(nc * h + oy * k + i) * w + ox * k + j];
        out[(nc * ho + oy) * wo + ox] = acc * inv;
      }
  record(out, {x}, [x, out, n, c, h, w, k, ho, wo, inv]() {
    T* gx = grad_sink(x);
    const auto g = out.grad();
    for (std::size_t nc = 0; nc < n * c; ++nc)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const T v = g[(nc * ho + oy) * wo + ox] * inv;
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) gx[(nc * h + oy * k + i) * w + ox * k + j] += v;
        }
  });
  return out;
}

/// Nearest-neighbour upsampling of x[N,C,H,W] by an integer factor.
template <typename T>
BasicTensor<T> upsample(const BasicTensor<T>& x, std::size_t f) {
  detail::require(x.rank() == 4 && f >= 1, "upsample: expects [N,C,H,W] and factor >= 1");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  BasicTensor<T> out(Shape{x.dim(0), x.dim(1), h * f, w * f});
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t y = 0; y < h * f; ++y)
      for (std::size_t xx = 0; xx < w * f; ++xx)
        out[(i * h * f + y) * w * f + xx] = x[(i * h + y / f) * w + xx / f];
  record(out, {x}, [x, out, nc, h, w, f]() {
    T* gx = grad_sink(x);
    const auto g = out.grad();
    for (std::size_t i = 0; i < nc; ++i)
      for (std::size_t y = 0; y < h * f; ++y)
        for (std::size_t xx = 0; xx < w * f; ++xx)
          gx[(i * h + y / f) * w + xx / f] += g[(i * h * f + y) * w * f + xx];
  });
  return out;
}

/// Rows of table[K,d] selected by labels.
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, const std::vector<int>& labels) {
  detail::require(table.rank() == 2, "embedding: table must be [classes, dim]");
  const std::size_t k = table.dim(0), d = table.dim(1);
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw Error("embedding: label " + std::to_string(y) + " outside [0," + std::to_string(k) +
                  ")");
  BasicTensor<T> out(Shape{labels.size(), d});
  for (std::size_t r = 0; r < labels.size(); ++r)
    std::copy_n(table.data().data() + labels[r] * d, d, out.data().data() + r * d);
  record(out, {table}, [table, out, labels, d]() {
    T* gt = grad_sink(table);
    const auto g = out.grad();
    for (std::size_t r = 0; r < labels.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) gt[labels[r] * d + j] += g[r * d + j];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

enum class BnMode { Train, Eval };

template <typename T>
struct BatchNormResult {
  BasicTensor<T> y;
  BasicTensor<T> batch_mean;  // detached
  BasicTensor<T> batch_var;   // detached, biased
};

inline constexpr double kBnEpsilon = 1e-5;

/// Per-channel mean and biased variance over N×H×W, accumulated in double.
template <typename T>
std::pair<std::vector<double>, std::vector<double>> channel_moments(
    const BasicTensor<T>& x, const std::vector<std::size_t>* samples = nullptr) {
  const std::size_t n = x.dim(0), c = x.dim(1), p = detail::spatial_size(x);
  std::vector<std::size_t> all;
  if (!samples) {
    all.resize(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    samples = &all;
  }
  const double m = static_cast<double>(samples->size() * p);
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  for (std::size_t s : *samples)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* row = x.data().data() + (s * c + ch) * p;
      for (std::size_t i = 0; i < p; ++i) mean[ch] += row[i];
    }
  for (auto& v : mean) v /= m;
  for (std::size_t s : *samples)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* row = x.data().data() + (s * c + ch) * p;
      for (std::size_t i = 0; i < p; ++i) {
        const double d = row[i] - mean[ch];
        var[ch] += d * d;
      }
    }
  for (auto& v : var) v /= m;
  return {std::move(mean), std::move(var)};
}

/// Batch normalization over [N,C] or [N,C,H,W].
///
/// Train mode normalizes with batch statistics and, when `running_mean` /
/// `running_var` are given, updates them as (1-m)·running + m·batch. Eval mode
/// normalizes with the running statistics. Batch statistics are returned in
/// both modes.
template <typename T>
BatchNormResult<T> batchnorm_forward(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                                     const BasicTensor<T>& beta, BnMode mode,
                                     std::type_identity_t<BasicTensor<T>>* running_mean,
                                     std::type_identity_t<BasicTensor<T>>* running_var,
                                     double momentum = 0.1, double eps = kBnEpsilon) {
  detail::require(x.rank() == 2 || x.rank() == 4, "batchnorm: expects [N,C] or [N,C,H,W]");
  const std::size_t n = x.dim(0), c = x.dim(1), p = detail::spatial_size(x);
  detail::require(gamma.size() == c && beta.size() == c,
                  "batchnorm: affine parameters do not match channel count " + std::to_string(c));
  if (n == 0 || p == 0) throw ShapeError("batchnorm: zero-size batch");

  auto [bm, bv] = channel_moments(x);
  BatchNormResult<T> r{BasicTensor<T>(x.shape()), BasicTensor<T>(Shape{c}),
                       BasicTensor<T>(Shape{c})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    r.batch_mean[ch] = static_cast<T>(bm[ch]);
    r.batch_var[ch] = static_cast<T>(bv[ch]);
  }

  std::vector<T> mu(c), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double m, v;
    if (mode == BnMode::Train) {
      m = bm[ch];
      v = bv[ch];
    } else {
      if (!running_mean || !running_var) throw Error("batchnorm: eval mode needs running stats");
      m = (*running_mean)[ch];
      v = (*running_var)[ch];
    }
    mu[ch] = static_cast<T>(m);
    inv_std[ch] = static_cast<T>(1.0 / std::sqrt(v + eps));
  }

  BasicTensor<T> xhat(x.shape());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * p;
      for (std::size_t i = 0; i < p; ++i) {
        const T h = (x[base + i] - mu[ch]) * inv_std[ch];
        xhat[base + i] = h;
        r.y[base + i] = gamma[ch] * h + beta[ch];
      }
    }

  if (mode == BnMode::Train && running_mean && running_var) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      (*running_mean)[ch] = static_cast<T>((1.0 - momentum) * (*running_mean)[ch] + momentum * bm[ch]);
      (*running_var)[ch] = static_cast<T>((1.0 - momentum) * (*running_var)[ch] + momentum * bv[ch]);
    }
  }

  const bool train = mode == BnMode::Train;
  auto y = r.y;
  record(y, {x, gamma, beta}, [x, gamma, beta, y, xhat, inv_std, n, c, p, train]() {
    const auto g = y.grad();
    T* gx = grad_sink(x);
    T* gg = grad_sink(gamma);
    T* gb = grad_sink(beta);
    const double m = static_cast<double>(n * p);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum_g = 0, sum_gh = 0;
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t base = (s * c + ch) * p;
        for (std::size_t i = 0; i < p; ++i) {
          sum_g += g[base + i];
          sum_gh += g[base + i] * xhat[base + i];
        }
      }
      if (gg) gg[ch] += static_cast<T>(sum_gh);
      if (gb) gb[ch] += static_cast<T>(sum_g);
      if (!gx) continue;
      const T k = gamma[ch] * inv_std[ch];
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t base = (s * c + ch) * p;
        for (std::size_t i = 0; i < p; ++i) {
          if (train)
            gx[base + i] += static_cast<T>(
                k * (g[base + i] - sum_g / m - xhat[base + i] * sum_gh / m));
          else
            gx[base + i] += k * g[base + i];
        }
      }
    }
  });
  return r;
}

/// Differentiable per-channel mean and biased variance of x over the
/// selected samples (all when `samples` is empty) and all spatial positions.
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> channel_stats(const BasicTensor<T>& x,
                                                        const std::vector<std::size_t>& samples = {}) {
  detail::require(x.rank() == 2 || x.rank() == 4, "channel_stats: expects [N,C] or [N,C,H,W]");
  for (std::size_t s : samples)
    if (s >= x.dim(0)) throw ShapeError("channel_stats: sample index out of range");
  std::vector<std::size_t> idx = samples;
  if (idx.empty()) {
    idx.resize(x.dim(0));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  }
  if (idx.empty() || detail::spatial_size(x) == 0) throw ShapeError("channel_stats: empty input");
  const std::size_t c = x.dim(1), p = detail::spatial_size(x);
  auto [m, v] = channel_moments(x, &idx);
  BasicTensor<T> mean(Shape{c}), var(Shape{c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    mean[ch] = static_cast<T>(m[ch]);
    var[ch] = static_cast<T>(v[ch]);
  }
  const T inv_count = T(1) / static_cast<T>(idx.size() * p);
  record(mean, {x}, [x, mean, idx, c, p, inv_count]() {
    T* gx = grad_sink(x);
    const auto g = mean.grad();
    for (std::size_t s : idx)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T v = g[ch] * inv_count;
        for (std::size_t i = 0; i < p; ++i) gx[(s * c + ch) * p + i] += v;
      }
  });
  record(var, {x}, [x, var, mean, idx, c, p, inv_count]() {
    T* gx = grad_sink(x);
    const auto g = var.grad();
    for (std::size_t s : idx)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T k = T(2) * g[ch] * inv_count;
        for (std::size_t i = 0; i < p; ++i) {
          const std::size_t at = (s * c + ch) * p + i;
          gx[at] += k * (x[at] - mean[ch]);
        }
      }
  });
  return {mean, var};
}

// ---------------------------------------------------------------------------
// Classification losses

namespace detail {

/// Row-wise log-softmax computed with max subtraction.
template <typename T>
std::vector<T> log_softmax_rows(const BasicTensor<T>& logits) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  std::vector<T> out(b * k);
  for (std::size_t r = 0; r < b; ++r) {
    const T* row = logits.data().data() + r * k;
    const T mx = *std::max_element(row, row + k);
    T z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const T lz = std::log(z) + mx;
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = row[j] - lz;
  }
  return out;
}

}  // namespace detail

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, const std::vector<int>& labels) {
  detail::require(logits.rank() == 2 && logits.dim(0) == labels.size() && !labels.empty(),
                  "softmax_cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                      std::to_string(labels.size()) + " labels");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw Error("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," +
                  std::to_string(k) + ")");
  const auto ls = detail::log_softmax_rows(logits);
  T acc = 0;
  for (std::size_t r = 0; r < b; ++r) acc -= ls[r * k + labels[r]];
  auto out = BasicTensor<T>::scalar(acc / static_cast<T>(b));
  record(out, {logits}, [logits, out, ls, labels, b, k]() {
    T* gl = grad_sink(logits);
    const T g = out.grad()[0] / static_cast<T>(b);
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t j = 0; j < k; ++j) {
        const T p = std::exp(ls[r * k + j]);
        gl[r * k + j] += g * (p - (static_cast<int>(j) == labels[r] ? T(1) : T(0)));
      }
  });
  return out;
}

/// Mean over the batch of KL(softmax(teacher) ‖ softmax(student)).
/// The teacher side never receives gradient.
template <typename T>
BasicTensor<T> kl_divergence(const BasicTensor<T>& student_logits,
                             const BasicTensor<T>& teacher_logits) {
  detail::require(student_logits.rank() == 2 && student_logits.shape() == teacher_logits.shape(),
                  "kl_divergence: shape mismatch " + to_string(student_logits.shape()) + " vs " +
                      to_string(teacher_logits.shape()));
  const std::size_t b = student_logits.dim(0), k = student_logits.dim(1);
  if (b == 0) throw ShapeError("kl_divergence: empty batch");
  const auto ls = detail::log_softmax_rows(student_logits);
  const auto lt = detail::log_softmax_rows(teacher_logits);
  T acc = 0;
  for (std::size_t i = 0; i < b * k; ++i) acc += std::exp(lt[i]) * (lt[i] - ls[i]);
  auto out = BasicTensor<T>::scalar(std::max(acc / static_cast<T>(b), T(0)));
  record(out, {student_logits}, [student_logits, out, ls, lt, b]() {
    T* gs = grad_sink(student_logits);
    const T g = out.grad()[0] / static_cast<T>(b);
    for (std::size_t i = 0; i < ls.size(); ++i) gs[i] += g * (std::exp(ls[i]) - std::exp(lt[i]));
  });
  return out;
}

/// Argmax per row; ties resolve to the smaller index.
template <typename T>
std::vector<int> argmax_rows(const BasicTensor<T>& logits) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(b);
  for (std::size_t r = 0; r < b; ++r) {
    const T* row = logits.data().data() + r * k;
    out[r] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

}  // namespace fdda

#endif  // FDDA_OPS_HPP
