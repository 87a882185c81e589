// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#ifndef FDDA_GRAD_CHECK_HPP
#define FDDA_GRAD_CHECK_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fdda/tensor.hpp"

namespace fdda {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` must rebuild the loss from the current values of `params` on every
/// call. Relative error per entry is |ad - fd| / max(|fd|, 1e-6). Intended for
/// the double instantiation; in float the differences are dominated by
/// roundoff.
template <typename T>
GradCheckResult grad_check_detailed(const std::function<BasicTensor<T>()>& f,
                                    std::vector<BasicTensor<T>> params, double h) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  auto loss = f();
  backward(loss);

  GradCheckResult res;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<T> ad(p.size(), T(0));
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), ad.begin());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T saved = p[i];
      p[i] = static_cast<T>(saved + h);
      const double up = static_cast<double>(f().item());
      p[i] = static_cast<T>(saved - h);
      const double down = static_cast<double>(f().item());
      p[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double err = std::abs(static_cast<double>(ad[i]) - fd) / std::max(std::abs(fd), 1e-6);
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = pi;
        res.worst_index = i;
      }
      ++res.checked;
    }
  }
  return res;
}

template <typename T>
double grad_check(const std::function<BasicTensor<T>()>& f, std::vector<BasicTensor<T>> params,
                  double h = 1e-3) {
  return grad_check_detailed<T>(f, std::move(params), h).max_rel_error;
}

}  // namespace fdda

#endif  // FDDA_GRAD_CHECK_HPP
