// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#ifndef FDDA_OPTIM_HPP
#define FDDA_OPTIM_HPP

#include <cmath>
#include <vector>

#include "fdda/tensor.hpp"

namespace fdda {

template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<BasicTensor<T>> params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      const auto g = p.grad();
      for (std::size_t i = 0; i < p.size(); ++i) {
        m_[k][i] = beta1_ * m_[k][i] + (1 - beta1_) * g[i];
        v_[k][i] = beta2_ * v_[k][i] + (1 - beta2_) * g[i] * g[i];
        const double upd = lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
        p[i] = static_cast<T>(p[i] - upd);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<BasicTensor<T>> params_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// SGD with (optionally Nesterov) momentum. Weight decay applies only to the
/// parameters flagged in `decay`.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<BasicTensor<T>> params, std::vector<bool> decay, double momentum = 0.9,
      double weight_decay = 1e-4, bool nesterov = true)
      : params_(std::move(params)), decay_(std::move(decay)), momentum_(momentum), wd_(weight_decay),
        nesterov_(nesterov) {
    decay_.resize(params_.size(), false);
    for (const auto& p : params_) buf_.emplace_back(p.size(), 0.0);
  }

  void step(double lr) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      const auto g = p.grad();
      const double wd = decay_[k] ? wd_ : 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = g[i] + wd * p[i];
        buf_[k][i] = momentum_ * buf_[k][i] + d;
        const double upd = nesterov_ ? d + momentum_ * buf_[k][i] : buf_[k][i];
        p[i] = static_cast<T>(p[i] - lr * upd);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<BasicTensor<T>> params_;
  std::vector<bool> decay_;
  double momentum_, wd_;
  bool nesterov_;
  std::vector<std::vector<double>> buf_;
};

}  // namespace fdda

#endif  // FDDA_OPTIM_HPP
