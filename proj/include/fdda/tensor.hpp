// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#ifndef FDDA_TENSOR_HPP
#define FDDA_TENSOR_HPP

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fdda {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

/// Dense row-major array with an attached gradient slot.
///
/// A tensor is a shared handle: copies alias the same storage, which is how
/// parameters are updated in place by optimizers while the tape holds
/// references to them. Use clone() for an independent value.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : s_(std::make_shared<TensorStorage<T>>()) { s_->shape = {0}; }

  explicit BasicTensor(Shape shape, T fill = T(0)) : s_(std::make_shared<TensorStorage<T>>()) {
    s_->data.assign(numel(shape), fill);
    s_->shape = std::move(shape);
  }

  BasicTensor(Shape shape, std::vector<T> data) : s_(std::make_shared<TensorStorage<T>>()) {
    if (numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + fdda::to_string(shape));
    s_->shape = std::move(shape);
    s_->data = std::move(data);
  }

  static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const { return s_->shape; }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t size() const { return s_->data.size(); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  std::vector<T>& vec() { return s_->data; }
  const std::vector<T>& vec() const { return s_->data; }

  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + fdda::to_string(shape()));
    return s_->data[0];
  }

  bool has_grad() const { return s_->grad.size() == s_->data.size() && !s_->data.empty(); }
  std::span<T> grad() { return s_->grad; }
  std::span<const T> grad() const { return s_->grad; }
  void zero_grad() { s_->grad.clear(); }

  bool requires_grad() const { return s_->requires_grad; }
  BasicTensor& set_requires_grad(bool on = true) {
    s_->requires_grad = on;
    return *this;
  }

  /// Independent copy of the values; never requires grad.
  BasicTensor detach() const { return BasicTensor(shape(), s_->data); }

  /// Independent copy preserving the requires_grad flag (gradients are not copied).
  BasicTensor clone() const {
    BasicTensor out = detach();
    out.s_->requires_grad = s_->requires_grad;
    return out;
  }

  bool same_storage(const BasicTensor& other) const { return s_ == other.s_; }

  const std::shared_ptr<TensorStorage<T>>& storage() const { return s_; }

 private:
  std::shared_ptr<TensorStorage<T>> s_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename To, typename From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& t) {
  std::vector<To> v(t.vec().begin(), t.vec().end());
  BasicTensor<To> out(t.shape(), std::move(v));
  out.set_requires_grad(t.requires_grad());
  return out;
}

/// One executed operation: the storages it read and wrote plus the adjoint rule.
template <typename T>
struct TapeRecord {
  std::vector<std::shared_ptr<TensorStorage<T>>> inputs;
  std::shared_ptr<TensorStorage<T>> output;
  std::function<void()> adjoint;
};

/// Ordered record of differentiable operations for one forward pass.
///
/// Each thread owns one tape per scalar type (see active_tape()). backward()
/// replays it in reverse and clears it, so a tape is single-use.
template <typename T>
class Tape {
 public:
  void push(TapeRecord<T> rec) { records_.push_back(std::move(rec)); }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  void clear() { records_.clear(); }

  bool produced(const std::shared_ptr<TensorStorage<T>>& s) const {
    for (const auto& r : records_)
      if (r.output == s) return true;
    return false;
  }

  /// Runs every adjoint in reverse order; returns how many records ran.
  std::size_t replay() {
    std::size_t visited = 0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output->grad.size() == it->output->data.size()) it->adjoint();
      ++visited;
    }
    return visited;
  }

 private:
  std::vector<TapeRecord<T>> records_;
};

template <typename T>
Tape<T>& active_tape() {
  thread_local Tape<T> tape;
  return tape;
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
bool any_requires_grad(std::initializer_list<const BasicTensor<T>*> xs) {
  for (const auto* x : xs)
    if (x->requires_grad()) return true;
  return false;
}

/// Records `out` as produced from `inputs` if any input requires grad.
/// Returns true when recorded; the adjoint is only installed in that case.
template <typename T>
bool record(BasicTensor<T>& out, std::initializer_list<BasicTensor<T>> inputs,
            std::function<void()> adjoint) {
  if (!grad_enabled()) return false;
  bool needed = false;
  for (const auto& x : inputs) needed = needed || x.requires_grad();
  if (!needed) return false;
  out.set_requires_grad(true);
  TapeRecord<T> rec;
  for (const auto& x : inputs) rec.inputs.push_back(x.storage());
  rec.output = out.storage();
  rec.adjoint = std::move(adjoint);
  active_tape<T>().push(std::move(rec));
  return true;
}

/// Gradient buffer of `x` if it participates in differentiation, else nullptr.
template <typename T>
T* grad_sink(const BasicTensor<T>& x) {
  if (!x.requires_grad()) return nullptr;
  x.storage()->ensure_grad();
  return x.storage()->grad.data();
}

/// Reverse-mode pass from a scalar loss. Populates grads of every
/// requires_grad tensor reachable from `loss` and clears the tape.
template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.size() != 1)
    throw ShapeError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  auto& tape = active_tape<T>();
  if (!loss.requires_grad()) {
    tape.clear();
    return;
  }
  loss.storage()->ensure_grad();
  loss.storage()->grad[0] += T(1);
  tape.replay();
  tape.clear();
}

}  // namespace fdda

#endif  // FDDA_TENSOR_HPP
