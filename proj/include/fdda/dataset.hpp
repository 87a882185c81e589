// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#ifndef FDDA_DATASET_HPP
#define FDDA_DATASET_HPP

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fdda/tensor.hpp"

namespace fdda {

/// Labeled images stored as one [N,C,H,W] tensor.
struct LabeledSet {
  Tensor images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

  LabeledSet subset(const std::vector<std::size_t>& idx) const {
    const std::size_t per = numel(sample_shape());
    Shape s = images.shape();
    s[0] = idx.size();
    LabeledSet out{Tensor(s), {}};
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per,
                  out.images.data().begin() + static_cast<std::ptrdiff_t>(i * per));
      out.labels.push_back(labels.at(idx[i]));
    }
    return out;
  }

  /// Samples [begin, end).
  LabeledSet slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return subset(idx);
  }
};

/// Calibration data: at most one real image per class.
struct CalibrationSet {
  LabeledSet items;
  std::size_t num_classes = 0;
  std::vector<bool> predicted;  // true where the label came from the classifier

  std::set<int> available_classes() const { return {items.labels.begin(), items.labels.end()}; }
  bool empty() const { return items.size() == 0; }
};

struct ToyDatasetSpec {
  std::size_t num_classes = 8;
  Shape image_shape{1, 16, 16};
  std::size_t samples_per_class = 100;
  /// Scales all per-sample variation: pixel noise std, plus proportional
  /// contrast, offset, phase and position jitter. Zero makes every sample of
  /// a class identical.
  double noise_std = 0.9;
  std::uint64_t seed = 7;
};

namespace detail {

/// Deterministic class pattern at normalized coordinates (u, v) in [-1, 1].
/// Even classes are oriented gratings, odd classes are off-centre blobs; each
/// pattern is standardized so classes share first- and second-order pixel
/// statistics.
inline double toy_pattern(std::size_t cls, std::size_t num_classes, double u, double v,
                          double phase, double du, double dv) {
  const double pi = std::numbers::pi;
  if (cls % 2 == 0) {
    const std::size_t k = cls / 2, n = (num_classes + 1) / 2;
    const double theta = pi * static_cast<double>(k) / static_cast<double>(n);
    const double freq = 1.5 + 0.5 * static_cast<double>(k % 2);
    return std::sin(pi * freq * (u * std::cos(theta) + v * std::sin(theta)) + phase);
  }
  const std::size_t k = cls / 2, n = num_classes / 2;
  const double angle = 2.0 * pi * static_cast<double>(k) / static_cast<double>(std::max<std::size_t>(n, 1));
  const double cu = 0.45 * std::cos(angle) + du, cv = 0.45 * std::sin(angle) + dv;
  const double r2 = (u - cu) * (u - cu) + (v - cv) * (v - cv);
  return std::exp(-r2 / (2 * 0.3 * 0.3));
}

}  // namespace detail

/// Builds the toy classification problem. Per class, the first 80% of
/// samples (by index) go to the train split and the rest to the test split.
inline std::pair<LabeledSet, LabeledSet> make_toy_dataset(const ToyDatasetSpec& spec) {
  if (spec.num_classes < 2 || spec.image_shape.size() != 3 || spec.image_shape[1] < 2 ||
      spec.image_shape[2] < 2 || spec.image_shape[0] == 0 || spec.samples_per_class == 0)
    throw ShapeError("toy dataset: invalid spec (need >= 2 classes and a [C,H,W] image shape)");
  if (spec.noise_std < 0) throw Error("toy dataset: noise_std must be non-negative");
  const std::size_t c = spec.image_shape[0], h = spec.image_shape[1], w = spec.image_shape[2];
  const std::size_t per = c * h * w;
  const std::size_t n_train = spec.samples_per_class * 4 / 5;
  const std::size_t n_test = spec.samples_per_class - n_train;

  // Standardization constants of each noiseless pattern.
  std::vector<double> mu(spec.num_classes), sd(spec.num_classes);
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    double s = 0, s2 = 0;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double u = 2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(w) - 1.0;
        const double v = 2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(h) - 1.0;
        const double p = detail::toy_pattern(k, spec.num_classes, u, v, 0, 0, 0);
        s += p;
        s2 += p * p;
      }
    const double m = s / static_cast<double>(h * w);
    mu[k] = m;
    sd[k] = std::sqrt(std::max(s2 / static_cast<double>(h * w) - m * m, 1e-12));
  }

  auto alloc = [&](std::size_t n) {
    LabeledSet s{Tensor(Shape{n, c, h, w}), {}};
    s.labels.reserve(n);
    return s;
  };
  LabeledSet train = alloc(n_train * spec.num_classes), test = alloc(n_test * spec.num_classes);

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  const double ns = spec.noise_std;
  std::size_t tr = 0, te = 0;
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      const double contrast = 0.5 * (1.0 + 0.8 * ns * unif(rng));
      const double offset = 0.3 * ns * gauss(rng);
      const double phase = 1.5 * ns * gauss(rng);
      const double du = 0.25 * ns * gauss(rng), dv = 0.25 * ns * gauss(rng);
      const bool is_train = i < n_train;
      LabeledSet& dst = is_train ? train : test;
      const std::size_t slot = is_train ? tr++ : te++;
      float* img = dst.images.data().data() + slot * per;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const double u = 2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(w) - 1.0;
            const double v = 2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(h) - 1.0;
            const double p =
                (detail::toy_pattern(k, spec.num_classes, u, v, phase, du, dv) - mu[k]) / sd[k];
            double val = contrast * p + offset + (ns > 0 ? ns * gauss(rng) : 0.0);
            img[(ch * h + y) * w + x] = static_cast<float>(std::clamp(val, -1.0, 1.0));
          }
      dst.labels.push_back(static_cast<int>(k));
    }
  }
  return {std::move(train), std::move(test)};
}

class DatasetError : public Error {
 public:
  using Error::Error;
};

/// First-indexed sample of each requested class; classes not listed are
/// unavailable. An empty list yields an empty set.
inline CalibrationSet extract_calibration(const LabeledSet& train, std::size_t num_classes,
                                          const std::vector<int>& classes) {
  CalibrationSet cal;
  cal.num_classes = num_classes;
  std::vector<std::size_t> idx;
  std::set<int> seen;
  for (int c : classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes)
      throw DatasetError("calibration: class " + std::to_string(c) + " outside the class range");
    if (!seen.insert(c).second) throw DatasetError("calibration: class " + std::to_string(c) + " requested twice");
    auto it = std::find(train.labels.begin(), train.labels.end(), c);
    if (it == train.labels.end())
      throw DatasetError("calibration: class " + std::to_string(c) + " absent from the train set");
    idx.push_back(static_cast<std::size_t>(it - train.labels.begin()));
  }
  cal.items = train.subset(idx);
  cal.predicted.assign(idx.size(), false);
  return cal;
}

/// One image for every class 0..num_classes-1.
inline CalibrationSet extract_calibration(const LabeledSet& train, std::size_t num_classes) {
  std::vector<int> all(num_classes);
  std::iota(all.begin(), all.end(), 0);
  return extract_calibration(train, num_classes, all);
}

}  // namespace fdda

#endif  // FDDA_DATASET_HPP
