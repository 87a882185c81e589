// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#ifndef FDDA_BNS_HPP
#define FDDA_BNS_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fdda/dataset.hpp"
#include "fdda/network.hpp"
#include "fdda/ops.hpp"

// Batch-normalization statistics at three granularities (whole dataset,
// single image, class centroid) and the losses that align synthetic
// statistics with them. Layers are numbered 1..L in order of appearance.

namespace fdda {

/// Mean and biased variance of the input of one BN layer.
template <typename T>
struct LayerStats {
  BasicTensor<T> mean;
  BasicTensor<T> var;
};

/// Per-layer statistics; entries outside the layers of interest may be empty.
template <typename T>
using LayerStatsList = std::vector<LayerStats<T>>;

template <typename T>
struct BnRunningStats {
  std::vector<BasicTensor<T>> mean;
  std::vector<BasicTensor<T>> var;

  std::size_t layers() const { return mean.size(); }
};

template <typename T>
using PerImageBns = LayerStatsList<T>;

template <typename T>
struct ClassCentroids {
  std::size_t first_layer = 1;  // K
  std::size_t last_layer = 0;   // L
  std::size_t num_classes = 0;
  /// class -> statistics of layers K..L (index 0 holds layer K)
  std::map<int, LayerStatsList<T>> centroids;
  std::set<int> available_classes;

  bool available(int c) const { return available_classes.count(c) != 0; }
  const LayerStats<T>& at(int c, std::size_t layer) const {
    return centroids.at(c).at(layer - first_layer);
  }
};

struct DistortionParams {
  double mean_std = 0.5;  // υ_μ
  double var_std = 1.0;   // υ_σ
};

/// Start of the deep layers: max(1, ceil(L/2) - 2).
inline std::size_t deep_layer_start(std::size_t num_bn_layers) {
  if (num_bn_layers < 1) throw Error("deep_layer_start: network has no BN layers");
  const long k = static_cast<long>((num_bn_layers + 1) / 2) - 2;
  return static_cast<std::size_t>(std::max(1L, k));
}

template <typename T>
BnRunningStats<T> collect_running_stats(const Network<T>& model) {
  BnRunningStats<T> out;
  for (const auto& [m, v] : model.running_stats()) {
    out.mean.push_back(m.detach());
    out.var.push_back(v.detach());
  }
  if (out.layers() == 0) throw Error("collect_running_stats: model has no batchnorm layers");
  return out;
}

/// Differentiable statistics of each captured BN input over the whole batch.
template <typename T>
LayerStatsList<T> batch_bn_stats(const std::vector<BasicTensor<T>>& bn_inputs) {
  LayerStatsList<T> out;
  out.reserve(bn_inputs.size());
  for (const auto& x : bn_inputs) {
    auto [m, v] = channel_stats(x);
    out.push_back({m, v});
  }
  return out;
}

/// Statistics of each class present in `labels`, over that class's samples
/// only. Layers before `first_layer` are left empty.
template <typename T>
std::map<int, LayerStatsList<T>> class_bn_stats(const std::vector<BasicTensor<T>>& bn_inputs,
                                                const std::vector<int>& labels,
                                                std::size_t first_layer = 1) {
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  std::map<int, LayerStatsList<T>> out;
  for (const auto& [c, idx] : members) {
    LayerStatsList<T> per(bn_inputs.size());
    for (std::size_t l = first_layer; l <= bn_inputs.size(); ++l) {
      auto [m, v] = channel_stats(bn_inputs[l - 1], idx);
      per[l - 1] = {m, v};
    }
    out.emplace(c, std::move(per));
  }
  return out;
}

/// Per-channel mean and biased variance of a single image at every BN input.
template <typename T>
PerImageBns<T> per_image_bns(Network<T>& model, const BasicTensor<T>& image) {
  if (image.rank() == 0 || image.dim(0) != 1)
    throw ShapeError("per_image_bns: expects a batch of exactly one image, got " + to_string(image.shape()));
  NoGradGuard ng;
  ForwardOptions opt;
  opt.capture_bn_inputs = true;
  auto res = model.forward(image, opt);
  return batch_bn_stats(res.bn_inputs);
}

/// Per-image statistics for every sample of a batch (one forward pass).
template <typename T>
std::vector<PerImageBns<T>> per_image_bns_batch(Network<T>& model, const BasicTensor<T>& images) {
  NoGradGuard ng;
  ForwardOptions opt;
  opt.capture_bn_inputs = true;
  auto res = model.forward(images, opt);
  std::vector<PerImageBns<T>> out(images.dim(0));
  for (std::size_t i = 0; i < images.dim(0); ++i)
    for (const auto& x : res.bn_inputs) {
      auto [m, v] = channel_stats(x, {i});
      out[i].push_back({m, v});
    }
  return out;
}

class CalibrationError : public Error {
 public:
  using Error::Error;
};

/// Centroids from calibration images (at most one per class), restricted to
/// layers K..L. Classes without an image are recorded as unavailable.
template <typename T>
ClassCentroids<T> build_class_centroids(Network<T>& model, const BasicTensor<T>& images,
                                        const std::vector<int>& labels, std::size_t num_classes,
                                        std::size_t first_layer) {
  ClassCentroids<T> cc;
  cc.first_layer = first_layer;
  cc.last_layer = model.bn_layer_count();
  cc.num_classes = num_classes;
  if (first_layer < 1 || first_layer > cc.last_layer)
    throw CalibrationError("build_class_centroids: K=" + std::to_string(first_layer) +
                           " outside [1, " + std::to_string(cc.last_layer) + "]");
  if (labels.empty()) return cc;
  if (images.dim(0) != labels.size()) throw ShapeError("build_class_centroids: image/label count mismatch");
  for (int c : labels) {
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes)
      throw CalibrationError("build_class_centroids: label " + std::to_string(c) + " out of range");
    if (!cc.available_classes.insert(c).second)
      throw CalibrationError("build_class_centroids: duplicate class " + std::to_string(c) +
                             " in calibration set");
  }
  const auto all = per_image_bns_batch(model, images);
  for (std::size_t i = 0; i < labels.size(); ++i)
    cc.centroids.emplace(labels[i], LayerStatsList<T>(all[i].begin() + static_cast<std::ptrdiff_t>(first_layer - 1),
                                                      all[i].end()));
  return cc;
}

template <typename T>
ClassCentroids<T> build_class_centroids(Network<T>& model, const CalibrationSet& calib,
                                        std::size_t first_layer) {
  return build_class_centroids(model, tensor_cast<T>(calib.items.images), calib.items.labels,
                               calib.num_classes, first_layer);
}

/// Σ_l ‖μ'_l − μ_l^F‖² + ‖σ'_l − σ_l^F‖² over all BN layers.
template <typename T>
BasicTensor<T> bns_loss(const LayerStatsList<T>& batch_stats, const BnRunningStats<T>& running) {
  if (batch_stats.size() != running.layers())
    throw ShapeError("bns_loss: " + std::to_string(batch_stats.size()) + " layers of statistics vs " +
                     std::to_string(running.layers()) + " running layers");
  auto total = BasicTensor<T>::scalar(T(0));
  for (std::size_t l = 0; l < batch_stats.size(); ++l) {
    total = add(total, sum_squared_diff(batch_stats[l].mean, running.mean[l]));
    total = add(total, sum_squared_diff(batch_stats[l].var, running.var[l]));
  }
  return total;
}

namespace detail {

template <typename T, typename TargetFn>
BasicTensor<T> centroid_alignment(const std::map<int, LayerStatsList<T>>& per_class,
                                  const ClassCentroids<T>& cc, std::size_t first_layer,
                                  std::size_t* skipped, TargetFn target) {
  if (first_layer < cc.first_layer && !cc.centroids.empty())
    throw Error("centroid loss: K=" + std::to_string(first_layer) +
                " precedes the first centroid layer " + std::to_string(cc.first_layer));
  auto total = BasicTensor<T>::scalar(T(0));
  std::size_t skip = 0;
  for (const auto& [c, stats] : per_class) {
    if (!cc.available(c)) {
      ++skip;
      continue;
    }
    if (stats.size() < cc.last_layer)
      throw ShapeError("centroid loss: class statistics cover " + std::to_string(stats.size()) +
                       " layers, centroids " + std::to_string(cc.last_layer));
    for (std::size_t l = first_layer; l <= cc.last_layer; ++l) {
      const auto& s = stats[l - 1];
      const auto& ref = cc.at(c, l);
      total = add(total, sum_squared_diff(s.mean, target(ref.mean, true, c)));
      total = add(total, sum_squared_diff(s.var, target(ref.var, false, c)));
    }
  }
  if (skipped) *skipped = skip;
  return total;
}

}  // namespace detail

/// Σ_c Σ_{l=K..L} ‖μ'_l(x̃|c) − μ'_l(x̂|c)‖² + ‖σ'_l(x̃|c) − σ'_l(x̂|c)‖².
/// Classes without a centroid are skipped; their count goes to `skipped`.
template <typename T>
BasicTensor<T> cbns_loss(const std::map<int, LayerStatsList<T>>& per_class,
                         const ClassCentroids<T>& centroids, std::size_t first_layer,
                         std::size_t* skipped = nullptr) {
  return detail::centroid_alignment(per_class, centroids, first_layer, skipped,
                                    [](const BasicTensor<T>& t, bool, int) { return t; });
}

/// As cbns_loss, but every centroid entry is shifted by fresh Gaussian noise
/// (std υ_μ for means, υ_σ for variances) on each call. Each call draws one
/// value from `rng`; every class then uses its own stream derived from it, so
/// a class's noise does not depend on which other classes are present.
template <typename T, typename Rng>
BasicTensor<T> dbns_loss(const std::map<int, LayerStatsList<T>>& per_class,
                         const ClassCentroids<T>& centroids, std::size_t first_layer,
                         const DistortionParams& d, Rng& rng, std::size_t* skipped = nullptr) {
  if (d.mean_std < 0 || d.var_std < 0) throw Error("dbns_loss: distortion std must be non-negative");
  const std::uint64_t base = rng();
  std::map<int, std::mt19937_64> streams;
  std::normal_distribution<double> gauss(0.0, 1.0);
  return detail::centroid_alignment(
      per_class, centroids, first_layer, skipped, [&](const BasicTensor<T>& t, bool is_mean, int c) {
        const double sd = is_mean ? d.mean_std : d.var_std;
        if (sd == 0.0) return t;
        auto it = streams.find(c);
        if (it == streams.end()) {
          std::seed_seq seq{base, static_cast<std::uint64_t>(static_cast<std::uint32_t>(c))};
          it = streams.emplace(c, std::mt19937_64(seq)).first;
        }
        BasicTensor<T> noisy = t.detach();
        for (auto& v : noisy.vec()) v = static_cast<T>(v + sd * gauss(it->second));
        return noisy;
      });
}

}  // namespace fdda

#endif  // FDDA_BNS_HPP
