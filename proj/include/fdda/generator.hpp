// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#ifndef FDDA_GENERATOR_HPP
#define FDDA_GENERATOR_HPP

#include <algorithm>
#include <map>
#include <random>
#include <vector>

#include "fdda/bns.hpp"
#include "fdda/network.hpp"
#include "fdda/ops.hpp"

namespace fdda {

struct GeneratorSpec {
  std::size_t z_dim = 32;
  std::size_t num_classes = 8;
  Shape image_shape{1, 16, 16};
  std::size_t channels = 16;
};

/// Trade-off weights of the generator objective (α1..α4) and of the
/// quantized-model objective (α5).
struct LossWeights {
  double ce = 0.5;     // α1
  double bns = 0.2;    // α2
  double dbns = 0.9;   // α3
  double cbns = 0.05;  // α4
  double kd = 20.0;    // α5

  void validate() const {
    for (double a : {ce, bns, dbns, cbns, kd})
      if (a < 0) throw Error("loss weights must be non-negative");
  }
};

/// Label-conditioned generator G(z|y): the noise is multiplied by a learned
/// label embedding, projected, reshaped and upsampled twice through
/// conv-BN-ReLU blocks to a tanh image.
template <typename T>
class GeneratorNet {
 public:
  GeneratorNet() = default;

  explicit GeneratorNet(const GeneratorSpec& spec) : spec_(spec) {
    const auto& s = spec.image_shape;
    if (s.size() != 3 || s[1] % 4 || s[2] % 4)
      throw ShapeError("generator: image extent must be divisible by 4, got " + to_string(s));
    const std::size_t c = spec.channels, h0 = s[1] / 4, w0 = s[2] / 4;
    embedding_ = BasicTensor<T>(Shape{spec.num_classes, spec.z_dim});
    embedding_.set_requires_grad(true);
    backbone_ = Network<T>(
        {spec.z_dim},
        {LayerSpec::dense(spec.z_dim, c * h0 * w0), LayerSpec::reshape({c, h0, w0}),
         LayerSpec::batchnorm(c), LayerSpec::upsample(2), LayerSpec::conv(c, c, 3, 1, 1),
         LayerSpec::batchnorm(c), LayerSpec::relu(), LayerSpec::upsample(2),
         LayerSpec::conv(c, c / 2, 3, 1, 1), LayerSpec::batchnorm(c / 2), LayerSpec::relu(),
         LayerSpec::conv(c / 2, s[0], 3, 1, 1), LayerSpec::batchnorm(s[0]), LayerSpec::tanh()});
  }

  GeneratorNet(const GeneratorNet& o) : spec_(o.spec_), embedding_(o.embedding_.clone()), backbone_(o.backbone_) {}
  GeneratorNet& operator=(const GeneratorNet& o) {
    spec_ = o.spec_;
    embedding_ = o.embedding_.clone();
    backbone_ = o.backbone_;
    return *this;
  }
  GeneratorNet(GeneratorNet&&) noexcept = default;
  GeneratorNet& operator=(GeneratorNet&&) noexcept = default;

  template <typename Rng>
  void init(Rng& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& v : embedding_.vec()) v = static_cast<T>(nd(rng));
    backbone_.init(rng);
  }

  /// Images for noise z[B, z_dim] and labels; BN uses batch statistics.
  BasicTensor<T> forward(const BasicTensor<T>& z, const std::vector<int>& labels) {
    if (z.rank() != 2 || z.dim(0) != labels.size() || z.dim(1) != spec_.z_dim)
      throw ShapeError("generator: noise " + to_string(z.shape()) + " vs " + std::to_string(labels.size()) + " labels");
    ForwardOptions opt;
    opt.bn_mode = BnMode::Train;
    return backbone_.forward(mul(z, embedding(embedding_, labels)), opt).output;
  }

  std::vector<BasicTensor<T>> parameters() const {
    auto p = backbone_.parameters();
    p.insert(p.begin(), embedding_);
    return p;
  }
  std::vector<BasicTensor<T>> weight_parameters() const { return backbone_.weight_parameters(); }
  void zero_grad() {
    embedding_.zero_grad();
    backbone_.zero_grad();
  }

  const GeneratorSpec& spec() const { return spec_; }
  BasicTensor<T>& embedding_table() { return embedding_; }
  const BasicTensor<T>& embedding_table() const { return embedding_; }
  Network<T>& backbone() { return backbone_; }
  const Network<T>& backbone() const { return backbone_; }

 private:
  GeneratorSpec spec_;
  BasicTensor<T> embedding_;
  Network<T> backbone_;
};

template <typename T, typename Rng>
BasicTensor<T> sample_noise(std::size_t batch, std::size_t z_dim, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  BasicTensor<T> z(Shape{batch, z_dim});
  for (auto& v : z.vec()) v = static_cast<T>(nd(rng));
  return z;
}

/// Synthesizes one image per label from standard-normal noise.
template <typename T, typename Rng>
BasicTensor<T> generate(GeneratorNet<T>& g, const std::vector<int>& labels, Rng& rng) {
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= g.spec().num_classes)
      throw Error("generate: label " + std::to_string(y) + " out of range");
  auto z = sample_noise<T>(labels.size(), g.spec().z_dim, rng);
  NoGradGuard ng;
  return g.forward(z, labels);
}

/// Labels drawn uniformly from `classes`, stratified so every class appears
/// at least once when the batch is large enough.
template <typename Rng>
std::vector<int> sample_labels(std::size_t batch, const std::vector<int>& classes, Rng& rng) {
  if (classes.empty()) throw Error("sample_labels: no classes to sample");
  std::vector<int> out;
  out.reserve(batch);
  const std::size_t k = classes.size();
  for (std::size_t i = 0; i < (batch / k) * k; ++i) out.push_back(classes[i % k]);
  std::uniform_int_distribution<std::size_t> pick(0, k - 1);
  while (out.size() < batch) out.push_back(classes[pick(rng)]);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

/// Argmax of the classifier's logits; ties go to the smaller class index.
template <typename T>
std::vector<int> predict_labels(Network<T>& classifier, const BasicTensor<T>& images) {
  return argmax_rows(predict_logits(classifier, images));
}

template <typename T>
struct GeneratorLoss {
  BasicTensor<T> total;
  double ce = 0, bns = 0, dbns = 0, cbns = 0;
  std::size_t skipped_classes = 0;
};

/// Weighted generator objective α1·CE + α2·BNS + α3·D-BNS + α4·C-BNS.
///
/// One forward pass through the frozen classifier (eval-mode BN) yields the
/// logits and every BN input; statistics are measured on those inputs. Terms
/// with zero weight are skipped. Classes without a centroid contribute no
/// C-BNS or D-BNS term.
template <typename T, typename Rng>
GeneratorLoss<T> generator_total_loss(const BasicTensor<T>& images, const std::vector<int>& labels,
                                      Network<T>& classifier, const BnRunningStats<T>& running,
                                      const ClassCentroids<T>& centroids, const LossWeights& w,
                                      const DistortionParams& d, std::size_t first_layer, Rng& rng) {
  ForwardOptions opt;
  opt.capture_bn_inputs = true;
  opt.quantize = false;
  auto res = classifier.forward(images, opt);

  GeneratorLoss<T> out;
  out.total = BasicTensor<T>::scalar(T(0));
  auto accumulate = [&](double weight, const BasicTensor<T>& term, double& slot) {
    slot = static_cast<double>(term.item());
    out.total = add(out.total, scale(term, static_cast<T>(weight)));
  };
  if (w.ce > 0) accumulate(w.ce, softmax_cross_entropy(res.output, labels), out.ce);
  if (w.bns > 0) accumulate(w.bns, bns_loss(batch_bn_stats(res.bn_inputs), running), out.bns);
  if ((w.dbns > 0 || w.cbns > 0) && !centroids.available_classes.empty()) {
    const auto per_class = class_bn_stats(res.bn_inputs, labels, first_layer);
    if (w.dbns > 0)
      accumulate(w.dbns, dbns_loss(per_class, centroids, first_layer, d, rng, &out.skipped_classes), out.dbns);
    if (w.cbns > 0)
      accumulate(w.cbns, cbns_loss(per_class, centroids, first_layer, &out.skipped_classes), out.cbns);
  }
  return out;
}

}  // namespace fdda

#endif  // FDDA_GENERATOR_HPP
