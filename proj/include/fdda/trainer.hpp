// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#ifndef FDDA_TRAINER_HPP
#define FDDA_TRAINER_HPP

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "fdda/bns.hpp"
#include "fdda/dataset.hpp"
#include "fdda/generator.hpp"
#include "fdda/network.hpp"
#include "fdda/optim.hpp"
#include "fdda/quantized_model.hpp"

namespace fdda {

enum class LrScheduleKind { Step, Cosine };

/// step: lr0 * gamma^floor(epoch / step_size); cosine: lr0 * (1 + cos(pi * epoch / total)) / 2.
inline double lr_schedule(LrScheduleKind kind, double lr0, double epoch, double total_epochs,
                          double step_size = 100, double gamma = 0.1) {
  if (kind == LrScheduleKind::Step) return lr0 * std::pow(gamma, std::floor(epoch / step_size));
  if (total_epochs <= 0) return lr0;
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / total_epochs));
}

struct AblationFlags {
  bool no_cbns = false;
  bool no_dbns = false;
  bool no_synthetic = false;
  bool predict_labels = false;
  std::optional<std::size_t> classes;  // number of available classes, recorded only
};

struct TrainConfig {
  std::size_t warmup_epochs = 10;
  std::size_t total_epochs = 60;
  std::size_t steps_per_epoch = 25;
  std::size_t batch_size = 64;
  double lr_generator = 1e-2;
  double lr_quantized = 1e-4;
  double generator_lr_step = 100;  // epochs between ×generator_lr_gamma decays
  double generator_lr_gamma = 0.1;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  double mix_ratio = 0.25;
  std::uint64_t seed = 0;
  LossWeights weights;
  DistortionParams distortion;
  std::size_t z_dim = 64;
  std::size_t generator_channels = 16;

  void validate() const {
    if (batch_size == 0) throw Error("config: batch_size must be positive");
    if (steps_per_epoch == 0) throw Error("config: steps_per_epoch must be positive");
    if (mix_ratio < 0 || mix_ratio > 1) throw Error("config: mix_ratio must lie in [0, 1]");
    if (lr_generator < 0 || lr_quantized < 0) throw Error("config: learning rates must be non-negative");
    if (weight_decay < 0 || momentum < 0) throw Error("config: weight_decay and momentum must be non-negative");
    if (distortion.mean_std < 0 || distortion.var_std < 0) throw Error("config: distortion std must be non-negative");
    if (z_dim == 0 || generator_channels < 2) throw Error("config: generator too small");
    weights.validate();
  }
};

template <typename T>
struct QuantLoss {
  BasicTensor<T> total;
  double ce = 0, kd = 0;
};

/// CE(Q(x), y) + α5 · KL(F(x) ‖ Q(x)); F runs without recording.
template <typename T>
QuantLoss<T> quantized_model_loss(Network<T>& q, Network<T>& f, const BasicTensor<T>& images,
                                  const std::vector<int>& labels, const LossWeights& w) {
  if (images.rank() == 0 || images.dim(0) == 0) throw Error("quantized_model_loss: empty batch");
  BasicTensor<T> teacher;
  {
    NoGradGuard ng;
    teacher = f.forward(images, ForwardOptions{.quantize = false}).output;
  }
  const auto student = q.forward(images).output;
  QuantLoss<T> out;
  out.total = softmax_cross_entropy(student, labels);
  out.ce = static_cast<double>(out.total.item());
  if (w.kd > 0) {
    const auto kd = kl_divergence(student, teacher);
    out.kd = static_cast<double>(kd.item());
    out.total = add(out.total, scale(kd, static_cast<T>(w.kd)));
  }
  return out;
}

/// Top-1 accuracy with eval-mode BN and all configured quantizers active.
template <typename T>
double evaluate(Network<T>& model, const LabeledSet& data, std::size_t chunk = 256) {
  if (data.size() == 0) throw Error("evaluate: empty dataset");
  std::size_t correct = 0;
  for (std::size_t b = 0; b < data.size(); b += chunk) {
    const auto part = data.slice(b, std::min(data.size(), b + chunk));
    const auto pred = predict_labels(model, tensor_cast<T>(part.images));
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == part.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Toy classifier with six conv-BN-ReLU blocks, global pooling and a dense head.
inline std::vector<LayerSpec> toy_classifier_specs(std::size_t num_classes, std::size_t in_channels = 1) {
  auto block = [](std::vector<LayerSpec>& v, std::size_t in, std::size_t out) {
    v.push_back(LayerSpec::conv(in, out, 3, 1, 1));
    v.push_back(LayerSpec::batchnorm(out));
    v.push_back(LayerSpec::relu());
  };
  std::vector<LayerSpec> s;
  block(s, in_channels, 8);
  s.push_back(LayerSpec::avgpool(2));
  block(s, 8, 12);
  block(s, 12, 12);
  s.push_back(LayerSpec::avgpool(2));
  block(s, 12, 24);
  block(s, 24, 24);
  block(s, 24, 24);
  s.push_back(LayerSpec::avgpool(4));
  s.push_back(LayerSpec::flatten());
  s.push_back(LayerSpec::dense(24, num_classes));
  return s;
}

struct PretrainConfig {
  std::size_t epochs = 12;
  std::size_t batch_size = 32;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

namespace detail {

/// true for weight matrices and kernels, in Network::parameters() order.
template <typename T>
std::vector<bool> decay_mask(const Network<T>& net) {
  std::vector<bool> mask;
  for (const auto& l : net.layers())
    for (std::size_t i = 0; i < l.params.size(); ++i) mask.push_back(l.spec.is_weighted() && i == 0);
  return mask;
}

}  // namespace detail

/// Trains a float classifier with Nesterov SGD and a cosine schedule.
inline Network<float> pretrain_classifier(const LabeledSet& train, std::size_t num_classes,
                                          const PretrainConfig& cfg) {
  if (train.size() == 0) throw Error("pretrain: empty training set");
  std::mt19937_64 rng(cfg.seed);
  const Shape in = train.sample_shape();
  Network<float> net(in, toy_classifier_specs(num_classes, in[0]));
  net.init(rng);
  Sgd<float> opt(net.parameters(), detail::decay_mask(net), cfg.momentum, cfg.weight_decay);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  ForwardOptions fo{.bn_mode = BnMode::Train, .update_running = true};
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = lr_schedule(LrScheduleKind::Cosine, cfg.lr, static_cast<double>(e), static_cast<double>(cfg.epochs));
    for (std::size_t b = 0; b + 1 < train.size(); b += cfg.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(train.size(), b + cfg.batch_size)));
      const auto batch = train.subset(idx);
      opt.zero_grad();
      backward(softmax_cross_entropy(net.forward(batch.images, fo).output, batch.labels));
      opt.step(lr);
    }
  }
  return net;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss_g = 0;
  double loss_q = 0;
  double acc = 0;
  bool q_skipped = false;  // no data for the quantized model this epoch
};

/// Mutable state shared by warm-up and the alternating epochs.
struct FddaState {
  Network<float> teacher;
  Network<float> q;
  GeneratorNet<float> g;
  CalibrationSet calib;
  BnRunningStats<float> running;
  ClassCentroids<float> centroids;
  std::size_t first_layer = 1;  // K
  std::vector<int> classes;     // generator label domain
  LossWeights weights;          // after ablation flags
  AblationFlags flags;
  std::mt19937_64 rng;
  Adam<float> g_opt;
  Sgd<float> q_opt;
};

namespace detail {

inline double generator_step(FddaState& s, const TrainConfig& cfg, double lr) {
  const auto labels = sample_labels(cfg.batch_size, s.classes, s.rng);
  const auto z = sample_noise<float>(cfg.batch_size, s.g.spec().z_dim, s.rng);
  s.g_opt.zero_grad();
  auto images = s.g.forward(z, labels);
  auto loss = generator_total_loss(images, labels, s.teacher, s.running, s.centroids, s.weights, cfg.distortion,
                                   s.first_layer, s.rng);
  const double v = static_cast<double>(loss.total.item());
  if (loss.total.requires_grad()) {
    backward(loss.total);
    s.g_opt.step(lr);
  }
  return v;
}

inline LabeledSet concat(const LabeledSet& a, const LabeledSet& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  Shape sh = a.images.shape();
  sh[0] = a.size() + b.size();
  LabeledSet out{Tensor(sh), a.labels};
  std::copy(a.images.data().begin(), a.images.data().end(), out.images.data().begin());
  std::copy(b.images.data().begin(), b.images.data().end(),
            out.images.data().begin() + static_cast<std::ptrdiff_t>(a.images.size()));
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

/// Calibration samples drawn with replacement plus a fresh synthetic batch.
inline LabeledSet quantized_batch(FddaState& s, const TrainConfig& cfg) {
  const bool synth = !s.flags.no_synthetic;
  std::size_t n_cal = 0;
  if (!s.calib.empty())
    n_cal = synth ? static_cast<std::size_t>(std::lround(cfg.mix_ratio * static_cast<double>(cfg.batch_size)))
                  : (cfg.mix_ratio > 0 ? cfg.batch_size : 0);
  LabeledSet cal;
  if (n_cal > 0) {
    std::uniform_int_distribution<std::size_t> pick(0, s.calib.items.size() - 1);
    std::vector<std::size_t> idx(n_cal);
    for (auto& i : idx) i = pick(s.rng);
    cal = s.calib.items.subset(idx);
  }
  LabeledSet syn;
  if (synth && cfg.batch_size > n_cal) {
    syn.labels = sample_labels(cfg.batch_size - n_cal, s.classes, s.rng);
    syn.images = generate(s.g, syn.labels, s.rng);
  }
  return concat(cal, syn);
}

}  // namespace detail

/// Adam updates of the generator on its total loss; Q is untouched.
/// Returns the mean generator loss of the last warm-up epoch (0 if none).
inline double warmup_generator(FddaState& s, const TrainConfig& cfg) {
  double last = 0;
  if (s.flags.no_synthetic) return last;
  for (std::size_t e = 0; e < cfg.warmup_epochs; ++e) {
    const double lr = lr_schedule(LrScheduleKind::Step, cfg.lr_generator, static_cast<double>(e), 0,
                                  cfg.generator_lr_step, cfg.generator_lr_gamma);
    double sum = 0;
    for (std::size_t i = 0; i < cfg.steps_per_epoch; ++i) sum += detail::generator_step(s, cfg, lr);
    last = sum / static_cast<double>(cfg.steps_per_epoch);
  }
  return last;
}

/// One epoch of alternating updates: a generator step, then a quantized-model
/// step on calibration plus fresh synthetic data.
inline EpochMetrics train_epoch(FddaState& s, const TrainConfig& cfg, std::size_t epoch) {
  EpochMetrics m;
  m.epoch = epoch;
  const double e = static_cast<double>(epoch);
  const double lr_g = lr_schedule(LrScheduleKind::Step, cfg.lr_generator, e + static_cast<double>(cfg.warmup_epochs),
                                  0, cfg.generator_lr_step, cfg.generator_lr_gamma);
  const double lr_q = lr_schedule(LrScheduleKind::Cosine, cfg.lr_quantized, e, static_cast<double>(cfg.total_epochs));
  std::size_t q_steps = 0;
  for (std::size_t i = 0; i < cfg.steps_per_epoch; ++i) {
    if (!s.flags.no_synthetic) m.loss_g += detail::generator_step(s, cfg, lr_g);
    const auto batch = detail::quantized_batch(s, cfg);
    if (batch.size() == 0) continue;
    s.q_opt.zero_grad();
    auto loss = quantized_model_loss(s.q, s.teacher, batch.images, batch.labels, s.weights);
    m.loss_q += static_cast<double>(loss.total.item());
    backward(loss.total);
    s.q_opt.step(lr_q);
    ++q_steps;
  }
  m.loss_g /= static_cast<double>(cfg.steps_per_epoch);
  m.q_skipped = q_steps == 0;
  if (q_steps) m.loss_q /= static_cast<double>(q_steps);
  return m;
}

/// Replaces calibration labels by the classifier's predictions, keeping the
/// first image of each predicted class.
inline CalibrationSet relabel_with_predictions(Network<float>& f, const CalibrationSet& calib) {
  if (calib.empty()) return calib;
  const auto pred = predict_labels(f, calib.items.images);
  std::vector<std::size_t> keep;
  std::set<int> seen;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (seen.insert(pred[i]).second) keep.push_back(i);
  CalibrationSet out;
  out.num_classes = calib.num_classes;
  out.items = calib.items.subset(keep);
  for (std::size_t i = 0; i < keep.size(); ++i) out.items.labels[i] = pred[keep[i]];
  out.predicted.assign(keep.size(), true);
  return out;
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"warmup_epochs", c.warmup_epochs},
          {"total_epochs", c.total_epochs},
          {"steps_per_epoch", c.steps_per_epoch},
          {"batch_size", c.batch_size},
          {"lr_generator", c.lr_generator},
          {"lr_quantized", c.lr_quantized},
          {"generator_lr_step", c.generator_lr_step},
          {"generator_lr_gamma", c.generator_lr_gamma},
          {"weight_decay", c.weight_decay},
          {"momentum", c.momentum},
          {"mix_ratio", c.mix_ratio},
          {"seed", c.seed},
          {"alpha", {c.weights.ce, c.weights.bns, c.weights.dbns, c.weights.cbns, c.weights.kd}},
          {"upsilon_mean", c.distortion.mean_std},
          {"upsilon_var", c.distortion.var_std},
          {"z_dim", c.z_dim},
          {"generator_channels", c.generator_channels}};
}

inline nlohmann::ordered_json to_json(const QuantPolicy& p) {
  return {{"default_bits", p.default_bits},
          {"activation_bits", p.activation_bits},
          {"first_layer_bits", p.first_layer_bits},
          {"last_layer_bits", p.last_layer_bits}};
}

inline nlohmann::ordered_json to_json(const AblationFlags& f) {
  nlohmann::ordered_json j{{"no_cbns", f.no_cbns},
                           {"no_dbns", f.no_dbns},
                           {"no_synthetic", f.no_synthetic},
                           {"predict_labels", f.predict_labels}};
  j["classes"] = f.classes ? nlohmann::ordered_json(*f.classes) : nlohmann::ordered_json(nullptr);
  return j;
}

struct FddaResult {
  Network<float> best_q;
  GeneratorNet<float> generator;
  BnRunningStats<float> running;
  ClassCentroids<float> centroids;
  std::vector<EpochMetrics> epochs;
  double final_acc = 0;
  double best_acc = 0;
  double last_acc = 0;
  std::size_t best_epoch = 0;
  std::size_t skipped_epochs = 0;  // epochs without any quantized-model update
  nlohmann::ordered_json report;
};

/// Builds Q, the generator, running statistics and centroids for a teacher.
/// Activation bounds are not calibrated here.
inline FddaState make_fdda_state(const Network<float>& teacher, const CalibrationSet& calibration,
                                 const TrainConfig& cfg, const QuantPolicy& policy, const AblationFlags& flags) {
  cfg.validate();
  policy.validate();
  Network<float> f = teacher;
  f.set_trainable(false);
  const std::size_t num_classes = f.output_shape().at(0);
  CalibrationSet calib = flags.predict_labels ? relabel_with_predictions(f, calibration) : calibration;
  calib.num_classes = num_classes;

  Network<float> q = make_quantized(f, policy);
  q.set_trainable(true);
  GeneratorSpec gs{cfg.z_dim, num_classes, f.input_shape(), cfg.generator_channels};
  GeneratorNet<float> g(gs);
  std::mt19937_64 rng(cfg.seed);
  g.init(rng);

  auto running = collect_running_stats(f);
  const std::size_t k = deep_layer_start(running.layers());
  auto centroids = build_class_centroids(f, calib, k);

  LossWeights w = cfg.weights;
  if (flags.no_cbns) w.cbns = 0;
  if (flags.no_dbns) w.dbns = 0;
  std::vector<int> classes(num_classes);
  std::iota(classes.begin(), classes.end(), 0);

  auto g_params = g.parameters();
  auto q_params = q.parameters();
  auto q_mask = detail::decay_mask(q);
  return FddaState{std::move(f),
                   std::move(q),
                   std::move(g),
                   std::move(calib),
                   std::move(running),
                   std::move(centroids),
                   k,
                   std::move(classes),
                   w,
                   flags,
                   std::move(rng),
                   Adam<float>(g_params),
                   Sgd<float>(q_params, q_mask, cfg.momentum, cfg.weight_decay)};
}

/// Full procedure on an in-memory teacher: quantize, calibrate activation
/// bounds, build centroids, warm up the generator, alternate updates for
/// total_epochs and keep the Q with the best test accuracy.
inline FddaResult run_fdda(const Network<float>& teacher, const CalibrationSet& calibration, const LabeledSet& test,
                           const TrainConfig& cfg, const QuantPolicy& policy, const AblationFlags& flags) {
  FddaState s = make_fdda_state(teacher, calibration, cfg, policy, flags);
  const std::size_t k = s.first_layer;
  if (!s.calib.empty()) calibrate_activation_bounds(s.q, s.calib.items.images, policy);
  warmup_generator(s, cfg);
  if (s.calib.empty()) {
    if (s.flags.no_synthetic) throw Error("run_fdda: no calibration data and synthetic data disabled");
    const auto labels = sample_labels(cfg.batch_size, s.classes, s.rng);
    calibrate_activation_bounds(s.q, generate(s.g, labels, s.rng), policy);
  }

  FddaResult r;
  r.best_q = s.q;
  r.best_acc = -1;
  nlohmann::ordered_json per_epoch = nlohmann::ordered_json::array();
  for (std::size_t e = 0; e < cfg.total_epochs; ++e) {
    auto m = train_epoch(s, cfg, e);
    m.acc = evaluate(s.q, test);
    if (m.acc > r.best_acc) {
      r.best_acc = m.acc;
      r.best_epoch = e;
      r.best_q = s.q;
    }
    per_epoch.push_back({{"epoch", m.epoch}, {"lossG", m.loss_g}, {"lossQ", m.loss_q}, {"acc", m.acc}});
    r.last_acc = m.acc;
    r.skipped_epochs += m.q_skipped;
    r.epochs.push_back(m);
  }
  if (cfg.total_epochs == 0) r.best_acc = r.last_acc = evaluate(s.q, test);
  r.final_acc = r.best_acc;
  r.generator = s.g;
  r.running = s.running;
  r.centroids = s.centroids;

  std::vector<int> avail(s.centroids.available_classes.begin(), s.centroids.available_classes.end());
  r.report = {{"config", to_json(cfg)},
              {"policy", to_json(policy)},
              {"flags", to_json(flags)},
              {"first_deep_layer", k},
              {"bn_layers", s.running.layers()},
              {"available_classes", avail},
              {"per_epoch", per_epoch},
              {"final_acc", r.final_acc},
              {"last_acc", r.last_acc},
              {"best_epoch", r.best_epoch},
              {"q_skipped_epochs", r.skipped_epochs}};
  return r;
}

}  // namespace fdda

#endif  // FDDA_TRAINER_HPP
