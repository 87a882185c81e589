// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#ifndef FDDA_CONFIG_HPP
#define FDDA_CONFIG_HPP

#include <fstream>
#include <set>
#include <string>

#include "json.hpp"

#include "fdda/dataset.hpp"
#include "fdda/quantized_model.hpp"
#include "fdda/trainer.hpp"

// JSON configuration. Every section and key is optional; unknown keys are
// rejected so typos do not silently fall back to defaults.
//
//   {
//     "seed": 0,
//     "dataset":  {"num_classes", "image_shape", "samples_per_class", "noise_std", "seed"},
//     "pretrain": {"epochs", "batch_size", "lr", "momentum", "weight_decay"},
//     "train":    {"warmup_epochs", "total_epochs", "steps_per_epoch", "batch_size",
//                  "lr_generator", "lr_quantized", "generator_lr_step", "generator_lr_gamma",
//                  "weight_decay", "momentum", "mix_ratio", "alpha": [a1..a5],
//                  "upsilon_mean", "upsilon_var", "z_dim", "generator_channels"},
//     "policy":   {"default_bits", "activation_bits", "first_layer_bits", "last_layer_bits"},
//     "ablation": {"no_cbns", "no_dbns", "no_synthetic", "predict_labels", "classes"}
//   }

namespace fdda {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct ToolkitConfig {
  ToyDatasetSpec dataset;
  PretrainConfig pretrain;
  TrainConfig train;
  QuantPolicy policy;
  AblationFlags flags;

  /// Seeds every stage from one value.
  void set_seed(std::uint64_t s) {
    pretrain.seed = s;
    train.seed = s;
  }

  void validate() const {
    try {
      policy.validate();
      train.validate();
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    if (dataset.num_classes < 2) throw ConfigError("config: dataset.num_classes must be at least 2");
    if (dataset.noise_std < 0) throw ConfigError("config: dataset.noise_std must be non-negative");
    if (pretrain.batch_size == 0) throw ConfigError("config: pretrain.batch_size must be positive");
    if (flags.classes && *flags.classes > dataset.num_classes)
      throw ConfigError("config: ablation.classes exceeds the number of classes");
  }
};

namespace detail {

using CJson = nlohmann::json;

inline void check_keys(const CJson& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ConfigError("config: unknown key '" + where + "." + k + "'");
}

template <typename U>
void read(const CJson& j, const char* key, U& out) {
  if (j.contains(key)) out = j.at(key).get<U>();
}

}  // namespace detail

inline ToolkitConfig parse_config(const nlohmann::json& j) {
  using detail::read;
  ToolkitConfig c;
  try {
    detail::check_keys(j, "", {"seed", "dataset", "pretrain", "train", "policy", "ablation"});
    if (j.contains("seed")) c.set_seed(j.at("seed").get<std::uint64_t>());
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      detail::check_keys(d, "dataset", {"num_classes", "image_shape", "samples_per_class", "noise_std", "seed"});
      read(d, "num_classes", c.dataset.num_classes);
      read(d, "image_shape", c.dataset.image_shape);
      read(d, "samples_per_class", c.dataset.samples_per_class);
      read(d, "noise_std", c.dataset.noise_std);
      read(d, "seed", c.dataset.seed);
    }
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      detail::check_keys(p, "pretrain", {"epochs", "batch_size", "lr", "momentum", "weight_decay"});
      read(p, "epochs", c.pretrain.epochs);
      read(p, "batch_size", c.pretrain.batch_size);
      read(p, "lr", c.pretrain.lr);
      read(p, "momentum", c.pretrain.momentum);
      read(p, "weight_decay", c.pretrain.weight_decay);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      auto& r = c.train;
      detail::check_keys(t, "train",
                         {"warmup_epochs", "total_epochs", "steps_per_epoch", "batch_size", "lr_generator",
                          "lr_quantized", "generator_lr_step", "generator_lr_gamma", "weight_decay", "momentum",
                          "mix_ratio", "alpha", "upsilon_mean", "upsilon_var", "z_dim", "generator_channels"});
      read(t, "warmup_epochs", r.warmup_epochs);
      read(t, "total_epochs", r.total_epochs);
      read(t, "steps_per_epoch", r.steps_per_epoch);
      read(t, "batch_size", r.batch_size);
      read(t, "lr_generator", r.lr_generator);
      read(t, "lr_quantized", r.lr_quantized);
      read(t, "generator_lr_step", r.generator_lr_step);
      read(t, "generator_lr_gamma", r.generator_lr_gamma);
      read(t, "weight_decay", r.weight_decay);
      read(t, "momentum", r.momentum);
      read(t, "mix_ratio", r.mix_ratio);
      if (t.contains("alpha")) {
        const auto a = t.at("alpha").get<std::vector<double>>();
        if (a.size() != 5) throw ConfigError("config: train.alpha needs 5 entries, got " + std::to_string(a.size()));
        r.weights = LossWeights{a[0], a[1], a[2], a[3], a[4]};
      }
      read(t, "upsilon_mean", r.distortion.mean_std);
      read(t, "upsilon_var", r.distortion.var_std);
      read(t, "z_dim", r.z_dim);
      read(t, "generator_channels", r.generator_channels);
    }
    if (j.contains("policy")) {
      const auto& p = j.at("policy");
      detail::check_keys(p, "policy", {"default_bits", "activation_bits", "first_layer_bits", "last_layer_bits"});
      read(p, "default_bits", c.policy.default_bits);
      read(p, "activation_bits", c.policy.activation_bits);
      read(p, "first_layer_bits", c.policy.first_layer_bits);
      read(p, "last_layer_bits", c.policy.last_layer_bits);
    }
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      detail::check_keys(a, "ablation", {"no_cbns", "no_dbns", "no_synthetic", "predict_labels", "classes"});
      read(a, "no_cbns", c.flags.no_cbns);
      read(a, "no_dbns", c.flags.no_dbns);
      read(a, "no_synthetic", c.flags.no_synthetic);
      read(a, "predict_labels", c.flags.predict_labels);
      if (a.contains("classes") && !a.at("classes").is_null()) c.flags.classes = a.at("classes").get<std::size_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ToolkitConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

}  // namespace fdda

#endif  // FDDA_CONFIG_HPP
