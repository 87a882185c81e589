// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

// Command-line driver: pretrain, quantize, analyze-bns, eval.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "fdda/fdda.hpp"

namespace {

using namespace fdda;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON configuration file")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "random seed (overrides the config)");
}

ToolkitConfig resolve(const Common& c) {
  ToolkitConfig cfg = c.config.empty() ? ToolkitConfig{} : load_config(c.config);
  if (c.seed) cfg.set_seed(*c.seed);
  return cfg;
}

nlohmann::ordered_json dataset_json(const ToyDatasetSpec& d) {
  return {{"num_classes", d.num_classes},
          {"image_shape", d.image_shape},
          {"samples_per_class", d.samples_per_class},
          {"noise_std", d.noise_std},
          {"seed", d.seed}};
}

/// Dataset the archived model was trained on; falls back to the config.
ToyDatasetSpec dataset_of(const ModelArchive& a, const ToyDatasetSpec& fallback) {
  if (!a.metadata.contains("dataset")) return fallback;
  const auto& d = a.metadata.at("dataset");
  ToyDatasetSpec s;
  s.num_classes = d.at("num_classes").get<std::size_t>();
  s.image_shape = d.at("image_shape").get<Shape>();
  s.samples_per_class = d.at("samples_per_class").get<std::size_t>();
  s.noise_std = d.at("noise_std").get<double>();
  s.seed = d.at("seed").get<std::uint64_t>();
  return s;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw IoError("write failed for '" + path + "'");
}

int cmd_pretrain(const Common& common, const std::string& out, std::optional<std::size_t> epochs) {
  ToolkitConfig cfg = resolve(common);
  if (epochs) cfg.pretrain.epochs = *epochs;
  cfg.validate();
  const auto [train, test] = make_toy_dataset(cfg.dataset);
  Network<float> f = pretrain_classifier(train, cfg.dataset.num_classes, cfg.pretrain);
  const double train_acc = evaluate(f, train), test_acc = evaluate(f, test);
  ModelArchive a;
  a.running = collect_running_stats(f);
  a.model = std::move(f);
  a.metadata = {{"role", "full-precision"},
                {"dataset", dataset_json(cfg.dataset)},
                {"seed", cfg.pretrain.seed},
                {"train_acc", train_acc},
                {"test_acc", test_acc}};
  save_archive(a, out);
  std::printf("pretrained: train_acc=%.4f test_acc=%.4f bn_layers=%zu -> %s\n", train_acc, test_acc,
              a.model.bn_layer_count(), out.c_str());
  return 0;
}

struct QuantizeArgs {
  std::string model, out, report;
  std::optional<int> wbits, abits, first_bits, last_bits;
  bool no_cbns = false, no_dbns = false, no_synthetic = false, predict_labels = false;
  std::optional<std::size_t> classes;
  std::optional<std::size_t> epochs, warmup;
};

int cmd_quantize(const Common& common, const QuantizeArgs& q) {
  ToolkitConfig cfg = resolve(common);
  if (q.wbits) cfg.policy.default_bits = *q.wbits;
  if (q.abits) cfg.policy.activation_bits = *q.abits;
  if (q.first_bits) cfg.policy.first_layer_bits = *q.first_bits;
  if (q.last_bits) cfg.policy.last_layer_bits = *q.last_bits;
  if (q.epochs) cfg.train.total_epochs = *q.epochs;
  if (q.warmup) cfg.train.warmup_epochs = *q.warmup;
  cfg.flags.no_cbns |= q.no_cbns;
  cfg.flags.no_dbns |= q.no_dbns;
  cfg.flags.no_synthetic |= q.no_synthetic;
  cfg.flags.predict_labels |= q.predict_labels;
  if (q.classes) cfg.flags.classes = *q.classes;

  const ModelArchive f = load_archive(q.model);
  cfg.dataset = dataset_of(f, cfg.dataset);
  cfg.validate();
  const auto [train, test] = make_toy_dataset(cfg.dataset);
  std::vector<int> classes(cfg.flags.classes.value_or(cfg.dataset.num_classes));
  std::iota(classes.begin(), classes.end(), 0);
  const CalibrationSet calib = extract_calibration(train, cfg.dataset.num_classes, classes);

  FddaResult r = run_fdda(f.model, calib, test, cfg.train, cfg.policy, cfg.flags);
  if (!q.out.empty()) {
    ModelArchive out;
    out.model = r.best_q;
    out.running = r.running;
    out.centroids = r.centroids;
    out.generator = r.generator;
    out.metadata = {{"role", "quantized"}, {"dataset", dataset_json(cfg.dataset)}, {"final_acc", r.final_acc}};
    save_archive(out, q.out);
  }
  const std::string text = r.report.dump(2) + "\n";
  if (q.report.empty())
    std::cout << text;
  else
    write_text(q.report, text);
  std::fprintf(stderr, "quantized: final_acc=%.4f best_epoch=%zu\n", r.final_acc, r.best_epoch);
  return 0;
}

int cmd_analyze(const Common& common, const std::string& model, const std::string& csv, std::optional<std::size_t> layer) {
  ToolkitConfig cfg = resolve(common);
  ModelArchive a = load_archive(model);
  cfg.dataset = dataset_of(a, cfg.dataset);
  const auto [train, test] = make_toy_dataset(cfg.dataset);
  const auto ds = collect_labeled_bns(a.model, test);
  const auto sc_mean = mean_silhouette_per_layer(ds, BnsStat::Mean);
  const auto sc_var = mean_silhouette_per_layer(ds, BnsStat::Variance);
  std::printf("layer,sc_mean,sc_var\n");
  for (std::size_t l = 0; l < sc_mean.size(); ++l) std::printf("%zu,%.6f,%.6f\n", l + 1, sc_mean[l], sc_var[l]);
  if (!csv.empty()) export_bns_csv(ds, layer.value_or(ds.layers()), csv);
  return 0;
}

int cmd_eval(const Common& common, const std::string& model) {
  ToolkitConfig cfg = resolve(common);
  ModelArchive a = load_archive(model);
  cfg.dataset = dataset_of(a, cfg.dataset);
  const auto [train, test] = make_toy_dataset(cfg.dataset);
  std::printf("accuracy=%.6f samples=%zu\n", evaluate(a.model, test), test.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Post-training quantization with fine-grained BN-statistics-aligned synthetic data"};
  app.require_subcommand(1);

  Common pc, qc, ac, ec;
  std::string pre_out;
  std::optional<std::size_t> pre_epochs;
  auto* pre = app.add_subcommand("pretrain", "train the full-precision classifier on the toy dataset");
  add_common(pre, pc);
  pre->add_option("--out", pre_out, "output archive")->required();
  pre->add_option("--epochs", pre_epochs, "training epochs");

  QuantizeArgs qa;
  auto* quant = app.add_subcommand("quantize", "fine-tune a low-bit copy with synthetic and calibration data");
  add_common(quant, qc);
  quant->add_option("--model", qa.model, "full-precision archive")->required();
  quant->add_option("--out", qa.out, "archive for the best quantized model");
  quant->add_option("--report", qa.report, "JSON report path (stdout if omitted)");
  quant->add_option("--wbits", qa.wbits, "interior weight bits");
  quant->add_option("--abits", qa.abits, "activation bits");
  quant->add_option("--first-bits", qa.first_bits, "bits of the first layer");
  quant->add_option("--last-bits", qa.last_bits, "bits of the last layer");
  quant->add_flag("--no-cbns", qa.no_cbns, "drop the centralized per-class loss");
  quant->add_flag("--no-dbns", qa.no_dbns, "drop the distorted per-class loss");
  quant->add_flag("--no-synthetic", qa.no_synthetic, "calibration data only");
  quant->add_flag("--predict-labels", qa.predict_labels, "label calibration images by the classifier");
  quant->add_option("--classes", qa.classes, "number of available classes (0..N-1)");
  quant->add_option("--epochs", qa.epochs, "training epochs after warm-up");
  quant->add_option("--warmup", qa.warmup, "generator warm-up epochs");

  std::string an_model, an_csv;
  std::optional<std::size_t> an_layer;
  auto* analyze = app.add_subcommand("analyze-bns", "per-layer silhouette of per-image BN statistics");
  add_common(analyze, ac);
  analyze->add_option("--model", an_model, "archive to analyze")->required();
  analyze->add_option("--csv", an_csv, "export raw per-image statistics to this CSV");
  analyze->add_option("--layer", an_layer, "BN layer for the CSV export (default: deepest)");

  std::string ev_model;
  auto* ev = app.add_subcommand("eval", "top-1 accuracy on the toy test split");
  add_common(ev, ec);
  ev->add_option("--model", ev_model, "archive to evaluate")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pre) return cmd_pretrain(pc, pre_out, pre_epochs);
    if (*quant) return cmd_quantize(qc, qa);
    if (*analyze) return cmd_analyze(ac, an_model, an_csv, an_layer);
    if (*ev) return cmd_eval(ec, ev_model);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fdda: error: %s\n", e.what());
    return 1;
  }
  return 2;
}
