// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#ifndef FDDA_CLUSTER_HPP
#define FDDA_CLUSTER_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "fdda/bns.hpp"

// Silhouette analysis of per-image BN statistics.

namespace fdda {

using Vec = std::vector<double>;

inline double euclidean(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

inline double mean_distance(const Vec& v, const std::vector<Vec>& cluster) {
  double s = 0;
  for (const auto& u : cluster) s += euclidean(v, u);
  return s / static_cast<double>(cluster.size());
}

/// Silhouette coefficient (b - a) / max(a, b) of `v`.
///
/// `own` must contain `v`; a is the mean distance to the other members of
/// `own`, b the smallest mean distance to any non-empty cluster in `others`.
/// A singleton own cluster scores 0, as does a = b = 0.
inline double silhouette_sample(const Vec& v, const std::vector<Vec>& own, const std::vector<std::vector<Vec>>& others) {
  double b = std::numeric_limits<double>::infinity();
  for (const auto& c : others)
    if (!c.empty()) b = std::min(b, mean_distance(v, c));
  if (!std::isfinite(b)) throw Error("silhouette_sample: no other non-empty cluster");
  if (own.size() <= 1) return 0.0;
  double sum = 0;
  for (const auto& u : own) sum += euclidean(v, u);  // includes v itself at distance 0
  const double a = sum / static_cast<double>(own.size() - 1);
  const double m = std::max(a, b);
  return m > 0 ? (b - a) / m : 0.0;
}

enum class BnsStat { Mean, Variance };

inline const char* stat_name(BnsStat s) { return s == BnsStat::Mean ? "mean" : "variance"; }

/// Per-image BN statistics with their class labels.
struct LabeledBnsDataset {
  std::vector<PerImageBns<float>> samples;
  std::vector<int> labels;

  std::size_t layers() const { return samples.empty() ? 0 : samples.front().size(); }

  /// Vectors of the chosen statistic at BN layer `layer` (1-based), one per sample.
  std::vector<Vec> layer_vectors(std::size_t layer, BnsStat stat) const {
    if (layer < 1 || layer > layers()) throw Error("bns dataset: layer " + std::to_string(layer) + " out of range");
    std::vector<Vec> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
      const auto& t = stat == BnsStat::Mean ? s[layer - 1].mean : s[layer - 1].var;
      out.emplace_back(t.vec().begin(), t.vec().end());
    }
    return out;
  }
};

/// Runs `model` over `images` in chunks and collects per-image statistics.
inline LabeledBnsDataset collect_labeled_bns(Network<float>& model, const LabeledSet& set,
                                             std::size_t chunk = 64) {
  LabeledBnsDataset ds;
  for (std::size_t b = 0; b < set.size(); b += chunk) {
    const auto part = set.slice(b, std::min(set.size(), b + chunk));
    auto stats = per_image_bns_batch(model, part.images);
    for (auto& s : stats) ds.samples.push_back(std::move(s));
    ds.labels.insert(ds.labels.end(), part.labels.begin(), part.labels.end());
  }
  return ds;
}

/// Average silhouette over all samples, per BN layer, with classes as clusters.
inline std::vector<double> mean_silhouette_per_layer(const LabeledBnsDataset& ds, BnsStat stat) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.labels.size(); ++i) by_class[ds.labels[i]].push_back(i);
  if (by_class.size() < 2) throw Error("mean_silhouette_per_layer: need at least 2 classes");
  std::vector<double> out;
  for (std::size_t l = 1; l <= ds.layers(); ++l) {
    const auto vecs = ds.layer_vectors(l, stat);
    std::map<int, std::vector<Vec>> clusters;
    for (const auto& [c, idx] : by_class)
      for (std::size_t i : idx) clusters[c].push_back(vecs[i]);
    double total = 0;
    for (std::size_t i = 0; i < vecs.size(); ++i) {
      std::vector<std::vector<Vec>> others;
      for (const auto& [c, members] : clusters)
        if (c != ds.labels[i]) others.push_back(members);
      total += silhouette_sample(vecs[i], clusters[ds.labels[i]], others);
    }
    out.push_back(total / static_cast<double>(vecs.size()));
  }
  return out;
}

/// CSV with header "label,stat,c0,c1,..." and two rows (mean, variance) per sample.
inline void export_bns_csv(const LabeledBnsDataset& ds, std::size_t layer, const std::string& path) {
  if (!ds.samples.empty() && (layer < 1 || layer > ds.layers()))
    throw Error("export_bns_csv: layer " + std::to_string(layer) + " out of range");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("export_bns_csv: cannot open " + path);
  out << "label,stat";
  const std::size_t channels = ds.samples.empty() ? 0 : ds.samples.front()[layer - 1].mean.size();
  for (std::size_t c = 0; c < channels; ++c) out << ",c" << c;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    for (BnsStat st : {BnsStat::Mean, BnsStat::Variance}) {
      const auto& s = ds.samples[i][layer - 1];
      out << ds.labels[i] << ',' << stat_name(st);
      for (float v : (st == BnsStat::Mean ? s.mean : s.var).data()) {
        std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
        out << ',' << buf;
      }
      out << '\n';
    }
  if (!out) throw Error("export_bns_csv: write failed for " + path);
}

}  // namespace fdda

#endif  // FDDA_CLUSTER_HPP
