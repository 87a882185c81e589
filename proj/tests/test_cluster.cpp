// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "fdda/cluster.hpp"

using namespace fdda;

namespace {

// Independent O(n^2) reference from a full distance matrix.
double brute_silhouette(const std::vector<Vec>& pts, const std::vector<int>& label, std::size_t i) {
  const std::size_t n = pts.size();
  std::vector<std::vector<double>> d(n, std::vector<double>(n));
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = 0; q < n; ++q) {
      double s = 0;
      for (std::size_t k = 0; k < pts[p].size(); ++k) s += (pts[p][k] - pts[q][k]) * (pts[p][k] - pts[q][k]);
      d[p][q] = std::sqrt(s);
    }
  std::map<int, std::pair<double, int>> acc;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == i) continue;
    acc[label[j]].first += d[i][j];
    acc[label[j]].second += 1;
  }
  if (!acc.count(label[i])) return 0.0;
  const double a = acc[label[i]].first / acc[label[i]].second;
  double b = 1e300;
  for (const auto& [c, s] : acc)
    if (c != label[i]) b = std::min(b, s.first / s.second);
  const double m = std::max(a, b);
  return m == 0 ? 0.0 : (b - a) / m;
}

double via_api(const std::vector<Vec>& pts, const std::vector<int>& label, std::size_t i) {
  std::map<int, std::vector<Vec>> clusters;
  for (std::size_t j = 0; j < pts.size(); ++j) clusters[label[j]].push_back(pts[j]);
  std::vector<std::vector<Vec>> others;
  for (const auto& [c, m] : clusters)
    if (c != label[i]) others.push_back(m);
  return silhouette_sample(pts[i], clusters[label[i]], others);
}

struct Instance {
  std::vector<Vec> pts;
  std::vector<int> label;
};

Instance random_instance(std::mt19937_64& rng, std::size_t n, std::size_t k, std::size_t dim) {
  std::normal_distribution<double> nd;
  Instance in;
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % k);
    Vec v(dim);
    for (auto& x : v) x = nd(rng) + 3.0 * c;
    in.pts.push_back(v);
    in.label.push_back(c);
  }
  return in;
}

}  // namespace

TEST(Silhouette, HandValue) {
  const std::vector<Vec> a{{0}, {0.1}}, b{{10}, {10.1}};
  EXPECT_NEAR(silhouette_sample({0}, a, {b}), (10.05 - 0.1) / 10.05, 1e-12);
  EXPECT_NEAR(silhouette_sample({0}, a, {b}), 0.99005, 1e-5);
}

TEST(Silhouette, EqualDistancesGiveZero) {
  EXPECT_EQ(silhouette_sample({0}, {{0}, {1}}, {{{-1}}}), 0.0);
}

TEST(Silhouette, InsideOtherClusterIsNegative) {
  const std::vector<Vec> own{{5}, {0}}, other{{4}, {6}};
  const double sc = silhouette_sample({5}, own, {other});
  EXPECT_LT(sc, 0.0);
  EXPECT_NEAR(sc, brute_silhouette({{5}, {0}, {4}, {6}}, {0, 0, 1, 1}, 0), 0.0);
}

TEST(Silhouette, SingletonAndErrors) {
  EXPECT_EQ(silhouette_sample({1, 2}, {{1, 2}}, {{{0, 0}}}), 0.0);
  EXPECT_THROW(silhouette_sample({1}, {{1}, {2}}, {}), Error);
  EXPECT_THROW(silhouette_sample({1}, {{1}, {2}}, {{}}), Error);
}

TEST(Silhouette, MatchesBruteForceOnRandomInstances) {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 50; ++t) {
    const auto in = random_instance(rng, 20, 3, 1 + t % 4);
    for (std::size_t i = 0; i < in.pts.size(); ++i) {
      const double s = via_api(in.pts, in.label, i);
      EXPECT_EQ(s, brute_silhouette(in.pts, in.label, i));
      EXPECT_GE(s, -1.0);
      EXPECT_LE(s, 1.0);
    }
  }
}

TEST(Silhouette, TranslationAndScaleInvariance) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(-50, 50);
  for (int t = 0; t < 20; ++t) {
    auto in = random_instance(rng, 12, 3, 3);
    Vec shift{u(rng), u(rng), u(rng)};
    const double k = 0.01 + std::abs(u(rng));
    auto moved = in, scaled = in;
    for (auto& p : moved.pts)
      for (std::size_t d = 0; d < 3; ++d) p[d] += shift[d];
    for (auto& p : scaled.pts)
      for (auto& x : p) x *= k;
    for (std::size_t i = 0; i < in.pts.size(); ++i) {
      const double base = via_api(in.pts, in.label, i);
      EXPECT_NEAR(via_api(moved.pts, moved.label, i), base, 1e-6);
      EXPECT_NEAR(via_api(scaled.pts, scaled.label, i), base, 1e-6);
    }
  }
}

namespace {

LabeledBnsDataset synthetic_dataset(bool separated) {
  LabeledBnsDataset ds;
  std::mt19937_64 rng(23);
  std::normal_distribution<float> nd(0, 0.1f);
  for (int i = 0; i < 20; ++i) {
    const int c = i % 2;
    PerImageBns<float> s;
    for (int l = 0; l < 2; ++l) {
      Tensor m({3}), v({3});
      for (auto& x : m.vec()) x = nd(rng) + ((separated && l == 1) ? 10.0f * c : 0.0f);
      for (auto& x : v.vec()) x = 1.0f + nd(rng) + ((separated && l == 1) ? 5.0f * c : 0.0f);
      s.push_back({m, v});
    }
    ds.samples.push_back(s);
    ds.labels.push_back(c);
  }
  return ds;
}

}  // namespace

TEST(LayerSilhouette, OverlappingNearZeroSeparatedNearOne) {
  const auto overlap = synthetic_dataset(false);
  for (double s : mean_silhouette_per_layer(overlap, BnsStat::Mean)) EXPECT_LT(std::abs(s), 0.2);
  const auto sep = synthetic_dataset(true);
  const auto sm = mean_silhouette_per_layer(sep, BnsStat::Mean);
  const auto sv = mean_silhouette_per_layer(sep, BnsStat::Variance);
  ASSERT_EQ(sm.size(), 2U);
  EXPECT_GT(sm[1], 0.95);
  EXPECT_GT(sv[1], 0.9);
}

TEST(LayerSilhouette, NeedsTwoClasses) {
  auto ds = synthetic_dataset(true);
  std::fill(ds.labels.begin(), ds.labels.end(), 0);
  EXPECT_THROW(mean_silhouette_per_layer(ds, BnsStat::Mean), Error);
}

TEST(LayerSilhouette, OutputLengthIsBnLayerCount) {
  Network<float> n({1, 4, 4}, {LayerSpec::conv(1, 2, 3, 1, 1), LayerSpec::batchnorm(2), LayerSpec::relu(),
                               LayerSpec::conv(2, 2, 3, 1, 1), LayerSpec::batchnorm(2), LayerSpec::relu()});
  std::mt19937_64 rng(1);
  n.init(rng);
  LabeledSet set{Tensor({6, 1, 4, 4}), {0, 1, 2, 0, 1, 2}};
  std::normal_distribution<float> nd;
  for (auto& v : set.images.vec()) v = nd(rng);
  const auto ds = collect_labeled_bns(n, set, 4);
  EXPECT_EQ(ds.samples.size(), 6U);
  EXPECT_EQ(mean_silhouette_per_layer(ds, BnsStat::Mean).size(), 2U);
}

namespace {

std::vector<std::string> lines_of(const std::string& path) {
  std::ifstream f(path);
  std::vector<std::string> out;
  for (std::string l; std::getline(f, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(CsvExport, ShapeAndRoundTrip) {
  LabeledBnsDataset ds;
  for (int i = 0; i < 2; ++i) {
    ds.samples.push_back({{Tensor({3}, {0.123456789f * (i + 1), -2.5f, 1e-5f}), Tensor({3}, {1.0f, 2.0f, 3.25f})}});
    ds.labels.push_back(i + 3);
  }
  const auto path = (std::filesystem::temp_directory_path() / "fdda_bns.csv").string();
  export_bns_csv(ds, 1, path);
  const auto lines = lines_of(path);
  ASSERT_EQ(lines.size(), 5U);
  EXPECT_EQ(lines[0], "label,stat,c0,c1,c2");
  std::vector<std::vector<std::string>> cells;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    std::stringstream ss(lines[r]);
    std::vector<std::string> row;
    for (std::string c; std::getline(ss, c, ',');) row.push_back(c);
    EXPECT_EQ(row.size(), 5U);
    cells.push_back(row);
  }
  EXPECT_EQ(cells[0][0], "3");
  EXPECT_EQ(cells[0][1], "mean");
  EXPECT_EQ(cells[1][1], "variance");
  EXPECT_NEAR(std::stod(cells[2][2]), 0.123456789 * 2, 1e-6 * 0.25);
  EXPECT_NEAR(std::stod(cells[0][4]), 1e-5, 1e-11);
  EXPECT_DOUBLE_EQ(std::stod(cells[3][4]), 3.25);
  std::filesystem::remove(path);
}

TEST(CsvExport, EmptyDatasetHeaderOnly) {
  const auto path = (std::filesystem::temp_directory_path() / "fdda_empty.csv").string();
  export_bns_csv(LabeledBnsDataset{}, 1, path);
  const auto lines = lines_of(path);
  ASSERT_EQ(lines.size(), 1U);
  EXPECT_EQ(lines[0], "label,stat");
  std::filesystem::remove(path);
}
