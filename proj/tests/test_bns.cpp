// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#include <gtest/gtest.h>

#include <random>

#include "fdda/bns.hpp"
#include "fdda/grad_check.hpp"

using namespace fdda;

namespace {

Network<double> toy(std::uint64_t seed = 1) {
  Network<double> n({1, 6, 6}, {LayerSpec::conv(1, 3, 3, 1, 1), LayerSpec::batchnorm(3), LayerSpec::relu(),
                                LayerSpec::conv(3, 4, 3, 1, 1), LayerSpec::batchnorm(4), LayerSpec::relu(),
                                LayerSpec::conv(4, 2, 3, 1, 1), LayerSpec::batchnorm(2), LayerSpec::relu(),
                                LayerSpec::flatten(), LayerSpec::dense(72, 3)});
  std::mt19937_64 rng(seed);
  n.init(rng);
  // Non-trivial running statistics.
  std::normal_distribution<double> nd;
  for (auto& l : n.layers())
    if (l.spec.kind == LayerKind::BatchNorm) {
      for (auto& v : l.running_mean.vec()) v = nd(rng);
      for (auto& v : l.running_var.vec()) v = 0.5 + std::abs(nd(rng));
    }
  return n;
}

Tensor64 randn(Shape s, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Tensor64 t(std::move(s));
  for (auto& v : t.vec()) v = nd(rng);
  return t;
}

LayerStats<double> stats(std::vector<double> m, std::vector<double> v) {
  const std::size_t n = m.size();
  return {Tensor64({n}, std::move(m)), Tensor64({n}, std::move(v))};
}

ClassCentroids<double> centroids_of(std::map<int, LayerStatsList<double>> per_class, std::size_t first,
                                    std::size_t last) {
  ClassCentroids<double> cc;
  cc.first_layer = first;
  cc.last_layer = last;
  cc.num_classes = 8;
  for (auto& [c, list] : per_class) {
    cc.available_classes.insert(c);
    cc.centroids[c] = LayerStatsList<double>(list.begin() + static_cast<std::ptrdiff_t>(first - 1), list.end());
  }
  return cc;
}

}  // namespace

TEST(DeepLayerStart, Values) {
  EXPECT_EQ(deep_layer_start(10), 3U);
  EXPECT_EQ(deep_layer_start(20), 8U);
  EXPECT_EQ(deep_layer_start(4), 1U);
  EXPECT_EQ(deep_layer_start(6), 1U);
  EXPECT_EQ(deep_layer_start(1), 1U);
  EXPECT_THROW(deep_layer_start(0), Error);
}

TEST(RunningStats, FreshModelIsStandard) {
  Network<float> n({1, 4, 4}, {LayerSpec::conv(1, 2, 3, 1, 1), LayerSpec::batchnorm(2), LayerSpec::relu()});
  const auto r = collect_running_stats(n);
  ASSERT_EQ(r.layers(), 1U);
  for (float v : r.mean[0].data()) EXPECT_EQ(v, 0.0f);
  for (float v : r.var[0].data()) EXPECT_EQ(v, 1.0f);
}

TEST(RunningStats, LayerCountAndNoBn) {
  EXPECT_EQ(collect_running_stats(toy()).layers(), 3U);
  Network<float> plain({2}, {LayerSpec::dense(2, 2)});
  EXPECT_THROW(collect_running_stats(plain), Error);
}

TEST(RunningStats, EmaConvergesToSourceStatistics) {
  Network<double> n({1, 2, 2}, {LayerSpec::batchnorm(1)});
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(2.0, 3.0);
  ForwardOptions opt{.bn_mode = BnMode::Train, .update_running = true};
  for (int i = 0; i < 400; ++i) {
    Tensor64 x({64, 1, 2, 2});
    for (auto& v : x.vec()) v = nd(rng);
    n.forward(x, opt);
  }
  const auto r = collect_running_stats(n);
  EXPECT_NEAR(r.mean[0][0], 2.0, 0.1);
  EXPECT_NEAR(r.var[0][0], 9.0, 0.6);
}

TEST(SnapshotIsolation, RunningStatsCopiesDoNotAlias) {
  auto n = toy();
  auto r = collect_running_stats(n);
  r.mean[0][0] += 1;
  EXPECT_NE(collect_running_stats(n).mean[0][0], r.mean[0][0]);
}

TEST(ChannelStats, BiasedVarianceAndConstant) {
  Tensor64 x({2, 2, 1, 1}, {1, 5, 3, 5});
  const auto [m, v] = channel_stats(x);
  EXPECT_DOUBLE_EQ(m[0], 2.0);
  EXPECT_DOUBLE_EQ(v[0], 1.0);
  EXPECT_DOUBLE_EQ(m[1], 5.0);
  EXPECT_DOUBLE_EQ(v[1], 0.0);
}

TEST(PerImage, MatchesBatchNormBatchStatsForBatchOfOne) {
  auto n = toy();
  std::mt19937_64 rng(7);
  const auto x = randn({1, 1, 6, 6}, rng);
  const auto per = per_image_bns(n, x);
  ForwardOptions opt;
  opt.capture_bn_inputs = true;
  const auto res = n.forward(x, opt);
  ASSERT_EQ(per.size(), res.bn_inputs.size());
  for (std::size_t l = 0; l < per.size(); ++l) {
    const auto& bi = res.bn_inputs[l];
    const auto& layer = n.layers()[l * 3 + 1];
    const auto bn = batchnorm_forward(bi, layer.params[0], layer.params[1], BnMode::Train, nullptr, nullptr);
    for (std::size_t c = 0; c < per[l].mean.size(); ++c) {
      EXPECT_NEAR(per[l].mean[c], bn.batch_mean[c], 1e-12);
      EXPECT_NEAR(per[l].var[c], bn.batch_var[c], 1e-12);
    }
  }
  EXPECT_THROW(per_image_bns(n, randn({2, 1, 6, 6}, rng)), ShapeError);
}

TEST(PerImage, IdenticalBatchEqualsEachImage) {
  auto n = toy();
  std::mt19937_64 rng(8);
  const auto one = randn({1, 1, 6, 6}, rng);
  Tensor64 batch({4, 1, 6, 6});
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = one[i % 36];
  ForwardOptions opt;
  opt.capture_bn_inputs = true;
  const auto whole = batch_bn_stats(n.forward(batch, opt).bn_inputs);
  const auto per = per_image_bns(n, one);
  for (std::size_t l = 0; l < per.size(); ++l)
    for (std::size_t c = 0; c < per[l].mean.size(); ++c) {
      EXPECT_NEAR(whole[l].mean[c], per[l].mean[c], 1e-12);
      EXPECT_NEAR(whole[l].var[c], per[l].var[c], 1e-12);
    }
}

TEST(PerImage, BatchVersionMatchesSingle) {
  auto n = toy();
  std::mt19937_64 rng(9);
  const auto x = randn({3, 1, 6, 6}, rng);
  const auto all = per_image_bns_batch(n, x);
  for (std::size_t i = 0; i < 3; ++i) {
    Tensor64 xi({1, 1, 6, 6}, std::vector<double>(x.vec().begin() + 36 * i, x.vec().begin() + 36 * (i + 1)));
    const auto one = per_image_bns(n, xi);
    for (std::size_t l = 0; l < one.size(); ++l)
      for (std::size_t c = 0; c < one[l].mean.size(); ++c) EXPECT_NEAR(all[i][l].mean[c], one[l].mean[c], 1e-12);
  }
}

TEST(Centroids, AvailableClassesAndDefinition) {
  auto n = toy();
  std::mt19937_64 rng(10);
  const auto x = randn({2, 1, 6, 6}, rng);
  const auto cc = build_class_centroids(n, x, {0, 1}, 8, 2);
  EXPECT_EQ(cc.available_classes, (std::set<int>{0, 1}));
  EXPECT_EQ(cc.first_layer, 2U);
  EXPECT_EQ(cc.last_layer, 3U);
  Tensor64 x1({1, 1, 6, 6}, std::vector<double>(x.vec().begin() + 36, x.vec().end()));
  const auto per = per_image_bns(n, x1);
  for (std::size_t l = 2; l <= 3; ++l)
    for (std::size_t c = 0; c < per[l - 1].mean.size(); ++c) {
      EXPECT_NEAR(cc.at(1, l).mean[c], per[l - 1].mean[c], 1e-12);
      EXPECT_NEAR(cc.at(1, l).var[c], per[l - 1].var[c], 1e-12);
    }
}

TEST(Centroids, EmptyAndInvalidCalibration) {
  auto n = toy();
  const auto cc = build_class_centroids(n, Tensor64({0, 1, 6, 6}), {}, 8, 1);
  EXPECT_TRUE(cc.available_classes.empty());
  EXPECT_TRUE(cc.centroids.empty());
  std::mt19937_64 rng(11);
  EXPECT_THROW(build_class_centroids(n, randn({2, 1, 6, 6}, rng), {3, 3}, 8, 1), CalibrationError);
  EXPECT_THROW(build_class_centroids(n, randn({1, 1, 6, 6}, rng), {9}, 8, 1), CalibrationError);
  EXPECT_THROW(build_class_centroids(n, randn({1, 1, 6, 6}, rng), {0}, 8, 4), CalibrationError);
}

TEST(BnsLoss, ExactMatchAndHandValue) {
  BnRunningStats<double> r{{Tensor64({2}, {0, 0})}, {Tensor64({2}, {1, 1})}};
  EXPECT_EQ(bns_loss<double>({stats({0, 0}, {1, 1})}, r).item(), 0.0);
  EXPECT_DOUBLE_EQ(bns_loss<double>({stats({1, 2}, {1, 1})}, r).item(), 5.0);
  EXPECT_THROW(bns_loss<double>({}, r), ShapeError);
}

TEST(BnsLoss, InvariantUnderConsistentLayerPermutation) {
  std::mt19937_64 rng(12);
  LayerStatsList<double> s;
  BnRunningStats<double> r;
  for (int l = 0; l < 3; ++l) {
    s.push_back({randn({4}, rng), randn({4}, rng)});
    r.mean.push_back(randn({4}, rng));
    r.var.push_back(randn({4}, rng));
  }
  const double a = bns_loss(s, r).item();
  std::swap(s[0], s[2]);
  std::swap(r.mean[0], r.mean[2]);
  std::swap(r.var[0], r.var[2]);
  EXPECT_NEAR(bns_loss(s, r).item(), a, 1e-12);
}

TEST(CbnsLoss, IdentityHandValueAndShallowLayers) {
  std::map<int, LayerStatsList<double>> target{{0, {stats({5, 5}, {2, 2}), stats({0, 0}, {1, 1})}}};
  const auto cc = centroids_of(target, 2, 2);
  EXPECT_EQ(cbns_loss(target, cc, 2).item(), 0.0);
  // Discrepancy only in layer 1 < K.
  std::map<int, LayerStatsList<double>> shallow{{0, {stats({9, 9}, {9, 9}), stats({0, 0}, {1, 1})}}};
  EXPECT_EQ(cbns_loss(shallow, cc, 2).item(), 0.0);
  std::map<int, LayerStatsList<double>> off{{0, {stats({0, 0}, {0, 0}), stats({1, 1}, {1, 1})}}};
  EXPECT_DOUBLE_EQ(cbns_loss(off, cc, 2).item(), 2.0);
}

TEST(CbnsLoss, SkipsUnavailableClasses) {
  std::map<int, LayerStatsList<double>> target{{0, {stats({0}, {1})}}};
  const auto cc = centroids_of(target, 1, 1);
  std::map<int, LayerStatsList<double>> batch{{0, {stats({1}, {1})}}, {5, {stats({7}, {7})}}};
  std::size_t skipped = 0;
  EXPECT_DOUBLE_EQ(cbns_loss(batch, cc, 1, &skipped).item(), 1.0);
  EXPECT_EQ(skipped, 1U);
}

TEST(CbnsLoss, AdditiveOverClassesAndLayers) {
  std::mt19937_64 rng(13);
  auto rl = [&] { return LayerStatsList<double>{{randn({3}, rng), randn({3}, rng)}, {randn({2}, rng), randn({2}, rng)}}; };
  std::map<int, LayerStatsList<double>> target{{1, rl()}, {4, rl()}};
  std::map<int, LayerStatsList<double>> batch{{1, rl()}, {4, rl()}};
  const auto cc = centroids_of(target, 1, 2);
  const double total = cbns_loss(batch, cc, 1).item();
  double parts = 0;
  for (int c : {1, 4}) {
    std::map<int, LayerStatsList<double>> one{{c, batch[c]}};
    parts += cbns_loss(one, cc, 1).item();
  }
  EXPECT_NEAR(total, parts, 1e-12);
  const double deep = cbns_loss(batch, centroids_of(target, 2, 2), 2).item();
  const double shallow_only = total - deep;
  double by_hand = 0;
  for (int c : {1, 4})
    for (std::size_t i = 0; i < 3; ++i)
      by_hand += std::pow(batch[c][0].mean[i] - target[c][0].mean[i], 2) + std::pow(batch[c][0].var[i] - target[c][0].var[i], 2);
  EXPECT_NEAR(shallow_only, by_hand, 1e-12);
}

TEST(DbnsLoss, ZeroNoiseEqualsCbnsExactly) {
  std::mt19937_64 rng(14);
  std::map<int, LayerStatsList<double>> target{{2, {{randn({3}, rng), randn({3}, rng)}}}};
  std::map<int, LayerStatsList<double>> batch{{2, {{randn({3}, rng), randn({3}, rng)}}}};
  const auto cc = centroids_of(target, 1, 1);
  EXPECT_EQ(dbns_loss(batch, cc, 1, DistortionParams{0, 0}, rng).item(), cbns_loss(batch, cc, 1).item());
}

TEST(DbnsLoss, ResamplesAndIsSeedDeterministic) {
  std::mt19937_64 rng(15);
  std::map<int, LayerStatsList<double>> target{{0, {{randn({4}, rng), randn({4}, rng)}}}};
  const auto cc = centroids_of(target, 1, 1);
  std::mt19937_64 a(1), b(1);
  const double a1 = dbns_loss(target, cc, 1, DistortionParams{}, a).item();
  const double a2 = dbns_loss(target, cc, 1, DistortionParams{}, a).item();
  EXPECT_NE(a1, a2);
  EXPECT_EQ(dbns_loss(target, cc, 1, DistortionParams{}, b).item(), a1);
  EXPECT_THROW(dbns_loss(target, cc, 1, DistortionParams{-1, 0}, a), Error);
}

TEST(DbnsLoss, DoesNotMutateCentroids) {
  std::mt19937_64 rng(16);
  std::map<int, LayerStatsList<double>> target{{0, {{randn({4}, rng), randn({4}, rng)}}}};
  const auto cc = centroids_of(target, 1, 1);
  const auto before = cc.at(0, 1).mean.vec();
  dbns_loss(target, cc, 1, DistortionParams{}, rng);
  EXPECT_EQ(cc.at(0, 1).mean.vec(), before);
}

TEST(BnsGradients, AllThreeLossesMatchFiniteDifferences) {
  std::mt19937_64 rng(17);
  auto m = randn({3}, rng), v = randn({3}, rng);
  m.set_requires_grad(true);
  v.set_requires_grad(true);
  BnRunningStats<double> r{{randn({3}, rng)}, {randn({3}, rng)}};
  std::map<int, LayerStatsList<double>> target{{0, {{randn({3}, rng), randn({3}, rng)}}}};
  const auto cc = centroids_of(target, 1, 1);
  EXPECT_LT(grad_check<double>([&] { return bns_loss<double>({{m, v}}, r); }, {m, v}), 1e-6);
  EXPECT_LT(grad_check<double>([&] { return cbns_loss<double>({{0, {{m, v}}}}, cc, 1); }, {m, v}), 1e-6);
  // Frozen noise: the same seed for every evaluation.
  EXPECT_LT(grad_check<double>(
                [&] {
                  std::mt19937_64 frozen(99);
                  return dbns_loss<double>({{0, {{m, v}}}}, cc, 1, DistortionParams{}, frozen);
                },
                {m, v}),
            1e-6);
}

TEST(ClassStats, OnlyMembersAndDeepLayers) {
  std::mt19937_64 rng(18);
  const auto x = randn({4, 2, 1, 1}, rng);
  const auto per = class_bn_stats<double>({x, x}, {0, 1, 0, 1}, 2);
  ASSERT_EQ(per.size(), 2U);
  EXPECT_EQ(per.at(0)[0].mean.size(), 0U);  // layer 1 < K left empty
  EXPECT_NEAR(per.at(0)[1].mean[0], (x[0] + x[4]) / 2, 1e-12);
  EXPECT_NEAR(per.at(1)[1].mean[1], (x[3] + x[7]) / 2, 1e-12);
}
