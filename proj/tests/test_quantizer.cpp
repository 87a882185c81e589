// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "fdda/grad_check.hpp"
#include "fdda/network.hpp"
#include "fdda/quantized_model.hpp"
#include "fdda/quantizer.hpp"

using namespace fdda;

TEST(Scale, WorkedValues) {
  EXPECT_DOUBLE_EQ(compute_scale(2, 0, 3), 1.0);
  EXPECT_DOUBLE_EQ(compute_scale(8, -1, 1), 2.0 / 255.0);
  EXPECT_NEAR(compute_scale(8, -1, 1), 0.0078431, 1e-7);
  EXPECT_DOUBLE_EQ(compute_scale(4, 0, 15), 1.0);
}

TEST(Scale, RejectsInvalidRange) {
  EXPECT_THROW(compute_scale(4, 1, 1), QuantError);
  EXPECT_THROW(compute_scale(4, 2, 1), QuantError);
  EXPECT_THROW(compute_scale(1, 0, 1), QuantError);
}

TEST(Scale, RecomputationIsExact) {
  for (int b : {2, 3, 4, 8})
    for (auto [l, u] : {std::pair{-1.0, 1.0}, {0.0, 5.3}, {-0.37, 0.91}}) {
      const auto q = QuantParams::make(b, l, u);
      EXPECT_EQ(q.scale, compute_scale(b, l, u));
      EXPECT_GT(q.scale, 0.0);
    }
}

TEST(Quantize, WorkedValues) {
  const auto q = QuantParams::make(2, 0, 3);
  EXPECT_EQ(quantize(1.4, q), 1);
  EXPECT_EQ(quantize(5.0, q), 3);
  EXPECT_EQ(quantize(-2.0, q), 0);
  EXPECT_DOUBLE_EQ(dequantize(3, q), 3.0);
  EXPECT_DOUBLE_EQ(dequantize(0, q), 0.0);
  EXPECT_DOUBLE_EQ(fake_quantize(1.4, q), 1.0);
  EXPECT_DOUBLE_EQ(fake_quantize(2.0, q), 2.0);
}

TEST(Quantize, RoundTripHandValue) {
  const auto q = QuantParams::make(4, -1, 1);
  EXPECT_EQ(quantize(0.5, q), 4);  // 0.5 / (2/15) = 3.75
  EXPECT_NEAR(fake_quantize(0.5, q), 8.0 / 15.0, 1e-15);
}

TEST(Quantize, TiesRoundAwayFromZero) {
  const auto q = QuantParams::make(2, -3, 3);  // s = 2
  EXPECT_EQ(quantize(1.0, q), 1);
  EXPECT_EQ(quantize(-1.0, q), -1);
}

TEST(Quantize, SymmetricTieBoundsKeepLevelCount) {
  // l/s = -7.5 and u/s = 7.5 both round away from zero; the code range stays 2^b wide.
  const auto q = QuantParams::make(4, -1, 1);
  std::set<std::int64_t> codes;
  for (int i = -300; i <= 300; ++i) codes.insert(quantize(i / 100.0, q));
  EXPECT_LE(codes.size(), 16U);
  EXPECT_EQ(q.code_max() - q.code_min() + 1, 16);
}

TEST(Quantize, CodesStayInRoundedBounds) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int t = 0; t < 200; ++t) {
    double l = u(rng), h = u(rng);
    if (l > h) std::swap(l, h);
    if (h - l < 1e-3) continue;
    const auto q = QuantParams::make(2 + t % 7, l, h);
    for (int i = 0; i < 50; ++i) {
      const auto c = quantize(u(rng) * 2, q);
      EXPECT_GE(c, std::llround(l / q.scale));
      EXPECT_LE(c, std::llround(h / q.scale));
    }
  }
}

class QuantGrid : public ::testing::TestWithParam<int> {};

TEST_P(QuantGrid, RoundTripBoundAndMonotone) {
  const int b = GetParam();
  for (auto [l, u] : {std::pair{-1.0, 1.0}, {0.0, 6.0}, {-0.3, 2.7}}) {
    const auto q = QuantParams::make(b, l, u);
    std::int64_t prev = std::numeric_limits<std::int64_t>::min();
    for (int i = 0; i <= 20000; ++i) {
      const double x = (l - 2) + (u - l + 4) * i / 20000.0;
      const auto c = quantize(x, q);
      EXPECT_GE(c, prev);
      prev = c;
      EXPECT_LE(std::abs(dequantize(c, q) - clip(x, l, u)), q.scale / 2 * (1 + 1e-12));
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Bits, QuantGrid, ::testing::Values(2, 3, 4, 8));

TEST(FakeQuantSte, ForwardAndGradient) {
  const auto q = QuantParams::make(2, 0, 3);
  Tensor x({3}, {1.4f, 5.0f, -2.0f});
  x.set_requires_grad(true);
  const auto y = fake_quantize_ste(x, q);
  EXPECT_FLOAT_EQ(y[0], 1.0f);
  EXPECT_FLOAT_EQ(y[1], 3.0f);
  EXPECT_FLOAT_EQ(y[2], 0.0f);
  backward(sum(y));
  EXPECT_FLOAT_EQ(x.grad()[0], 1.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 0.0f);
  EXPECT_FLOAT_EQ(x.grad()[2], 0.0f);
}

TEST(FakeQuantSte, GradientAtBoundsPasses) {
  const auto q = QuantParams::make(2, 0, 3);
  Tensor x({2}, {0.0f, 3.0f});
  x.set_requires_grad(true);
  backward(sum(fake_quantize_ste(x, q)));
  EXPECT_FLOAT_EQ(x.grad()[0], 1.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 1.0f);
}

TEST(ParamsFromRange, ObservedAndDegenerate) {
  const auto a = params_from_range(4, -1, 2);
  EXPECT_EQ(a.lower, -1);
  EXPECT_EQ(a.upper, 2);
  const auto c = params_from_range(4, 5, 5);
  EXPECT_DOUBLE_EQ(c.lower, 4.999);
  EXPECT_DOUBLE_EQ(c.upper, 5.001);
}

TEST(PerChannel, IndependentScales) {
  Tensor w({2, 2}, {0, 3, 0, 30});
  const auto r = quantize_weights_per_channel(w, 2);
  EXPECT_DOUBLE_EQ(r.params.channels[0].scale, 1.0);
  EXPECT_DOUBLE_EQ(r.params.channels[1].scale, 10.0);
  Tensor v({2, 3}, {0.4f, 1.6f, 3, 4, 16, 30});
  const auto cq = channel_params(Tensor({2, 2}, {0, 3, 0, 30}), 2);
  const auto fq = fake_quantize_per_channel(v, cq);
  for (int i = 0; i < 3; ++i) EXPECT_LE(std::abs(fq[i] - v[i]), 0.5f);
  for (int i = 3; i < 6; ++i) EXPECT_LE(std::abs(fq[i] - v[i]), 5.0f);
}

TEST(PerChannel, SingleChannelMatchesLayerWise) {
  std::mt19937_64 rng(5);
  std::normal_distribution<float> nd;
  Tensor w({1, 20});
  for (auto& v : w.vec()) v = nd(rng);
  const auto r = quantize_weights_per_channel(w, 3);
  const auto [mn, mx] = std::minmax_element(w.vec().begin(), w.vec().end());
  const auto q = QuantParams::make(3, *mn, *mx);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(r.weights[i], static_cast<float>(fake_quantize(w[i], q)));
}

TEST(PerChannel, GridWeightsAreFixedPoints) {
  Tensor w({2, 4}, {0, 1, 2, 3, -10, 0, 10, 20});
  const auto r = quantize_weights_per_channel(w, 2);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(r.weights[i], w[i]);
}

TEST(PerChannel, EditingOneChannelLeavesOthers) {
  std::mt19937_64 rng(9);
  std::normal_distribution<float> nd;
  Tensor w({4, 3, 3, 3});
  for (auto& v : w.vec()) v = nd(rng);
  const auto before = quantize_weights_per_channel(w, 4).weights;
  for (std::size_t i = 0; i < 27; ++i) w[2 * 27 + i] *= 5.0f;
  const auto after = quantize_weights_per_channel(w, 4).weights;
  for (std::size_t c : {0, 1, 3})
    for (std::size_t i = 0; i < 27; ++i) EXPECT_EQ(before[c * 27 + i], after[c * 27 + i]);
}

TEST(PinnedRounding, ReplayEqualsQuantizedForwardAtBase) {
  const auto q = QuantParams::make(3, -1, 1);
  Tensor64 x({4}, {-1.3, -0.2, 0.41, 0.9});
  double base = 0;
  PinnedRounding<double> pin;
  {
    NoGradGuard ng;
    base = sum(fake_quantize_ste(x, q)).item();
  }
  pin.freeze();
  NoGradGuard ng;
  EXPECT_DOUBLE_EQ(sum(fake_quantize_ste(x, q)).item(), base);
  EXPECT_EQ(pin.sites(), 1U);
}

TEST(PinnedRounding, MismatchedReplayThrows) {
  const auto q = QuantParams::make(3, -1, 1);
  PinnedRounding<double> pin;
  fake_quantize_ste(Tensor64({2}, 0.1), q);
  pin.freeze();
  EXPECT_THROW(fake_quantize_ste(Tensor64({3}, 0.1), q), QuantError);
}

TEST(QuantPolicy, RejectsOutOfRangeBits) {
  QuantPolicy p;
  p.activation_bits = 9;
  EXPECT_THROW(p.validate(), QuantError);
  p.activation_bits = 1;
  EXPECT_THROW(p.validate(), QuantError);
  p.activation_bits = 2;
  EXPECT_NO_THROW(p.validate());
}

namespace {

Network<float> small_net() {
  Network<float> n({1, 4, 4}, {LayerSpec::conv(1, 3, 3, 1, 1), LayerSpec::batchnorm(3), LayerSpec::relu(),
                               LayerSpec::flatten(), LayerSpec::dense(48, 5), LayerSpec::tanh(),
                               LayerSpec::dense(5, 2)});
  std::mt19937_64 rng(1);
  n.init(rng);
  return n;
}

}  // namespace

TEST(MakeQuantized, AssignsFirstInteriorLastBits) {
  QuantPolicy p{3, 5, 8, 6};
  const auto q = make_quantized(small_net(), p);
  std::vector<int> bits;
  for (const auto& l : q.layers())
    if (l.spec.is_weighted()) bits.push_back(l.weight_bits);
  EXPECT_EQ(bits, (std::vector<int>{8, 3, 6}));
  for (const auto& l : q.layers())
    if (l.spec.kind == LayerKind::BatchNorm) EXPECT_EQ(l.weight_bits, 0);
}

TEST(MakeQuantized, LeavesSourceUntouched) {
  auto f = small_net();
  const auto w0 = f.layers()[0].params[0].vec();
  auto q = make_quantized(f, QuantPolicy{});
  q.layers()[0].params[0][0] += 1.0f;
  EXPECT_EQ(f.layers()[0].params[0].vec(), w0);
  EXPECT_FALSE(f.is_quantized());
  EXPECT_TRUE(q.is_quantized());
}

TEST(CalibrateBounds, ObservedRangesAndSiteBits) {
  auto q = make_quantized(small_net(), QuantPolicy{4, 5, 7, 3});
  Tensor x({6, 1, 4, 4});
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(-1, 1);
  for (auto& v : x.vec()) v = u(rng);
  const auto params = calibrate_activation_bounds(q, x, QuantPolicy{4, 5, 7, 3});
  ASSERT_EQ(params.size(), q.activation_site_count());
  const auto [mn, mx] = std::minmax_element(x.vec().begin(), x.vec().end());
  EXPECT_EQ(params[0].lower, *mn);
  EXPECT_EQ(params[0].upper, *mx);
  EXPECT_EQ(params[0].bits, 7);
  EXPECT_EQ(params[1].lower, 0.0);  // post-ReLU
  EXPECT_EQ(params[1].bits, 5);
  EXPECT_EQ(params[2].bits, 3);     // feeds the last dense layer
  EXPECT_THROW(calibrate_activation_bounds(q, Tensor({0, 1, 4, 4}), QuantPolicy{}), QuantError);
}

TEST(QuantizedForward, ApproachesFloatAsBitsGrow) {
  auto f = small_net();
  Tensor x({16, 1, 4, 4});
  std::mt19937_64 rng(4);
  std::normal_distribution<float> nd;
  for (auto& v : x.vec()) v = nd(rng);
  const auto ref = predict_logits(f, x);
  double prev = 1e9;
  for (int b : {2, 4, 8}) {
    QuantPolicy p{b, b, b, b};
    auto q = make_quantized(f, p);
    calibrate_activation_bounds(q, x, p);
    const auto out = predict_logits(q, x);
    double err = 0;
    for (std::size_t i = 0; i < out.size(); ++i) err = std::max(err, std::abs(double(out[i] - ref[i])));
    EXPECT_LT(err, prev);
    prev = err;
  }
  EXPECT_LT(prev, 0.05);
}
