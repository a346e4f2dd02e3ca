#include <gtest/gtest.h>

#include <cmath>

#include "volt/optim.hpp"

using namespace volt;

namespace {

ParamStore<double> scalar_store(double w, double b) {
  ParamStore<double> s;
  s.add("w", 1, 1, ParamKind::weight).value(0, 0) = w;
  s.add("b", 1, 1, ParamKind::bias).value(0, 0) = b;
  return s;
}

} // namespace

TEST(AdamW, ZeroGradNoDecayLeavesParams) {
  auto s = scalar_store(0.3, -0.7);
  AdamW<double> opt(s, {0.9, 0.999, 1e-8, 0.0});
  opt.step(s, 0.1);
  EXPECT_EQ(s.at("w").value(0, 0), 0.3);
  EXPECT_EQ(s.at("b").value(0, 0), -0.7);
}

TEST(AdamW, SignStepClosedForm) {
  auto s = scalar_store(0.3, -0.7);
  s.at("w").grad(0, 0) = 1.0;
  s.at("b").grad(0, 0) = 1.0;
  AdamW<double> opt(s, {0.0, 0.0, 0.0, 0.0});
  opt.step(s, 0.01);
  EXPECT_DOUBLE_EQ(s.at("w").value(0, 0), 0.29);
  EXPECT_DOUBLE_EQ(s.at("b").value(0, 0), -0.71);
}

TEST(AdamW, ThreeStepScalarOracle) {
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.05;
  const double grads[3] = {0.5, -1.25, 2.0};
  const double lrs[3] = {1e-2, 5e-3, 2e-2};
  auto s = scalar_store(0.8, 0.8);
  AdamW<double> opt(s, {b1, b2, eps, wd});
  double w = 0.8, b = 0.8, mw = 0, vw = 0, mb = 0, vb = 0;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1], lr = lrs[t - 1];
    s.at("w").grad(0, 0) = g;
    s.at("b").grad(0, 0) = g;
    opt.step(s, lr);
    w = w - lr * wd * w;
    mw = b1 * mw + (1 - b1) * g;
    vw = b2 * vw + (1 - b2) * g * g;
    w -= lr * (mw / (1 - std::pow(b1, t))) / (std::sqrt(vw / (1 - std::pow(b2, t))) + eps);
    mb = b1 * mb + (1 - b1) * g;
    vb = b2 * vb + (1 - b2) * g * g;
    b -= lr * (mb / (1 - std::pow(b1, t))) / (std::sqrt(vb / (1 - std::pow(b2, t))) + eps);
    EXPECT_NEAR(s.at("w").value(0, 0), w, 1e-12);
    EXPECT_NEAR(s.at("b").value(0, 0), b, 1e-12);
  }
  EXPECT_EQ(opt.steps(), 3u);
  EXPECT_NE(w, b);
}

TEST(AdamW, OnlyWeightsDecay) {
  ParamStore<double> s;
  for (auto kind : {ParamKind::weight, ParamKind::bias, ParamKind::norm_scale, ParamKind::norm_bias, ParamKind::qk_gain})
    s.add("p" + std::to_string(static_cast<int>(kind)), 1, 1, kind).value(0, 0) = 1.0;
  AdamW<double> opt(s, {0.9, 0.999, 1e-8, 0.5});
  opt.step(s, 0.1);
  for (const auto& p : s) EXPECT_EQ(p.value(0, 0), p.kind == ParamKind::weight ? 0.95 : 1.0) << p.name;
}

TEST(OneCycle, EndpointsExact) {
  OneCycleSchedule s{2e-3, 1000, 0.1, 25.0, 1000.0};
  EXPECT_EQ(s.lr(0), 2e-3 / 25.0);
  EXPECT_EQ(s.lr(100), 2e-3);
  EXPECT_EQ(s.lr(1000), 2e-3 / 1000.0);
  EXPECT_THROW(s.lr(1001), InvalidInput);
}

TEST(OneCycle, MonotoneAroundPeak) {
  OneCycleSchedule s{1e-3, 5000, 0.3, 25.0, 1000.0};
  for (std::size_t t = 1; t <= 1500; ++t) EXPECT_GT(s.lr(t), s.lr(t - 1)) << t;
  for (std::size_t t = 1501; t <= 5000; ++t) EXPECT_LT(s.lr(t), s.lr(t - 1)) << t;
}

TEST(Ema, DecayZeroCopiesAndOneFreezes) {
  auto s = scalar_store(1.0, 2.0);
  Ema<double> copy(s, 0.0), frozen(s, 1.0);
  s.at("w").value(0, 0) = 5.0;
  copy.update(s);
  frozen.update(s);
  EXPECT_EQ(copy.shadow()[0](0, 0), 5.0);
  EXPECT_EQ(frozen.shadow()[0](0, 0), 1.0);
  EXPECT_THROW(Ema<double>(s, 1.5), InvalidInput);
}

TEST(Ema, ConstantParamsClosedFormExact) {
  for (double d : {0.5, 0.75, 0.9375}) {
    auto s = scalar_store(1.0, -3.0);
    Ema<double> ema(s, d);
    s.at("w").value(0, 0) = 0.25;
    s.at("b").value(0, 0) = 0.5;
    for (int k = 1; k <= 12; ++k) {
      ema.update(s);
      EXPECT_EQ(ema.shadow()[0](0, 0), 0.25 + std::pow(d, k) * (1.0 - 0.25)) << d << " " << k;
      EXPECT_EQ(ema.shadow()[1](0, 0), 0.5 + std::pow(d, k) * (-3.0 - 0.5)) << d << " " << k;
    }
  }
}

TEST(Ema, CopyToRestoresShadow) {
  auto s = scalar_store(1.0, 2.0);
  Ema<double> ema(s, 0.5);
  s.at("w").value(0, 0) = 3.0;
  ema.update(s);
  ema.copy_to(s);
  EXPECT_EQ(s.at("w").value(0, 0), 2.0);
}

TEST(InitParams, MomentsAndKinds) {
  ParamStore<double> s;
  s.add("w", 500, 200, ParamKind::weight);
  s.add("b", 1, 200, ParamKind::bias);
  s.add("ln.weight", 1, 200, ParamKind::norm_scale);
  s.add("ln.bias", 1, 200, ParamKind::norm_bias);
  s.add("gain", 1, 4, ParamKind::qk_gain);
  init_params(s, 42, 2.5);
  double sum = 0.0, sq = 0.0, mx = 0.0;
  for (double v : s.at("w").value.data) {
    sum += v;
    sq += v * v;
    mx = std::max(mx, std::abs(v));
  }
  const double n = 1e5;
  const double sd = std::sqrt(sq / n - (sum / n) * (sum / n));
  // The +-2 sigma truncation shrinks the standard deviation to about 0.88 sigma.
  EXPECT_NEAR(sd, 0.02 * 0.8796, 0.05 * 0.02 * 0.8796);
  EXPECT_LE(mx, 0.04);
  for (double v : s.at("b").value.data) EXPECT_EQ(v, 0.0);
  for (double v : s.at("ln.bias").value.data) EXPECT_EQ(v, 0.0);
  for (double v : s.at("ln.weight").value.data) EXPECT_EQ(v, 1.0);
  for (double v : s.at("gain").value.data) EXPECT_EQ(v, 2.5);
}

TEST(InitParams, SameSeedSameStore) {
  ParamStore<float> a, b;
  a.add("w", 30, 30, ParamKind::weight);
  b.add("w", 30, 30, ParamKind::weight);
  init_params(a, 7, 1.0);
  init_params(b, 7, 1.0);
  EXPECT_EQ(a.at("w").value, b.at("w").value);
  init_params(b, 8, 1.0);
  EXPECT_NE(a.at("w").value, b.at("w").value);
}
