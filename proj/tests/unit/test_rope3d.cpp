#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "test_util.hpp"
#include "volt/rope3d.hpp"

using namespace volt;

namespace {

RopeFrequencies freqs_for(std::size_t hd) { return build_frequencies(RopeConfig::asymmetric(hd)); }

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Matrix<double> rotated(const Matrix<double>& v, std::size_t heads, Position3 p, const RopeFrequencies& f) {
  Matrix<double> out = v;
  std::vector<Position3> pos(v.rows, p);
  apply_rope(out, heads, pos, f);
  return out;
}

} // namespace

TEST(RopeConfig, DefaultAllocationForHeadDim64) {
  auto cfg = RopeConfig::asymmetric(64);
  EXPECT_EQ(cfg.pairs, (std::array<std::size_t, 3>{12, 12, 8}));
  EXPECT_EQ(build_frequencies(cfg).total_pairs(), 32u);
  EXPECT_EQ(RopeConfig::asymmetric(32).pairs, (std::array<std::size_t, 3>{6, 6, 4}));
  EXPECT_EQ(RopeConfig{}.pairs, (std::array<std::size_t, 3>{12, 12, 8}));
}

TEST(RopeConfig, SymmetricSplit) {
  EXPECT_EQ(RopeConfig::symmetric(64).pairs, (std::array<std::size_t, 3>{11, 11, 10}));
  EXPECT_EQ(RopeConfig::symmetric(6).pairs, (std::array<std::size_t, 3>{1, 1, 1}));
}

TEST(RopeConfig, MismatchedSumRejected) {
  RopeConfig cfg;
  cfg.pairs = {12, 12, 7};
  try {
    cfg.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "config");
  }
  EXPECT_THROW(build_frequencies(cfg), ConfigError);
  cfg.pairs = {12, 12, 8};
  cfg.head_dim = 63;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.head_dim = 64;
  cfg.theta_base = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(BuildFrequencies, ClosedForms) {
  RopeConfig cfg;
  cfg.head_dim = 8;
  cfg.pairs = {1, 2, 1};
  auto f = build_frequencies(cfg);
  EXPECT_EQ(f.axis[0], (std::vector<double>{1.0}));
  ASSERT_EQ(f.axis[1].size(), 2u);
  EXPECT_EQ(f.axis[1][0], 1.0);
  EXPECT_NEAR(f.axis[1][1], 0.01, 1e-15);
  for (std::size_t i = 0; i < 12; ++i)
    EXPECT_NEAR(freqs_for(64).axis[0][i], std::pow(10000.0, -static_cast<double>(i) / 12.0), 1e-15);
}

TEST(ApplyRope, ZeroPositionIsIdentity) {
  auto v = test::random_matrix<double>(5, 128, 1);
  auto out = rotated(v, 2, {0, 0, 0}, freqs_for(64));
  EXPECT_LE(test::max_abs_diff(out, v), 1e-12);
}

TEST(ApplyRope, PlanarRotationByPi) {
  RopeConfig cfg;
  cfg.head_dim = 2;
  cfg.pairs = {1, 0, 0};
  Matrix<double> v(1, 2);
  v.data = {1.0, 0.0};
  auto out = rotated(v, 1, {std::numbers::pi, 0, 0}, build_frequencies(cfg));
  EXPECT_NEAR(out(0, 0), -1.0, 1e-12);
  EXPECT_NEAR(out(0, 1), 0.0, 1e-12);
}

TEST(ApplyRope, RelativeOffsetInvariance) {
  auto f = freqs_for(64);
  Rng rng(5);
  double worst = 0.0;
  for (int c = 0; c < 100; ++c) {
    auto q = test::random_matrix<double>(1, 64, 1000 + c);
    auto k = test::random_matrix<double>(1, 64, 2000 + c);
    Position3 p1{}, p2{}, s{};
    for (int a = 0; a < 3; ++a) {
      p1[a] = static_cast<double>(static_cast<int>(rng() % 200) - 100);
      p2[a] = static_cast<double>(static_cast<int>(rng() % 200) - 100);
      s[a] = static_cast<double>(static_cast<int>(rng() % 200) - 100);
    }
    Position3 p1s{p1[0] + s[0], p1[1] + s[1], p1[2] + s[2]};
    Position3 p2s{p2[0] + s[0], p2[1] + s[1], p2[2] + s[2]};
    const double a = dot(rotated(q, 1, p1, f).row(0), rotated(k, 1, p2, f).row(0));
    const double b = dot(rotated(q, 1, p1s, f).row(0), rotated(k, 1, p2s, f).row(0));
    worst = std::max(worst, std::abs(a - b) / std::max(1.0, std::abs(a)));
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(ApplyRope, RelativeOffsetInvarianceFloat) {
  auto f = freqs_for(32);
  auto q = test::random_matrix<float>(1, 32, 1);
  auto k = test::random_matrix<float>(1, 32, 2);
  auto run = [&](Position3 a, Position3 b) {
    auto qq = q, kk = k;
    std::vector<Position3> pa{a}, pb{b};
    apply_rope(qq, 1, pa, f);
    apply_rope(kk, 1, pb, f);
    double s = 0.0;
    for (std::size_t i = 0; i < 32; ++i) s += static_cast<double>(qq.data[i]) * kk.data[i];
    return s;
  };
  EXPECT_NEAR(run({3, 4, 5}, {1, 2, 2}), run({13, -6, 7}, {11, -8, 4}), 1e-5);
}

TEST(ApplyRope, PreservesNorm) {
  auto f = freqs_for(64);
  auto v = test::random_matrix<double>(10, 128, 3);
  std::vector<Position3> pos;
  for (int i = 0; i < 10; ++i) pos.push_back({1.5 * i, -2.0 * i, 0.25 * i * i});
  auto out = v;
  apply_rope(out, 2, pos, f);
  for (std::size_t t = 0; t < 10; ++t)
    for (std::size_t h = 0; h < 2; ++h) {
      auto a = v.row(t).subspan(h * 64, 64), b = out.row(t).subspan(h * 64, 64);
      EXPECT_NEAR(std::sqrt(dot(a, a)), std::sqrt(dot(b, b)), 1e-6);
    }
}

TEST(ApplyRope, AxisIndependence) {
  auto f = freqs_for(64);
  auto v = test::random_matrix<double>(1, 64, 4);
  auto a = rotated(v, 1, {3, 7, 1}, f);
  auto b = rotated(v, 1, {3, 7, 9}, f);
  for (std::size_t d = 0; d < 48; ++d) EXPECT_EQ(a(0, d), b(0, d));
  bool z_changed = false;
  for (std::size_t d = 48; d < 64; ++d) z_changed |= a(0, d) != b(0, d);
  EXPECT_TRUE(z_changed);
}

TEST(ApplyRope, Composition) {
  auto f = freqs_for(32);
  auto v = test::random_matrix<double>(1, 64, 5);
  auto twice = rotated(rotated(v, 2, {1, 2, 3}, f), 2, {4, -5, 6}, f);
  auto once = rotated(v, 2, {5, -3, 9}, f);
  EXPECT_LE(test::max_abs_diff(twice, once), 1e-6);
}

TEST(ApplyRope, InverseUndoesRotation) {
  auto f = freqs_for(32);
  auto v = test::random_matrix<double>(4, 64, 6);
  std::vector<Position3> pos{{1, 2, 3}, {4, 5, 6}, {-7, 8, 0}, {0, 0, 11}};
  auto x = v;
  apply_rope(x, 2, pos, f);
  apply_rope(x, 2, pos, f, true);
  EXPECT_LE(test::max_abs_diff(x, v), 1e-12);
}

TEST(ApplyRope, ShapeErrors) {
  auto f = freqs_for(32);
  Matrix<double> x(2, 60);
  std::vector<Position3> pos(2);
  EXPECT_THROW(apply_rope(x, 2, pos, f), ShapeError);
  Matrix<double> y(3, 64);
  EXPECT_THROW(apply_rope(y, 2, pos, f), ShapeError);
}

TEST(NormalizePositions, Examples) {
  std::vector<Position3> p{{5, 0, 3}, {0, 10, 3}, {10, 5, 3}};
  auto n = normalize_positions(p, {0, 0, 3}, {10, 10, 3});
  EXPECT_EQ(n[0][0], 0.5);
  EXPECT_EQ(n[1][0], 0.0);
  EXPECT_EQ(n[2][0], 1.0);
  EXPECT_EQ(n[1][1], 1.0);
  for (const auto& q : n) EXPECT_EQ(q[2], 0.0);
}

TEST(RopePositions, PerSceneNormalizedEndpoints) {
  std::vector<VoxelCoord> coords{{2, 5, 1}, {8, -3, 1}, {4, 0, 1}, {10, 10, 10}, {0, 0, 0}};
  std::vector<std::size_t> offsets{0, 3, 5};
  auto n = rope_positions(coords, offsets, CoordinateMode::per_scene_normalized);
  EXPECT_EQ(n[0][0], 0.0);
  EXPECT_EQ(n[1][0], 1.0);
  EXPECT_EQ(n[0][1], 1.0);
  EXPECT_EQ(n[1][1], 0.0);
  EXPECT_EQ(n[0][2], 0.0);
  EXPECT_EQ(n[3], (Position3{1, 1, 1}));
  EXPECT_EQ(n[4], (Position3{0, 0, 0}));
  auto m = rope_positions(coords, offsets, CoordinateMode::metric_index);
  EXPECT_EQ(m[1], (Position3{8, -3, 1}));
}
