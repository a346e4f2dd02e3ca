#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "test_util.hpp"
#include "volt/augment.hpp"

using namespace volt;

namespace {

PointCloud room(std::uint64_t seed, double density = 300.0) {
  SceneSpec s;
  s.seed = seed;
  s.extent = {2.0, 2.0, 1.5};
  s.density = density;
  return generate_scene(s);
}

std::array<double, 3> centroid(const PointCloud& c, std::size_t lo, std::size_t hi) {
  std::array<double, 3> m{0, 0, 0};
  for (std::size_t i = lo; i < hi; ++i)
    for (int a = 0; a < 3; ++a) m[a] += c.positions[i][a];
  for (auto& v : m) v /= static_cast<double>(hi - lo);
  return m;
}

std::map<std::int32_t, std::size_t> label_counts(const PointCloud& c) {
  std::map<std::int32_t, std::size_t> m;
  for (auto y : *c.labels) ++m[y];
  return m;
}

double dist(const Vec3f& a, const Vec3f& b) {
  double s = 0.0;
  for (int k = 0; k < 3; ++k) s += std::pow(static_cast<double>(a[k]) - b[k], 2);
  return std::sqrt(s);
}

} // namespace

TEST(Mix3d, SelfMixGivesColocatedCopies) {
  auto a = room(1);
  auto m = mix3d(a, a);
  ASSERT_EQ(m.size(), 2 * a.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(m.positions[i], m.positions[i + a.size()]);
}

TEST(Mix3d, LabelsConcatenatedAndHalvesCentered) {
  auto a = room(2), b = room(3);
  auto m = mix3d(a, b);
  auto want = label_counts(a);
  for (auto [k, v] : label_counts(b)) want[k] += v;
  EXPECT_EQ(label_counts(m), want);
  for (auto v : centroid(m, 0, a.size())) EXPECT_NEAR(v, 0.0, 1e-6);
  for (auto v : centroid(m, a.size(), m.size())) EXPECT_NEAR(v, 0.0, 1e-6);
  std::int32_t max_a = -1;
  for (std::size_t i = 0; i < a.size(); ++i) max_a = std::max(max_a, (*m.instance_ids)[i]);
  for (std::size_t i = a.size(); i < m.size(); ++i) {
    const auto id = (*m.instance_ids)[i];
    if (id != kNoInstance) EXPECT_GT(id, max_a);
  }
}

TEST(Mix3d, UnlabeledInputRejected) {
  auto a = room(4);
  auto b = test::random_cloud(10, 3, 1);
  EXPECT_THROW(mix3d(a, b), InvalidInput);
}

TEST(Rigid, IdentityIsBitwise) {
  auto a = room(5);
  EXPECT_EQ(rigid(a, RigidParams{}).positions, a.positions);
}

TEST(Rigid, ScaleDoublesDistances) {
  auto a = test::random_cloud(50, 1, 6);
  RigidParams p;
  p.scale = 2.0;
  p.rotation_z = 0.7;
  p.translation = {1, 2, 3};
  auto b = rigid(a, p);
  for (std::size_t i = 1; i < 50; ++i) EXPECT_NEAR(dist(b.positions[i], b.positions[0]), 2 * dist(a.positions[i], a.positions[0]), 1e-5);
}

TEST(Rigid, QuarterTurnAboutZ) {
  PointCloud c;
  c.positions = {{1.0f, 0.0f, 0.0f}};
  c.features = Matrix<float>(1, 1);
  RigidParams p;
  p.rotation_z = std::numbers::pi / 2;
  auto r = rigid(c, p);
  EXPECT_NEAR(r.positions[0][0], 0.0, 1e-7);
  EXPECT_NEAR(r.positions[0][1], 1.0, 1e-7);
  EXPECT_NEAR(r.positions[0][2], 0.0, 1e-7);
  RigidParams f;
  f.flip_x = true;
  EXPECT_EQ(rigid(c, f).positions[0][0], -1.0f);
}

TEST(Elastic, ZeroMagnitudeIsIdentity) {
  auto a = room(7);
  EXPECT_EQ(elastic(a, 0.2, 0.0, 1).positions, a.positions);
}

TEST(Elastic, DisplacementBoundedOnTenScenes) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto a = room(10 + s);
    for (auto [g, mag] : {std::pair{0.2, 0.4}, std::pair{0.8, 1.6}}) {
      auto b = elastic(a, g, mag, s);
      double worst = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, dist(a.positions[i], b.positions[i]));
      EXPECT_LE(worst, mag + 1e-5);
      EXPECT_GT(worst, 0.0);
    }
  }
}

TEST(Elastic, SeededField) {
  auto a = room(8);
  EXPECT_EQ(elastic(a, 0.2, 0.4, 3).positions, elastic(a, 0.2, 0.4, 3).positions);
  EXPECT_NE(elastic(a, 0.2, 0.4, 3).positions, elastic(a, 0.2, 0.4, 4).positions);
  EXPECT_EQ(elastic(a, 0.2, 0.4, 3).labels, a.labels);
}

TEST(InstanceTransform, ZeroRangesAreIdentity) {
  auto a = room(9);
  auto cfg = AugmentConfig::none();
  cfg.instance = true;
  cfg.instance_rotation = {0, 0};
  cfg.instance_scale = {1, 1};
  cfg.instance_shift = {Range{0, 0}, Range{0, 0}, Range{0, 0}};
  EXPECT_EQ(instance_transform(a, cfg, 1).positions, a.positions);
}

TEST(InstanceTransform, PureShiftIsExact) {
  auto a = test::random_cloud(30, 1, 10);
  a.instance_ids = std::vector<std::int32_t>(30, 0);
  (*a.instance_ids)[0] = kNoInstance;
  auto cfg = AugmentConfig::none();
  cfg.instance = true;
  cfg.instance_rotation = {0, 0};
  cfg.instance_scale = {1, 1};
  cfg.instance_shift = {Range{1, 1}, Range{0, 0}, Range{0, 0}};
  auto b = instance_transform(a, cfg, 2);
  EXPECT_EQ(b.positions[0], a.positions[0]);
  for (std::size_t i = 1; i < 30; ++i) {
    EXPECT_EQ(b.positions[i][0], a.positions[i][0] + 1.0f);
    EXPECT_EQ(b.positions[i][1], a.positions[i][1]);
    EXPECT_EQ(b.positions[i][2], a.positions[i][2]);
  }
}

TEST(InstanceTransform, CentroidsMoveOnlyByShift) {
  auto a = room(11);
  auto cfg = AugmentConfig::none();
  cfg.instance = true;
  cfg.instance_shift = {Range{0, 0}, Range{0, 0}, Range{0, 0}};
  auto b = instance_transform(a, cfg, 5);
  std::map<std::int32_t, std::array<double, 4>> ca, cb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto id = (*a.instance_ids)[i];
    if (id == kNoInstance) {
      EXPECT_EQ(a.positions[i], b.positions[i]);
      continue;
    }
    for (int k = 0; k < 3; ++k) {
      ca[id][k] += a.positions[i][k];
      cb[id][k] += b.positions[i][k];
    }
    ca[id][3] += 1;
    cb[id][3] += 1;
  }
  ASSERT_FALSE(ca.empty());
  bool moved = false;
  for (auto& [id, s] : ca)
    for (int k = 0; k < 3; ++k) {
      EXPECT_NEAR(s[k] / s[3], cb[id][k] / cb[id][3], 1e-5);
      moved = true;
    }
  EXPECT_TRUE(moved);
  EXPECT_NE(a.positions, b.positions);
}

TEST(InstanceTransform, MissingIdsRejected) {
  auto a = test::random_cloud(10, 1, 11, 1.0, 3);
  EXPECT_THROW(instance_transform(a, AugmentConfig{}, 1), InvalidInput);
}

TEST(Crop, FullRatioIsIdentity) {
  auto a = room(12);
  EXPECT_EQ(crop(a, 1.0, 3), a);
}

TEST(Crop, KeepsPointsInsideBox) {
  auto a = room(13, 1000.0);
  auto b = crop(a, 0.5, 4, 10);
  EXPECT_LT(b.size(), a.size());
  EXPECT_GE(b.size(), 10u);
  float lo[2] = {1e9f, 1e9f}, hi[2] = {-1e9f, -1e9f};
  for (const auto& p : b.positions)
    for (int k = 0; k < 2; ++k) {
      lo[k] = std::min(lo[k], p[k]);
      hi[k] = std::max(hi[k], p[k]);
    }
  float alo[2] = {1e9f, 1e9f}, ahi[2] = {-1e9f, -1e9f};
  for (const auto& p : a.positions)
    for (int k = 0; k < 2; ++k) {
      alo[k] = std::min(alo[k], p[k]);
      ahi[k] = std::max(ahi[k], p[k]);
    }
  for (int k = 0; k < 2; ++k) EXPECT_LE(hi[k] - lo[k], 0.5 * (ahi[k] - alo[k]) + 1e-5);
}

TEST(Dropout, ZeroIsIdentityAndHalfConcentrates) {
  auto a = test::random_cloud(100000, 1, 14);
  EXPECT_EQ(dropout(a, 0.0, 1), a);
  const double kept = static_cast<double>(dropout(a, 0.5, 2).size()) / 1e5;
  EXPECT_GE(kept, 0.49);
  EXPECT_LE(kept, 0.51);
  EXPECT_GE(dropout(test::random_cloud(3, 1, 1), 0.999999, 3).size(), 1u);
}

TEST(Pipeline, AllOffIsIdentity) {
  std::vector<PointCloud> batch{room(15), room(16)};
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(augment_scene(batch, i, AugmentConfig::none(), 3), batch[i]);
}

TEST(Pipeline, DeterministicAndLabelPreserving) {
  std::vector<PointCloud> batch{room(17), room(18), room(19)};
  AugmentConfig cfg;
  cfg.seed = 77;
  cfg.color_jitter = true;
  for (std::size_t i = 0; i < 3; ++i) {
    AugmentRecord rec;
    auto a = augment_scene(batch, i, cfg, 5, &rec);
    auto b = augment_scene(batch, i, cfg, 5);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.channels(), batch[i].channels());
    auto allowed = label_counts(batch[i]);
    if (rec.mixed)
      for (auto [k, v] : label_counts(batch[rec.partner])) allowed[k] += v;
    for (auto [k, v] : label_counts(a)) EXPECT_LE(v, allowed[k]);
  }
  EXPECT_NE(augment_scene(batch, 0, cfg, 5), augment_scene(batch, 0, cfg, 6));
}

TEST(Pipeline, BatchMatchesPerScene) {
  std::vector<PointCloud> batch{room(20), room(21), room(22), room(23)};
  AugmentConfig cfg;
  cfg.seed = 5;
  auto all = augment_batch(batch, cfg, 9);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(all[i], augment_scene(batch, i, cfg, 9));
}

TEST(Pipeline, MixFrequencyMatchesProbability) {
  std::vector<PointCloud> batch;
  for (int i = 0; i < 4; ++i) {
    auto c = test::random_cloud(8, 1, 100 + i, 1.0, 3);
    c.instance_ids = std::vector<std::int32_t>(8, kNoInstance);
    batch.push_back(c);
  }
  auto cfg = AugmentConfig::none();
  cfg.mix_prob = 0.85;
  cfg.seed = 123;
  int mixed = 0;
  const int n = 10000;
  for (int s = 0; s < n; ++s) {
    AugmentRecord rec;
    augment_scene(batch, static_cast<std::size_t>(s % 4), cfg, static_cast<std::uint64_t>(s), &rec);
    mixed += rec.mixed;
  }
  EXPECT_NEAR(static_cast<double>(mixed) / n, 0.85, 0.02);
}

TEST(AugmentConfig, ValidationErrors) {
  AugmentConfig c;
  c.mix_prob = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = AugmentConfig{};
  c.scale = {-1.0, 1.0};
  EXPECT_THROW(c.validate(), ConfigError);
  c = AugmentConfig{};
  c.elastic = {{0.0, 0.4}};
  EXPECT_THROW(c.validate(), ConfigError);
}
