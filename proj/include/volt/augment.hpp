#pragma once

#include <array>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "volt/rng.hpp"
#include "volt/scene.hpp"

namespace volt {

struct Range {
  double lo = 0.0;
  double hi = 0.0;

  bool degenerate() const { return lo == hi; }
  double sample(Rng& rng) const { return lo == hi ? lo : uniform(rng, lo, hi); }
};

struct ElasticPass {
  double granularity = 0.2; // grid spacing, meters
  double magnitude = 0.4;   // meters
};

struct AugmentConfig {
  double mix_prob = 0.85;

  bool instance = true;
  Range instance_rotation{-std::numbers::pi, std::numbers::pi}; // about the instance centroid, z axis
  Range instance_scale{0.9, 1.1};
  std::array<Range, 3> instance_shift{Range{-0.1, 0.1}, Range{-0.1, 0.1}, Range{0.0, 0.0}};

  Range rotation_z{0.0, 2.0 * std::numbers::pi};
  Range tilt_x{-std::numbers::pi / 64, std::numbers::pi / 64};
  Range tilt_y{-std::numbers::pi / 64, std::numbers::pi / 64};
  Range scale{0.9, 1.1};
  std::array<Range, 3> translation{Range{-0.2, 0.2}, Range{-0.2, 0.2}, Range{-0.2, 0.2}};
  double flip_x_prob = 0.5;
  double flip_y_prob = 0.5;

  std::vector<ElasticPass> elastic{{0.2, 0.4}, {0.8, 1.6}};

  Range crop_ratio{0.8, 1.0};
  std::size_t crop_min_points = 100;

  Range dropout{0.0, 0.2};

  bool color_jitter = false;
  double brightness = 0.05; // additive, +-
  double contrast = 0.1;    // multiplicative about the mean, 1 +- contrast

  bool grid_shift = false; // random patch-grid offset in [0, P) per axis

  std::uint64_t seed = 0;

  // Every stage switched off: the pipeline returns its input unchanged.
  static AugmentConfig none();
  void validate() const;
};

// Rotation R = Rz(rotation_z) Ry(tilt_y) Rx(tilt_x) about the origin:
// p' = scale * R * flip(p) + translation.
struct RigidParams {
  double rotation_z = 0.0;
  double tilt_x = 0.0;
  double tilt_y = 0.0;
  double scale = 1.0;
  std::array<double, 3> translation{0.0, 0.0, 0.0};
  bool flip_x = false;
  bool flip_y = false;
};

RigidParams sample_rigid(const AugmentConfig& cfg, Rng& rng);

// Both inputs centered on their centroids and concatenated; b's instance ids
// are offset to stay distinct from a's.
PointCloud mix3d(const PointCloud& a, const PointCloud& b);

PointCloud rigid(const PointCloud& cloud, const RigidParams& params);

// Coarse-grid Gaussian noise at `granularity`, three separable box-blur
// passes, trilinear interpolation; displacements are clamped so that the
// largest one has norm at most `magnitude`.
PointCloud elastic(const PointCloud& cloud, double granularity, double magnitude, std::uint64_t seed);

// Independent rotation/scale about each instance centroid plus a shift.
// Points with instance id -1 are untouched.
PointCloud instance_transform(const PointCloud& cloud, const AugmentConfig& cfg, std::uint64_t seed);

// Axis-aligned box spanning `ratio` of the x/y extent (full height) at a
// random position; re-drawn up to 10 times while fewer than `min_points`
// survive, keeping the best attempt.
PointCloud crop(const PointCloud& cloud, double ratio, std::uint64_t seed, std::size_t min_points = 100);

// Keeps each point with probability 1 - p; at least one point survives.
PointCloud dropout(const PointCloud& cloud, double p, std::uint64_t seed);

PointCloud color_jitter(const PointCloud& cloud, double brightness, double contrast, std::uint64_t seed);

PointCloud select_points(const PointCloud& cloud, std::span<const std::size_t> indices);

struct AugmentRecord {
  bool mixed = false;
  std::size_t partner = 0;
  RigidParams rigid;
  double crop_ratio = 1.0;
  double dropout = 0.0;
};

// Augments batch[index] for a given step. The draw stream is derived from
// (cfg.seed, step, index) only, so scenes can be processed in any order.
// Stage order: mix3d, instance_transform, rigid, elastic passes, crop,
// dropout, color jitter.
PointCloud augment_scene(std::span<const PointCloud> batch, std::size_t index, const AugmentConfig& cfg,
                         std::uint64_t step, AugmentRecord* record = nullptr);

// All scenes of a batch, in parallel.
std::vector<PointCloud> augment_batch(std::span<const PointCloud> batch, const AugmentConfig& cfg,
                                      std::uint64_t step);

} // namespace volt
