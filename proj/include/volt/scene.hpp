#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include "volt/tensor.hpp"

namespace volt {

inline constexpr std::int32_t kIgnoreLabel = -1;
inline constexpr std::int32_t kNoInstance = -1;

using Vec3f = std::array<float, 3>;
using VoxelCoord = std::array<std::int32_t, 3>;

struct VoxelCoordHash {
  std::size_t operator()(const VoxelCoord& c) const noexcept {
    std::uint64_t h = static_cast<std::uint32_t>(c[0]);
    h = h * 0x9e3779b97f4a7c15ULL ^ static_cast<std::uint32_t>(c[1]);
    h = h * 0x9e3779b97f4a7c15ULL ^ static_cast<std::uint32_t>(c[2]);
    return static_cast<std::size_t>(h ^ (h >> 29));
  }
};

// Raw scene: metric positions, per-point features, optional semantic labels
// and instance ids.
struct PointCloud {
  std::vector<Vec3f> positions;
  Matrix<float> features; // N x C
  std::optional<std::vector<std::int32_t>> labels;
  std::optional<std::vector<std::int32_t>> instance_ids;

  std::size_t size() const { return positions.size(); }
  std::size_t channels() const { return features.cols; }

  // Throws InvalidInput on empty clouds, non-finite positions or mismatched
  // side arrays.
  void validate() const;

  bool operator==(const PointCloud&) const = default;
};

// Occupied voxels of a cloud. Voxel order is the order in which voxels are
// first touched when scanning points by index.
struct SparseVoxelSet {
  std::vector<VoxelCoord> coords;
  Matrix<float> features; // M x C
  std::optional<std::vector<std::int32_t>> labels;
  std::vector<std::size_t> point_to_voxel; // N entries in [0, M)
  std::vector<std::size_t> representative; // M entries: index of the chosen point
  double voxel_size = 0.0;

  std::size_t size() const { return coords.size(); }
  std::size_t channels() const { return features.cols; }
};

enum class VoxelSampling { deterministic, stochastic };

// How a voxel's feature vector is formed. Labels always come from the
// representative point.
enum class VoxelFeature { representative, mean };

VoxelCoord voxel_of(const Vec3f& p, double voxel_size);

SparseVoxelSet voxelize(const PointCloud& cloud, double voxel_size,
                        VoxelSampling mode = VoxelSampling::deterministic, std::uint64_t seed = 0,
                        VoxelFeature feature = VoxelFeature::representative);

// Row i of the result is voxel_values[point_to_voxel[i]].
template <typename T>
Matrix<T> project_to_points(const Matrix<T>& voxel_values, const SparseVoxelSet& vset);

// Parameters of a synthetic labeled room.
struct SceneSpec {
  std::uint64_t seed = 0;
  std::array<double, 3> extent{4.0, 4.0, 2.5}; // meters
  int min_objects = 3;
  int max_objects = 6;
  int num_classes = 6;
  double noise = 0.002;    // positional jitter sigma, meters
  double density = 2500.0; // surface samples per square meter

  void validate() const;
};

// Floor (class 0), four walls (class 1) and axis-aligned boxes standing on
// the floor (class in [2, K), one instance id per box). Walls and floor carry
// no instance id. The result is shifted so every coordinate's minimum is 0.
PointCloud generate_scene(const SceneSpec& spec);

// "VOLT1" scene files. Little-endian; see README for the record layout.
void write_scene(const PointCloud& cloud, std::ostream& out);
PointCloud read_scene(std::istream& in);
void save_scene(const PointCloud& cloud, const std::filesystem::path& path);
PointCloud load_scene(const std::filesystem::path& path);

} // namespace volt
