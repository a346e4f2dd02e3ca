#include "volt/scene.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <unordered_map>

#include "volt/error.hpp"
#include "volt/rng.hpp"
#include "binary_io.hpp"

namespace volt {

void PointCloud::validate() const {
  if (positions.empty()) throw InvalidInput("point cloud is empty");
  if (features.rows != positions.size() || features.cols == 0) {
    throw InvalidInput("point cloud features must be N x C with C >= 1");
  }
  for (const auto& p : positions) {
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2])) {
      throw InvalidInput("point cloud contains non-finite coordinates");
    }
  }
  if (labels && labels->size() != positions.size()) {
    throw InvalidInput("label count does not match point count");
  }
  if (instance_ids && instance_ids->size() != positions.size()) {
    throw InvalidInput("instance id count does not match point count");
  }
}

VoxelCoord voxel_of(const Vec3f& p, double voxel_size) {
  VoxelCoord c{};
  for (int a = 0; a < 3; ++a) {
    c[a] = static_cast<std::int32_t>(std::floor(static_cast<double>(p[a]) / voxel_size));
  }
  return c;
}

SparseVoxelSet voxelize(const PointCloud& cloud, double voxel_size, VoxelSampling mode,
                        std::uint64_t seed, VoxelFeature feature) {
  if (!(voxel_size > 0.0)) throw InvalidInput("voxel size must be positive");
  cloud.validate();

  const std::size_t n = cloud.size();
  const std::size_t channels = cloud.channels();
  SparseVoxelSet out;
  out.voxel_size = voxel_size;
  out.point_to_voxel.resize(n);

  std::unordered_map<VoxelCoord, std::size_t, VoxelCoordHash> index;
  index.reserve(n);
  std::vector<std::size_t> counts;
  Rng rng(seed);

  for (std::size_t i = 0; i < n; ++i) {
    const VoxelCoord c = voxel_of(cloud.positions[i], voxel_size);
    auto [it, inserted] = index.try_emplace(c, out.coords.size());
    const std::size_t v = it->second;
    if (inserted) {
      out.coords.push_back(c);
      out.representative.push_back(i);
      counts.push_back(1);
    } else {
      ++counts[v];
      // Reservoir sampling of size one gives a uniform pick over the voxel.
      if (mode == VoxelSampling::stochastic &&
          std::uniform_int_distribution<std::size_t>(0, counts[v] - 1)(rng) == 0) {
        out.representative[v] = i;
      }
    }
    out.point_to_voxel[i] = v;
  }

  const std::size_t m = out.coords.size();
  out.features.resize(m, channels);
  if (feature == VoxelFeature::representative) {
    for (std::size_t v = 0; v < m; ++v) {
      auto src = cloud.features.row(out.representative[v]);
      std::copy(src.begin(), src.end(), out.features.row(v).begin());
    }
  } else {
    Matrix<double> acc(m, channels);
    for (std::size_t i = 0; i < n; ++i) {
      auto src = cloud.features.row(i);
      for (std::size_t c = 0; c < channels; ++c) acc(out.point_to_voxel[i], c) += src[c];
    }
    for (std::size_t v = 0; v < m; ++v)
      for (std::size_t c = 0; c < channels; ++c)
        out.features(v, c) = static_cast<float>(acc(v, c) / static_cast<double>(counts[v]));
  }

  if (cloud.labels) {
    std::vector<std::int32_t> labels(m);
    for (std::size_t v = 0; v < m; ++v) labels[v] = (*cloud.labels)[out.representative[v]];
    out.labels = std::move(labels);
  }
  return out;
}

template <typename T>
Matrix<T> project_to_points(const Matrix<T>& voxel_values, const SparseVoxelSet& vset) {
  if (voxel_values.rows != vset.size()) {
    throw ShapeError("project_to_points: expected " + std::to_string(vset.size()) +
                     " voxel rows, got " + std::to_string(voxel_values.rows));
  }
  Matrix<T> out(vset.point_to_voxel.size(), voxel_values.cols);
  for (std::size_t i = 0; i < vset.point_to_voxel.size(); ++i) {
    auto src = voxel_values.row(vset.point_to_voxel[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

template Matrix<float> project_to_points(const Matrix<float>&, const SparseVoxelSet&);
template Matrix<double> project_to_points(const Matrix<double>&, const SparseVoxelSet&);
template Matrix<std::int32_t> project_to_points(const Matrix<std::int32_t>&,
                                                const SparseVoxelSet&);

// ---------------------------------------------------------------------------
// Synthetic rooms

void SceneSpec::validate() const {
  for (double e : extent) {
    if (!(e > 0.0)) throw InvalidInput("scene extent must be positive");
  }
  if (num_classes < 2) throw InvalidInput("scene needs at least 2 classes");
  if (min_objects < 0 || max_objects < min_objects) {
    throw InvalidInput("invalid object count range");
  }
  if (max_objects > 0 && num_classes < 3) {
    throw InvalidInput("objects need a class index >= 2, so K must be >= 3");
  }
  if (!(density > 0.0) || noise < 0.0) throw InvalidInput("invalid density or noise");
}

namespace {

using Color = std::array<float, 3>;

Color class_color(int cls, int num_classes) {
  if (cls == 0) return {0.55f, 0.42f, 0.30f};
  if (cls == 1) return {0.85f, 0.85f, 0.80f};
  // Evenly spaced hues for object classes.
  const double h = 6.0 * static_cast<double>(cls - 2) / std::max(1, num_classes - 2);
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(h) % 6) {
    case 0: r = 1, g = x; break;
    case 1: r = x, g = 1; break;
    case 2: g = 1, b = x; break;
    case 3: g = x, b = 1; break;
    case 4: r = x, b = 1; break;
    default: r = 1, b = x; break;
  }
  return {static_cast<float>(0.15 + 0.7 * r), static_cast<float>(0.15 + 0.7 * g),
          static_cast<float>(0.15 + 0.7 * b)};
}

struct Box {
  double x0, y0, x1, y1, height;
  int cls;
};

class SceneBuilder {
public:
  SceneBuilder(const SceneSpec& spec) : spec_(spec), rng_(spec.seed) {}

  void add_point(double x, double y, double z, int label, int instance, const Color& base) {
    std::normal_distribution<double> jitter(0.0, 1.0);
    const double s = spec_.noise;
    positions_.push_back({static_cast<float>(x + s * jitter(rng_)),
                          static_cast<float>(y + s * jitter(rng_)),
                          static_cast<float>(z + s * jitter(rng_))});
    for (int c = 0; c < 3; ++c) {
      const double v = base[c] + 0.02 * jitter(rng_);
      colors_.push_back(static_cast<float>(std::clamp(v, 0.0, 1.0)));
    }
    labels_.push_back(label);
    instances_.push_back(instance);
  }

  std::size_t samples(double area) const {
    return static_cast<std::size_t>(std::llround(area * spec_.density));
  }

  // Axis-aligned rectangle spanned from `origin` along axes u and v.
  template <typename Reject>
  void sample_rect(std::array<double, 3> origin, int axis_u, double len_u, int axis_v,
                   double len_v, int label, int instance, const Color& base, Reject reject) {
    const std::size_t n = samples(len_u * len_v);
    for (std::size_t i = 0; i < n; ++i) {
      auto p = origin;
      p[axis_u] += uniform(rng_, 0.0, len_u);
      p[axis_v] += uniform(rng_, 0.0, len_v);
      if (reject(p)) continue;
      add_point(p[0], p[1], p[2], label, instance, base);
    }
  }

  PointCloud build() {
    const auto [ex, ey, ez] = spec_.extent;
    const int k = spec_.num_classes;
    const int n_obj = std::uniform_int_distribution<int>(spec_.min_objects, spec_.max_objects)(rng_);

    std::vector<Box> boxes;
    for (int attempt = 0; static_cast<int>(boxes.size()) < n_obj && attempt < 50 * (n_obj + 1);
         ++attempt) {
      const double sx = uniform(rng_, 0.12, 0.35) * std::min(ex, ey);
      const double sy = uniform(rng_, 0.12, 0.35) * std::min(ex, ey);
      const double sz = uniform(rng_, 0.15, 0.6) * ez;
      const double margin = 0.05 * std::min(ex, ey);
      if (sx + 2 * margin >= ex || sy + 2 * margin >= ey) continue;
      const double x0 = uniform(rng_, margin, ex - margin - sx);
      const double y0 = uniform(rng_, margin, ey - margin - sy);
      const Box b{x0, y0, x0 + sx, y0 + sy, sz,
                  std::uniform_int_distribution<int>(2, k - 1)(rng_)};
      const bool overlaps = std::any_of(boxes.begin(), boxes.end(), [&](const Box& o) {
        return b.x0 < o.x1 && o.x0 < b.x1 && b.y0 < o.y1 && o.y0 < b.y1;
      });
      if (!overlaps) boxes.push_back(b);
    }

    auto under_box = [&](const std::array<double, 3>& p) {
      return std::any_of(boxes.begin(), boxes.end(), [&](const Box& b) {
        return p[0] > b.x0 && p[0] < b.x1 && p[1] > b.y0 && p[1] < b.y1;
      });
    };
    auto keep = [](const std::array<double, 3>&) { return false; };

    const Color floor_c = class_color(0, k);
    const Color wall_c = class_color(1, k);
    sample_rect({0, 0, 0}, 0, ex, 1, ey, 0, kNoInstance, floor_c, under_box);
    sample_rect({0, 0, 0}, 1, ey, 2, ez, 1, kNoInstance, wall_c, keep);
    sample_rect({ex, 0, 0}, 1, ey, 2, ez, 1, kNoInstance, wall_c, keep);
    sample_rect({0, 0, 0}, 0, ex, 2, ez, 1, kNoInstance, wall_c, keep);
    sample_rect({0, ey, 0}, 0, ex, 2, ez, 1, kNoInstance, wall_c, keep);

    for (std::size_t id = 0; id < boxes.size(); ++id) {
      const Box& b = boxes[id];
      Color c = class_color(b.cls, k);
      for (auto& ch : c) ch = static_cast<float>(std::clamp(ch + uniform(rng_, -0.05, 0.05), 0.0, 1.0));
      const int inst = static_cast<int>(id);
      const double w = b.x1 - b.x0, d = b.y1 - b.y0;
      sample_rect({b.x0, b.y0, b.height}, 0, w, 1, d, b.cls, inst, c, keep);
      sample_rect({b.x0, b.y0, 0}, 0, w, 2, b.height, b.cls, inst, c, keep);
      sample_rect({b.x0, b.y1, 0}, 0, w, 2, b.height, b.cls, inst, c, keep);
      sample_rect({b.x0, b.y0, 0}, 1, d, 2, b.height, b.cls, inst, c, keep);
      sample_rect({b.x1, b.y0, 0}, 1, d, 2, b.height, b.cls, inst, c, keep);
    }

    PointCloud cloud;
    const std::size_t n = positions_.size();
    Vec3f lo{positions_[0]};
    for (const auto& p : positions_)
      for (int a = 0; a < 3; ++a) lo[a] = std::min(lo[a], p[a]);
    cloud.positions = std::move(positions_);
    for (auto& p : cloud.positions)
      for (int a = 0; a < 3; ++a) p[a] -= lo[a];
    cloud.features.rows = n;
    cloud.features.cols = 3;
    cloud.features.data = std::move(colors_);
    cloud.labels = std::move(labels_);
    cloud.instance_ids = std::move(instances_);
    return cloud;
  }

private:
  const SceneSpec& spec_;
  Rng rng_;
  std::vector<Vec3f> positions_;
  std::vector<float> colors_;
  std::vector<std::int32_t> labels_;
  std::vector<std::int32_t> instances_;
};

} // namespace

PointCloud generate_scene(const SceneSpec& spec) {
  spec.validate();
  return SceneBuilder(spec).build();
}

// ---------------------------------------------------------------------------
// VOLT1 scene files

namespace {

constexpr char kMagic[4] = {'V', 'O', 'L', 'T'};
constexpr std::uint32_t kVersion = 1;

} // namespace

void write_scene(const PointCloud& cloud, std::ostream& out) {
  cloud.validate();
  detail::ByteWriter w(out);
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint64_t>(cloud.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cloud.channels()));
  w.put<std::uint8_t>(cloud.labels ? 1 : 0);
  w.put<std::uint8_t>(cloud.instance_ids ? 1 : 0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (float v : cloud.positions[i]) w.put<float>(v);
    for (float v : cloud.features.row(i)) w.put<float>(v);
    if (cloud.labels) w.put<std::int32_t>((*cloud.labels)[i]);
    if (cloud.instance_ids) w.put<std::int32_t>((*cloud.instance_ids)[i]);
  }
  if (!out) throw FormatError("failed writing scene");
}

PointCloud read_scene(std::istream& in) {
  detail::ByteReader r(in, "scene file");
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic, not a VOLT1 scene file");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw FormatError("unsupported scene version " + std::to_string(version));
  }
  const auto n = r.get<std::uint64_t>("point count");
  const auto c = r.get<std::uint32_t>("channel count");
  const auto has_labels = r.get<std::uint8_t>("label flag");
  const auto has_instances = r.get<std::uint8_t>("instance flag");
  if (n == 0 || c == 0) throw FormatError("scene header declares no points or no channels");
  if (has_labels > 1 || has_instances > 1) throw FormatError("bad flag byte in scene header");

  PointCloud cloud;
  cloud.positions.resize(n);
  cloud.features.resize(n, c);
  if (has_labels) cloud.labels.emplace(n);
  if (has_instances) cloud.instance_ids.emplace(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : cloud.positions[i]) v = r.get<float>("point record");
    for (auto& v : cloud.features.row(i)) v = r.get<float>("point record");
    if (has_labels) (*cloud.labels)[i] = r.get<std::int32_t>("point record");
    if (has_instances) (*cloud.instance_ids)[i] = r.get<std::int32_t>("point record");
  }
  if (!r.at_end()) throw FormatError("trailing bytes after scene");
  return cloud;
}

void save_scene(const PointCloud& cloud, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_scene(cloud, out);
}

PointCloud load_scene(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_scene(in);
}

} // namespace volt
