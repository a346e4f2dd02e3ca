#include "volt/augment.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <string>

#include "volt/error.hpp"

namespace volt {

namespace {

enum Stage : std::uint64_t { kMix = 0, kInstance = 1, kRigid = 2, kCrop = 3, kDropout = 4, kColor = 5, kElastic = 16 };

void check_range(const Range& r, const char* name) {
  if (!(r.lo <= r.hi) || !std::isfinite(r.lo) || !std::isfinite(r.hi)) {
    throw ConfigError(std::string("augment: bad range for ") + name);
  }
}

void check_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augment: ") + name + " must be in [0, 1]");
}

std::array<double, 3> centroid(const PointCloud& cloud) {
  std::array<double, 3> c{0.0, 0.0, 0.0};
  for (const auto& p : cloud.positions)
    for (int a = 0; a < 3; ++a) c[a] += p[a];
  for (auto& v : c) v /= static_cast<double>(cloud.size());
  return c;
}

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 mul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
  return r;
}

Mat3 rot_x(double t) {
  const double c = std::cos(t), s = std::sin(t);
  return Mat3{{{1, 0, 0}, {0, c, -s}, {0, s, c}}};
}
Mat3 rot_y(double t) {
  const double c = std::cos(t), s = std::sin(t);
  return Mat3{{{c, 0, s}, {0, 1, 0}, {-s, 0, c}}};
}
Mat3 rot_z(double t) {
  const double c = std::cos(t), s = std::sin(t);
  return Mat3{{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
}

} // namespace

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.mix_prob = 0.0;
  c.instance = false;
  c.rotation_z = c.tilt_x = c.tilt_y = Range{0.0, 0.0};
  c.scale = Range{1.0, 1.0};
  c.translation = {Range{}, Range{}, Range{}};
  c.flip_x_prob = c.flip_y_prob = 0.0;
  c.elastic.clear();
  c.crop_ratio = Range{1.0, 1.0};
  c.dropout = Range{0.0, 0.0};
  c.color_jitter = false;
  c.grid_shift = false;
  return c;
}

void AugmentConfig::validate() const {
  check_prob(mix_prob, "mix_prob");
  check_prob(flip_x_prob, "flip_x_prob");
  check_prob(flip_y_prob, "flip_y_prob");
  check_range(instance_rotation, "instance_rotation");
  check_range(instance_scale, "instance_scale");
  for (const auto& r : instance_shift) check_range(r, "instance_shift");
  check_range(rotation_z, "rotation_z");
  check_range(tilt_x, "tilt_x");
  check_range(tilt_y, "tilt_y");
  check_range(scale, "scale");
  for (const auto& r : translation) check_range(r, "translation");
  check_range(crop_ratio, "crop_ratio");
  check_range(dropout, "dropout");
  if (!(scale.lo > 0.0) || !(instance_scale.lo > 0.0)) throw ConfigError("augment: scale range must be positive");
  if (!(crop_ratio.lo > 0.0) || crop_ratio.hi > 1.0) throw ConfigError("augment: crop ratio must be in (0, 1]");
  if (dropout.lo < 0.0 || dropout.hi > 1.0) throw ConfigError("augment: dropout must be in [0, 1]");
  for (const auto& e : elastic) {
    if (!(e.granularity > 0.0) || !(e.magnitude >= 0.0)) {
      throw ConfigError("augment: elastic granularity must be > 0 and magnitude >= 0");
    }
  }
  if (brightness < 0.0 || contrast < 0.0 || contrast >= 1.0) throw ConfigError("augment: bad color jitter amounts");
}

RigidParams sample_rigid(const AugmentConfig& cfg, Rng& rng) {
  RigidParams p;
  p.rotation_z = cfg.rotation_z.sample(rng);
  p.tilt_x = cfg.tilt_x.sample(rng);
  p.tilt_y = cfg.tilt_y.sample(rng);
  p.scale = cfg.scale.sample(rng);
  for (int a = 0; a < 3; ++a) p.translation[a] = cfg.translation[a].sample(rng);
  p.flip_x = bernoulli(rng, cfg.flip_x_prob);
  p.flip_y = bernoulli(rng, cfg.flip_y_prob);
  return p;
}

PointCloud select_points(const PointCloud& cloud, std::span<const std::size_t> indices) {
  PointCloud out;
  const std::size_t c = cloud.channels();
  out.positions.reserve(indices.size());
  out.features.resize(indices.size(), c);
  if (cloud.labels) out.labels.emplace();
  if (cloud.instance_ids) out.instance_ids.emplace();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    out.positions.push_back(cloud.positions[i]);
    std::copy_n(&cloud.features(i, 0), c, &out.features(k, 0));
    if (cloud.labels) out.labels->push_back((*cloud.labels)[i]);
    if (cloud.instance_ids) out.instance_ids->push_back((*cloud.instance_ids)[i]);
  }
  return out;
}

PointCloud mix3d(const PointCloud& a, const PointCloud& b) {
  if (!a.labels || !b.labels) throw InvalidInput("mix3d needs labeled clouds");
  if (a.channels() != b.channels()) throw ShapeError("mix3d: clouds differ in feature channels");
  a.validate();
  b.validate();
  PointCloud out;
  const std::size_t na = a.size(), nb = b.size(), c = a.channels();
  out.positions.reserve(na + nb);
  out.features.resize(na + nb, c);
  for (const PointCloud* src : {&a, &b}) {
    const auto ctr = centroid(*src);
    for (const auto& p : src->positions) {
      out.positions.push_back(Vec3f{static_cast<float>(p[0] - ctr[0]), static_cast<float>(p[1] - ctr[1]),
                                    static_cast<float>(p[2] - ctr[2])});
    }
  }
  std::copy(a.features.data.begin(), a.features.data.end(), out.features.data.begin());
  std::copy(b.features.data.begin(), b.features.data.end(),
            out.features.data.begin() + static_cast<std::ptrdiff_t>(na * c));
  out.labels.emplace(*a.labels);
  out.labels->insert(out.labels->end(), b.labels->begin(), b.labels->end());
  if (a.instance_ids || b.instance_ids) {
    std::int32_t offset = 0;
    auto& ids = out.instance_ids.emplace();
    if (a.instance_ids) {
      ids = *a.instance_ids;
      for (auto v : ids) offset = std::max(offset, v + 1);
    } else {
      ids.assign(na, kNoInstance);
    }
    if (b.instance_ids) {
      for (auto v : *b.instance_ids) ids.push_back(v >= 0 ? v + offset : v);
    } else {
      ids.insert(ids.end(), nb, kNoInstance);
    }
  }
  return out;
}

PointCloud rigid(const PointCloud& cloud, const RigidParams& params) {
  const Mat3 r = mul(rot_z(params.rotation_z), mul(rot_y(params.tilt_y), rot_x(params.tilt_x)));
  PointCloud out = cloud;
  for (auto& p : out.positions) {
    const double v[3] = {params.flip_x ? -static_cast<double>(p[0]) : p[0],
                         params.flip_y ? -static_cast<double>(p[1]) : p[1], p[2]};
    for (int i = 0; i < 3; ++i) {
      const double rv = r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2];
      p[i] = static_cast<float>(params.scale * rv + params.translation[i]);
    }
  }
  return out;
}

PointCloud elastic(const PointCloud& cloud, double granularity, double magnitude, std::uint64_t seed) {
  if (!(granularity > 0.0)) throw InvalidInput("elastic: granularity must be positive");
  if (magnitude == 0.0 || cloud.positions.empty()) return cloud;

  std::array<double, 3> lo{}, hi{};
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(-std::numeric_limits<double>::infinity());
  for (const auto& p : cloud.positions)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], static_cast<double>(p[a]));
      hi[a] = std::max(hi[a], static_cast<double>(p[a]));
    }
  std::array<std::size_t, 3> n{};
  double cells = 1.0;
  for (int a = 0; a < 3; ++a) {
    n[a] = static_cast<std::size_t>(std::floor((hi[a] - lo[a]) / granularity)) + 3;
    cells *= static_cast<double>(n[a]);
  }
  if (cells > 2e7) throw InvalidInput("elastic: granularity too fine for the scene extent");
  const std::size_t total = n[0] * n[1] * n[2];
  auto idx = [&](std::size_t x, std::size_t y, std::size_t z) { return (x * n[1] + y) * n[2] + z; };

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::array<std::vector<double>, 3> field;
  for (auto& f : field) {
    f.resize(total);
    for (auto& v : f) v = normal(rng);
  }
  std::vector<double> tmp(total);
  for (auto& f : field) {
    for (int pass = 0; pass < 3; ++pass) {
      for (int axis = 0; axis < 3; ++axis) {
        for (std::size_t x = 0; x < n[0]; ++x)
          for (std::size_t y = 0; y < n[1]; ++y)
            for (std::size_t z = 0; z < n[2]; ++z) {
              std::size_t c[3] = {x, y, z};
              const std::size_t i = c[axis];
              double s = f[idx(x, y, z)];
              int cnt = 1;
              if (i > 0) {
                c[axis] = i - 1;
                s += f[idx(c[0], c[1], c[2])];
                ++cnt;
              }
              if (i + 1 < n[axis]) {
                c[axis] = i + 1;
                s += f[idx(c[0], c[1], c[2])];
                ++cnt;
              }
              tmp[idx(x, y, z)] = s / cnt;
            }
        f.swap(tmp);
      }
    }
  }

  std::vector<std::array<double, 3>> disp(cloud.size());
  double max_norm = 0.0;
  for (std::size_t k = 0; k < cloud.size(); ++k) {
    std::size_t i0[3];
    double t[3];
    for (int a = 0; a < 3; ++a) {
      const double u = (cloud.positions[k][a] - lo[a]) / granularity + 1.0;
      const auto fi = static_cast<std::size_t>(std::floor(u));
      i0[a] = std::min(fi, n[a] - 2);
      t[a] = u - static_cast<double>(i0[a]);
    }
    for (int ch = 0; ch < 3; ++ch) {
      double v = 0.0;
      for (int corner = 0; corner < 8; ++corner) {
        double w = 1.0;
        std::size_t c[3];
        for (int a = 0; a < 3; ++a) {
          const int bit = (corner >> (2 - a)) & 1;
          c[a] = i0[a] + static_cast<std::size_t>(bit);
          w *= bit ? t[a] : 1.0 - t[a];
        }
        v += w * field[ch][idx(c[0], c[1], c[2])];
      }
      disp[k][ch] = v * magnitude;
    }
    max_norm = std::max(max_norm, std::hypot(disp[k][0], disp[k][1], disp[k][2]));
  }
  const double shrink = max_norm > magnitude ? magnitude / max_norm : 1.0;
  PointCloud out = cloud;
  for (std::size_t k = 0; k < cloud.size(); ++k)
    for (int a = 0; a < 3; ++a)
      out.positions[k][a] = static_cast<float>(cloud.positions[k][a] + disp[k][a] * shrink);
  return out;
}

PointCloud instance_transform(const PointCloud& cloud, const AugmentConfig& cfg, std::uint64_t seed) {
  if (!cloud.instance_ids) throw InvalidInput("instance_transform needs instance ids");
  const auto& ids = *cloud.instance_ids;
  std::map<std::int32_t, std::array<double, 4>> sums; // x, y, z, count
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (ids[i] < 0) continue;
    auto& s = sums[ids[i]];
    for (int a = 0; a < 3; ++a) s[a] += cloud.positions[i][a];
    s[3] += 1.0;
  }
  struct Params {
    std::array<double, 3> center, shift;
    double cos, sin, scale;
    bool pure_shift;
  };
  std::map<std::int32_t, Params> params;
  Rng rng(seed);
  for (const auto& [id, s] : sums) {
    Params p;
    for (int a = 0; a < 3; ++a) p.center[a] = s[a] / s[3];
    const double theta = cfg.instance_rotation.sample(rng);
    p.scale = cfg.instance_scale.sample(rng);
    for (int a = 0; a < 3; ++a) p.shift[a] = cfg.instance_shift[a].sample(rng);
    p.cos = std::cos(theta);
    p.sin = std::sin(theta);
    p.pure_shift = theta == 0.0 && p.scale == 1.0;
    params.emplace(id, p);
  }
  PointCloud out = cloud;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (ids[i] < 0) continue;
    const Params& p = params.at(ids[i]);
    auto& q = out.positions[i];
    if (p.pure_shift) {
      for (int a = 0; a < 3; ++a) q[a] = static_cast<float>(q[a] + p.shift[a]);
      continue;
    }
    const double dx = q[0] - p.center[0], dy = q[1] - p.center[1], dz = q[2] - p.center[2];
    q[0] = static_cast<float>(p.center[0] + p.scale * (p.cos * dx - p.sin * dy) + p.shift[0]);
    q[1] = static_cast<float>(p.center[1] + p.scale * (p.sin * dx + p.cos * dy) + p.shift[1]);
    q[2] = static_cast<float>(p.center[2] + p.scale * dz + p.shift[2]);
  }
  return out;
}

PointCloud crop(const PointCloud& cloud, double ratio, std::uint64_t seed, std::size_t min_points) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw InvalidInput("crop ratio must be in (0, 1]");
  if (ratio == 1.0 || cloud.positions.empty()) return cloud;
  std::array<double, 2> lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  std::array<double, 2> hi{-lo[0], -lo[1]};
  for (const auto& p : cloud.positions)
    for (int a = 0; a < 2; ++a) {
      lo[a] = std::min(lo[a], static_cast<double>(p[a]));
      hi[a] = std::max(hi[a], static_cast<double>(p[a]));
    }
  const std::size_t need = std::min(min_points, cloud.size());
  Rng rng(seed);
  std::vector<std::size_t> best, keep;
  for (int attempt = 0; attempt < 10; ++attempt) {
    std::array<double, 2> b0{}, b1{};
    for (int a = 0; a < 2; ++a) {
      const double side = ratio * (hi[a] - lo[a]);
      b0[a] = uniform(rng, lo[a], hi[a] - side);
      if (side == hi[a] - lo[a]) b0[a] = lo[a];
      b1[a] = b0[a] + side;
    }
    keep.clear();
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const auto& p = cloud.positions[i];
      if (p[0] >= b0[0] && p[0] <= b1[0] && p[1] >= b0[1] && p[1] <= b1[1]) keep.push_back(i);
    }
    if (keep.size() > best.size()) best.swap(keep);
    if (best.size() >= need && best.size() > 0) break;
  }
  if (best.empty()) return cloud;
  return select_points(cloud, best);
}

PointCloud dropout(const PointCloud& cloud, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidInput("dropout probability must be in [0, 1]");
  if (p == 0.0 || cloud.positions.empty()) return cloud;
  Rng rng(seed);
  std::vector<std::size_t> keep;
  keep.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i)
    if (!bernoulli(rng, p)) keep.push_back(i);
  if (keep.empty()) keep.push_back(std::uniform_int_distribution<std::size_t>(0, cloud.size() - 1)(rng));
  if (keep.size() == cloud.size()) return cloud;
  return select_points(cloud, keep);
}

PointCloud color_jitter(const PointCloud& cloud, double brightness, double contrast, std::uint64_t seed) {
  Rng rng(seed);
  const double shift = uniform(rng, -brightness, brightness);
  const double gain = 1.0 + uniform(rng, -contrast, contrast);
  PointCloud out = cloud;
  const std::size_t c = cloud.channels();
  std::vector<double> mean(c, 0.0);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (std::size_t k = 0; k < c; ++k) mean[k] += cloud.features(i, k);
  for (auto& m : mean) m /= static_cast<double>(std::max<std::size_t>(cloud.size(), 1));
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (std::size_t k = 0; k < c; ++k) {
      const double v = (cloud.features(i, k) - mean[k]) * gain + mean[k] + shift;
      out.features(i, k) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  return out;
}

PointCloud augment_scene(std::span<const PointCloud> batch, std::size_t index, const AugmentConfig& cfg,
                         std::uint64_t step, AugmentRecord* record) {
  if (index >= batch.size()) throw InvalidInput("augment_scene: scene index out of range");
  auto seed_for = [&](std::uint64_t stage) { return derive_seed(cfg.seed, {step, index, stage}); };
  AugmentRecord rec;
  PointCloud cloud = batch[index];

  {
    Rng rng(seed_for(kMix));
    if (bernoulli(rng, cfg.mix_prob)) {
      std::size_t partner = index;
      if (batch.size() > 1) {
        partner = std::uniform_int_distribution<std::size_t>(0, batch.size() - 2)(rng);
        if (partner >= index) ++partner;
      }
      cloud = mix3d(cloud, batch[partner]);
      rec.mixed = true;
      rec.partner = partner;
    }
  }
  if (cfg.instance && cloud.instance_ids) cloud = instance_transform(cloud, cfg, seed_for(kInstance));
  {
    Rng rng(seed_for(kRigid));
    rec.rigid = sample_rigid(cfg, rng);
    cloud = rigid(cloud, rec.rigid);
  }
  for (std::size_t e = 0; e < cfg.elastic.size(); ++e) {
    cloud = elastic(cloud, cfg.elastic[e].granularity, cfg.elastic[e].magnitude, seed_for(kElastic + e));
  }
  {
    Rng rng(seed_for(kCrop));
    rec.crop_ratio = cfg.crop_ratio.sample(rng);
    cloud = crop(cloud, rec.crop_ratio, rng(), cfg.crop_min_points);
  }
  {
    Rng rng(seed_for(kDropout));
    rec.dropout = cfg.dropout.sample(rng);
    cloud = dropout(cloud, rec.dropout, rng());
  }
  if (cfg.color_jitter) cloud = color_jitter(cloud, cfg.brightness, cfg.contrast, seed_for(kColor));
  if (record) *record = rec;
  return cloud;
}

std::vector<PointCloud> augment_batch(std::span<const PointCloud> batch, const AugmentConfig& cfg,
                                      std::uint64_t step) {
  std::vector<PointCloud> out(batch.size());
  std::exception_ptr err;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(batch.size()); ++i) {
    try {
      out[static_cast<std::size_t>(i)] = augment_scene(batch, static_cast<std::size_t>(i), cfg, step);
    } catch (...) {
#pragma omp critical(volt_augment_error)
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  return out;
}

} // namespace volt
