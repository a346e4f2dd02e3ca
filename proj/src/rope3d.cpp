#include "volt/rope3d.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "volt/error.hpp"

namespace volt {

void RopeConfig::validate() const {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw ConfigError("rope head_dim must be a positive even number, got " + std::to_string(head_dim));
  }
  if (!(theta_base > 1.0)) throw ConfigError("rope theta_base must be > 1");
  const std::size_t used = 2 * (pairs[0] + pairs[1] + pairs[2]);
  if (used != head_dim) {
    throw ConfigError("rope allocation (" + std::to_string(pairs[0]) + "," +
                      std::to_string(pairs[1]) + "," + std::to_string(pairs[2]) + ") uses " +
                      std::to_string(used) + " dims but head_dim is " + std::to_string(head_dim));
  }
}

RopeConfig RopeConfig::asymmetric(std::size_t head_dim) {
  RopeConfig cfg;
  cfg.head_dim = head_dim;
  const std::size_t total = head_dim / 2;
  const std::size_t z = total / 4;
  const std::size_t x = (total - z + 1) / 2;
  cfg.pairs = {x, total - z - x, z};
  return cfg;
}

RopeConfig RopeConfig::symmetric(std::size_t head_dim) {
  RopeConfig cfg;
  cfg.head_dim = head_dim;
  const std::size_t total = head_dim / 2;
  const std::size_t base = total / 3;
  const std::size_t rem = total % 3;
  cfg.pairs = {base + (rem > 0 ? 1 : 0), base + (rem > 1 ? 1 : 0), base};
  return cfg;
}

RopeFrequencies build_frequencies(const RopeConfig& cfg) {
  cfg.validate();
  RopeFrequencies f;
  for (int a = 0; a < 3; ++a) {
    const std::size_t n = cfg.pairs[static_cast<std::size_t>(a)];
    f.axis[a].resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      f.axis[a][i] = std::pow(cfg.theta_base, -static_cast<double>(i) / static_cast<double>(n));
    }
  }
  return f;
}

template <typename T>
void apply_rope(Matrix<T>& x, std::size_t heads, std::span<const Position3> positions,
                const RopeFrequencies& freqs, bool inverse) {
  const std::size_t hd = 2 * freqs.total_pairs();
  if (heads == 0 || x.cols != heads * hd) {
    throw ShapeError("apply_rope: width " + std::to_string(x.cols) + " is not heads * head_dim (" +
                     std::to_string(heads) + " * " + std::to_string(hd) + ")");
  }
  if (positions.size() != x.rows) throw ShapeError("apply_rope: one position per token required");
  const double sign = inverse ? -1.0 : 1.0;

#pragma omp parallel
  {
    std::vector<T> cs(hd / 2), sn(hd / 2);
#pragma omp for schedule(static)
    for (std::ptrdiff_t tt = 0; tt < static_cast<std::ptrdiff_t>(x.rows); ++tt) {
      const auto t = static_cast<std::size_t>(tt);
      std::size_t k = 0;
      for (int a = 0; a < 3; ++a)
        for (double theta : freqs.axis[a]) {
          const double angle = sign * positions[t][a] * theta;
          cs[k] = static_cast<T>(std::cos(angle));
          sn[k] = static_cast<T>(std::sin(angle));
          ++k;
        }
      auto row = x.row(t);
      for (std::size_t h = 0; h < heads; ++h) {
        T* v = row.data() + h * hd;
        for (std::size_t p = 0; p < hd / 2; ++p) {
          const T a0 = v[2 * p];
          const T a1 = v[2 * p + 1];
          v[2 * p] = a0 * cs[p] - a1 * sn[p];
          v[2 * p + 1] = a0 * sn[p] + a1 * cs[p];
        }
      }
    }
  }
}

template void apply_rope<float>(Matrix<float>&, std::size_t, std::span<const Position3>,
                                const RopeFrequencies&, bool);
template void apply_rope<double>(Matrix<double>&, std::size_t, std::span<const Position3>,
                                 const RopeFrequencies&, bool);

std::vector<Position3> normalize_positions(std::span<const Position3> positions, const Position3& lo,
                                           const Position3& hi) {
  std::vector<Position3> out(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (int a = 0; a < 3; ++a) {
      const double span = hi[a] - lo[a];
      out[i][a] = span > 0.0 ? (positions[i][a] - lo[a]) / span : 0.0;
    }
  return out;
}

std::vector<Position3> rope_positions(std::span<const VoxelCoord> patch_coords,
                                      std::span<const std::size_t> segment_offsets,
                                      CoordinateMode mode) {
  std::vector<Position3> pos(patch_coords.size());
  for (std::size_t i = 0; i < pos.size(); ++i)
    for (int a = 0; a < 3; ++a) pos[i][a] = static_cast<double>(patch_coords[i][a]);
  if (mode == CoordinateMode::metric_index) return pos;

  for (std::size_t s = 0; s + 1 < segment_offsets.size(); ++s) {
    const auto begin = segment_offsets[s], end = segment_offsets[s + 1];
    Position3 lo, hi;
    lo.fill(std::numeric_limits<double>::infinity());
    hi.fill(-std::numeric_limits<double>::infinity());
    for (std::size_t i = begin; i < end; ++i)
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], pos[i][a]);
        hi[a] = std::max(hi[a], pos[i][a]);
      }
    auto seg = std::span<const Position3>(pos).subspan(begin, end - begin);
    auto norm = normalize_positions(seg, lo, hi);
    std::copy(norm.begin(), norm.end(), pos.begin() + static_cast<std::ptrdiff_t>(begin));
  }
  return pos;
}

} // namespace volt
