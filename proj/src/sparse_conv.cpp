#include "volt/sparse_conv.hpp"

#include <unordered_map>

#include "volt/error.hpp"

namespace volt {

NeighborTable::NeighborTable(std::span<const VoxelCoord> coords)
    : voxels_(coords.size()), index_(coords.size() * kVolume, -1) {
  std::unordered_map<VoxelCoord, std::size_t, VoxelCoordHash> lookup;
  lookup.reserve(coords.size());
  for (std::size_t j = 0; j < coords.size(); ++j) lookup.emplace(coords[j], j);
  for (std::size_t j = 0; j < coords.size(); ++j) {
    std::size_t k = 0;
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dz = -1; dz <= 1; ++dz, ++k) {
          const VoxelCoord n{coords[j][0] + dx, coords[j][1] + dy, coords[j][2] + dz};
          auto it = lookup.find(n);
          if (it != lookup.end()) index_[j * kVolume + k] = static_cast<std::ptrdiff_t>(it->second);
        }
  }
}

template <typename T>
Matrix<T> neighborhood_conv(const Matrix<T>& x, const NeighborTable& table, const Param<T>& weight,
                            const Param<T>& bias) {
  const std::size_t cin = x.cols, cout = weight.value.cols;
  if (x.rows != table.size()) throw ShapeError("neighborhood_conv: input rows differ from voxel count");
  require_shape(weight.value, NeighborTable::kVolume * cin, cout, "neighborhood_conv weight");
  Matrix<T> y(x.rows, cout);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t jj = 0; jj < static_cast<std::ptrdiff_t>(x.rows); ++jj) {
    const auto j = static_cast<std::size_t>(jj);
    T* out = &y(j, 0);
    for (std::size_t d = 0; d < cout; ++d) out[d] = bias.value.data[d];
    for (std::size_t k = 0; k < NeighborTable::kVolume; ++k) {
      const std::ptrdiff_t n = table.at(j, k);
      if (n < 0) continue;
      const T* in = &x(static_cast<std::size_t>(n), 0);
      for (std::size_t c = 0; c < cin; ++c) {
        const T v = in[c];
        const T* w = &weight.value(k * cin + c, 0);
        for (std::size_t d = 0; d < cout; ++d) out[d] += v * w[d];
      }
    }
  }
  return y;
}

template <typename T>
Matrix<T> neighborhood_conv_backward(const Matrix<T>& x, const Matrix<T>& dy,
                                     const NeighborTable& table, Param<T>& weight, Param<T>& bias,
                                     bool want_dx) {
  const std::size_t cin = x.cols, cout = dy.cols;
  const std::size_t m = x.rows;
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t d = 0; d < cout; ++d) bias.grad.data[d] += dy(j, d);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t kk = 0; kk < static_cast<std::ptrdiff_t>(NeighborTable::kVolume); ++kk) {
    const auto k = static_cast<std::size_t>(kk);
    for (std::size_t j = 0; j < m; ++j) {
      const std::ptrdiff_t n = table.at(j, k);
      if (n < 0) continue;
      const T* in = &x(static_cast<std::size_t>(n), 0);
      const T* g = &dy(j, 0);
      for (std::size_t c = 0; c < cin; ++c) {
        T* w = &weight.grad(k * cin + c, 0);
        for (std::size_t d = 0; d < cout; ++d) w[d] += in[c] * g[d];
      }
    }
  }

  Matrix<T> dx;
  if (!want_dx) return dx;
  dx.resize(m, cin);
  // Voxel i feeds voxel j = neighbor(i, 26 - k) through offset k.
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    T* out = &dx(i, 0);
    for (std::size_t k = 0; k < NeighborTable::kVolume; ++k) {
      const std::ptrdiff_t j = table.at(i, NeighborTable::kVolume - 1 - k);
      if (j < 0) continue;
      const T* g = &dy(static_cast<std::size_t>(j), 0);
      for (std::size_t c = 0; c < cin; ++c) {
        const T* w = &weight.value(k * cin + c, 0);
        T acc = T(0);
        for (std::size_t d = 0; d < cout; ++d) acc += w[d] * g[d];
        out[c] += acc;
      }
    }
  }
  return dx;
}

template Matrix<float> neighborhood_conv<float>(const Matrix<float>&, const NeighborTable&,
                                                const Param<float>&, const Param<float>&);
template Matrix<double> neighborhood_conv<double>(const Matrix<double>&, const NeighborTable&,
                                                  const Param<double>&, const Param<double>&);
template Matrix<float> neighborhood_conv_backward<float>(const Matrix<float>&, const Matrix<float>&,
                                                         const NeighborTable&, Param<float>&,
                                                         Param<float>&, bool);
template Matrix<double> neighborhood_conv_backward<double>(const Matrix<double>&,
                                                           const Matrix<double>&,
                                                           const NeighborTable&, Param<double>&,
                                                           Param<double>&, bool);

} // namespace volt
