#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "volt/params.hpp"
#include "volt/scene.hpp"
#include "volt/tensor.hpp"

namespace volt {

// 3x3x3 neighbor lookup over occupied voxels. Offset k encodes
// (dx+1)*9 + (dy+1)*3 + (dz+1); missing neighbors are -1. Offsets k and
// 26-k are mirror images.
class NeighborTable {
public:
  static constexpr std::size_t kVolume = 27;

  NeighborTable() = default;
  explicit NeighborTable(std::span<const VoxelCoord> coords);

  std::size_t size() const { return voxels_; }
  std::ptrdiff_t at(std::size_t voxel, std::size_t offset) const {
    return index_[voxel * kVolume + offset];
  }

private:
  std::size_t voxels_ = 0;
  std::vector<std::ptrdiff_t> index_;
};

// Submanifold 3x3x3 convolution: outputs only at occupied voxels, zero
// padding at missing neighbors. weight: (27 * C_in) x C_out, bias: 1 x C_out.
template <typename T>
Matrix<T> neighborhood_conv(const Matrix<T>& x, const NeighborTable& table, const Param<T>& weight,
                            const Param<T>& bias);

template <typename T>
Matrix<T> neighborhood_conv_backward(const Matrix<T>& x, const Matrix<T>& dy,
                                     const NeighborTable& table, Param<T>& weight, Param<T>& bias,
                                     bool want_dx = true);

} // namespace volt
