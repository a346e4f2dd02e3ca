#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "volt/scene.hpp"
#include "volt/tensor.hpp"

namespace volt {

// Non-empty P x P x P patches of a voxel set. Inside a patch, slot index is
// (lx * P + ly) * P + lz with local = z - P * floor(z / P); the C features of
// a voxel occupy columns [slot * C, slot * C + C) of its dense vector.
template <typename T>
struct PatchSet {
  int patch_size = 1;
  std::size_t channels = 0;
  std::vector<VoxelCoord> patch_coords;         // T rows
  Matrix<T> dense_vectors;                      // T x (P^3 * C)
  std::vector<std::size_t> voxel_to_patch;      // M
  std::vector<std::size_t> voxel_local_offset;  // M, in [0, P^3)
  std::vector<std::size_t> patch_voxel_begin;   // T + 1, CSR over patch_voxels
  std::vector<std::size_t> patch_voxels;        // M, voxel ids grouped by patch

  std::size_t size() const { return patch_coords.size(); }
  std::size_t slots() const {
    const auto p = static_cast<std::size_t>(patch_size);
    return p * p * p;
  }
};

// Embedded tokens of one or more scenes. Scenes are concatenated; scene s
// owns rows [segment_offsets[s], segment_offsets[s + 1]).
template <typename T>
struct TokenBatch {
  Matrix<T> tokens;                         // T_total x D
  std::vector<VoxelCoord> positions;        // patch-grid indices
  std::vector<std::size_t> segment_offsets; // first 0, last T_total

  std::size_t size() const { return tokens.rows; }
  std::size_t num_segments() const {
    return segment_offsets.empty() ? 0 : segment_offsets.size() - 1;
  }
  void validate() const;
};

inline std::int32_t floor_div(std::int32_t a, std::int32_t b) {
  std::int32_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

inline std::size_t patch_slot(const VoxelCoord& z, const VoxelCoord& patch, int p) {
  const std::int32_t lx = z[0] - p * patch[0];
  const std::int32_t ly = z[1] - p * patch[1];
  const std::int32_t lz = z[2] - p * patch[2];
  return static_cast<std::size_t>((lx * p + ly) * p + lz);
}

// `grid_shift` offsets the patch grid origin (in voxels); zero keeps the grid
// anchored at voxel index 0.
template <typename T>
PatchSet<T> patchify(const SparseVoxelSet& vset, int patch_size, VoxelCoord grid_shift = {0, 0, 0});

// Same as above but with explicit per-voxel features (M x C), used when the
// features themselves are differentiated.
template <typename T>
PatchSet<T> patchify(const SparseVoxelSet& vset, const Matrix<T>& features, int patch_size,
                     VoxelCoord grid_shift = {0, 0, 0});

// tokens[t] = W^T u_t + b. W: (P^3 C) x D.
template <typename T>
TokenBatch<T> embed(const PatchSet<T>& patches, const Matrix<T>& weight, std::span<const T> bias);

// Gradients of `embed`. Parameter gradients accumulate; d_features (M x C)
// is overwritten when non-null.
template <typename T>
void embed_backward(const PatchSet<T>& patches, const Matrix<T>& weight,
                    const Matrix<T>& d_tokens, Matrix<T>& d_weight, std::span<T> d_bias,
                    Matrix<T>* d_features);

// Dense 3D convolution kernel laid out as [kx][ky][kz][in][out].
template <typename T>
struct ConvKernel3d {
  int size = 1;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::vector<T> weights;

  ConvKernel3d() = default;
  ConvKernel3d(int k, std::size_t in, std::size_t out)
      : size(k), in_channels(in), out_channels(out),
        weights(static_cast<std::size_t>(k) * k * k * in * out, T(0)) {}

  T& at(int kx, int ky, int kz, std::size_t c, std::size_t d) {
    return weights[index(kx, ky, kz, c, d)];
  }
  const T& at(int kx, int ky, int kz, std::size_t c, std::size_t d) const {
    return weights[index(kx, ky, kz, c, d)];
  }

private:
  std::size_t index(int kx, int ky, int kz, std::size_t c, std::size_t d) const {
    const auto k = static_cast<std::size_t>(size);
    const std::size_t cell = (static_cast<std::size_t>(kx) * k + static_cast<std::size_t>(ky)) * k +
                             static_cast<std::size_t>(kz);
    return (cell * in_channels + c) * out_channels + d;
  }
};

// Reinterprets a flattened patch-embedding matrix as a stride-P convolution
// kernel under the slot order above.
template <typename T>
ConvKernel3d<T> kernel_from_embedding(const Matrix<T>& weight, int patch_size, std::size_t channels);

// Sparse 3D convolution with kernel size and stride P evaluated only at
// non-empty output cells: each occupied voxel scatters kernel[local]^T f
// into its output cell. Output cells are emitted in first-touch order.
template <typename T>
TokenBatch<T> embed_as_sparse_conv(const SparseVoxelSet& vset, const ConvKernel3d<T>& kernel,
                                   std::span<const T> bias);

// Concatenates single-scene batches into one multi-segment batch.
template <typename T>
TokenBatch<T> concat_batches(std::span<const TokenBatch<T>> parts);

} // namespace volt
