#include "volt/tokenizer.hpp"

#include <unordered_map>

#include "volt/error.hpp"
#include "volt/kernels.hpp"

namespace volt {

template <typename T>
void TokenBatch<T>::validate() const {
  if (segment_offsets.size() < 2 || segment_offsets.front() != 0 ||
      segment_offsets.back() != tokens.rows) {
    throw InvalidInput("token batch segment offsets must start at 0 and end at the token count");
  }
  for (std::size_t i = 0; i + 1 < segment_offsets.size(); ++i) {
    if (segment_offsets[i + 1] <= segment_offsets[i]) {
      throw InvalidInput("token batch has an empty segment");
    }
  }
  if (positions.size() != tokens.rows) throw ShapeError("token batch positions/tokens mismatch");
}

template <typename T>
PatchSet<T> patchify(const SparseVoxelSet& vset, const Matrix<T>& features, int patch_size,
                     VoxelCoord grid_shift) {
  if (patch_size < 1) throw InvalidInput("patch size must be >= 1");
  require_shape(features, vset.size(), features.cols, "patchify features");
  const std::size_t m = vset.size();
  const std::size_t c = features.cols;

  PatchSet<T> ps;
  ps.patch_size = patch_size;
  ps.channels = c;
  ps.voxel_to_patch.resize(m);
  ps.voxel_local_offset.resize(m);

  std::unordered_map<VoxelCoord, std::size_t, VoxelCoordHash> index;
  index.reserve(m);
  for (std::size_t j = 0; j < m; ++j) {
    VoxelCoord z = vset.coords[j];
    for (int a = 0; a < 3; ++a) z[a] += grid_shift[a];
    const VoxelCoord g{floor_div(z[0], patch_size), floor_div(z[1], patch_size),
                       floor_div(z[2], patch_size)};
    auto [it, inserted] = index.try_emplace(g, ps.patch_coords.size());
    if (inserted) ps.patch_coords.push_back(g);
    ps.voxel_to_patch[j] = it->second;
    ps.voxel_local_offset[j] = patch_slot(z, g, patch_size);
  }

  const std::size_t t = ps.size();
  ps.dense_vectors.resize(t, ps.slots() * c);
  for (std::size_t j = 0; j < m; ++j) {
    auto dst = ps.dense_vectors.row(ps.voxel_to_patch[j]);
    auto src = features.row(j);
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(ps.voxel_local_offset[j] * c));
  }

  ps.patch_voxel_begin.assign(t + 1, 0);
  for (std::size_t j = 0; j < m; ++j) ++ps.patch_voxel_begin[ps.voxel_to_patch[j] + 1];
  for (std::size_t i = 0; i < t; ++i) ps.patch_voxel_begin[i + 1] += ps.patch_voxel_begin[i];
  ps.patch_voxels.resize(m);
  std::vector<std::size_t> cursor(ps.patch_voxel_begin.begin(), ps.patch_voxel_begin.end() - 1);
  for (std::size_t j = 0; j < m; ++j) ps.patch_voxels[cursor[ps.voxel_to_patch[j]]++] = j;
  return ps;
}

template <typename T>
PatchSet<T> patchify(const SparseVoxelSet& vset, int patch_size, VoxelCoord grid_shift) {
  return patchify<T>(vset, cast<T>(vset.features), patch_size, grid_shift);
}

template <typename T>
TokenBatch<T> embed(const PatchSet<T>& patches, const Matrix<T>& weight, std::span<const T> bias) {
  if (weight.rows != patches.dense_vectors.cols) {
    throw ShapeError("embed: weight rows must equal P^3 * C = " +
                     std::to_string(patches.dense_vectors.cols));
  }
  if (bias.size() != weight.cols) throw ShapeError("embed: bias width mismatch");
  TokenBatch<T> out;
  kernels::matmul(patches.dense_vectors, weight, out.tokens);
  kernels::add_row_bias(out.tokens, bias);
  out.positions = patches.patch_coords;
  out.segment_offsets = {0, patches.size()};
  return out;
}

template <typename T>
void embed_backward(const PatchSet<T>& patches, const Matrix<T>& weight,
                    const Matrix<T>& d_tokens, Matrix<T>& d_weight, std::span<T> d_bias,
                    Matrix<T>* d_features) {
  require_shape(d_tokens, patches.size(), weight.cols, "embed_backward upstream");
  kernels::matmul_tn(patches.dense_vectors, d_tokens, d_weight, /*accumulate=*/true);
  kernels::column_sum(d_tokens, d_bias, /*accumulate=*/true);
  if (d_features) {
    Matrix<T> d_dense;
    kernels::matmul_nt(d_tokens, weight, d_dense);
    const std::size_t c = patches.channels;
    const std::size_t m = patches.voxel_to_patch.size();
    d_features->resize(m, c);
    for (std::size_t j = 0; j < m; ++j) {
      auto src = d_dense.row(patches.voxel_to_patch[j]);
      for (std::size_t k = 0; k < c; ++k)
        (*d_features)(j, k) = src[patches.voxel_local_offset[j] * c + k];
    }
  }
}

template <typename T>
ConvKernel3d<T> kernel_from_embedding(const Matrix<T>& weight, int patch_size, std::size_t channels) {
  const auto p = static_cast<std::size_t>(patch_size);
  require_shape(weight, p * p * p * channels, weight.cols, "kernel_from_embedding");
  ConvKernel3d<T> kernel(patch_size, channels, weight.cols);
  for (int kx = 0; kx < patch_size; ++kx)
    for (int ky = 0; ky < patch_size; ++ky)
      for (int kz = 0; kz < patch_size; ++kz) {
        const std::size_t slot = static_cast<std::size_t>((kx * patch_size + ky) * patch_size + kz);
        for (std::size_t c = 0; c < channels; ++c)
          for (std::size_t d = 0; d < weight.cols; ++d)
            kernel.at(kx, ky, kz, c, d) = weight(slot * channels + c, d);
      }
  return kernel;
}

template <typename T>
TokenBatch<T> embed_as_sparse_conv(const SparseVoxelSet& vset, const ConvKernel3d<T>& kernel,
                                   std::span<const T> bias) {
  if (kernel.in_channels != vset.channels()) {
    throw ShapeError("embed_as_sparse_conv: kernel input channels differ from voxel features");
  }
  if (bias.size() != kernel.out_channels) throw ShapeError("embed_as_sparse_conv: bias width mismatch");
  const int stride = kernel.size;
  const std::size_t out_ch = kernel.out_channels;

  TokenBatch<T> out;
  std::unordered_map<VoxelCoord, std::size_t, VoxelCoordHash> cells;
  std::vector<std::vector<T>> acc;
  for (std::size_t j = 0; j < vset.size(); ++j) {
    const VoxelCoord& z = vset.coords[j];
    VoxelCoord cell{};
    int local[3];
    for (int a = 0; a < 3; ++a) {
      // Output cell o covers input voxels [o * stride, o * stride + stride).
      cell[a] = floor_div(z[a], stride);
      local[a] = z[a] - cell[a] * stride;
    }
    auto [it, inserted] = cells.try_emplace(cell, acc.size());
    if (inserted) {
      out.positions.push_back(cell);
      acc.emplace_back(bias.begin(), bias.end());
    }
    auto& dst = acc[it->second];
    for (std::size_t c = 0; c < kernel.in_channels; ++c) {
      const T f = static_cast<T>(vset.features(j, c));
      for (std::size_t d = 0; d < out_ch; ++d) dst[d] += kernel.at(local[0], local[1], local[2], c, d) * f;
    }
  }
  out.tokens.resize(acc.size(), out_ch);
  for (std::size_t t = 0; t < acc.size(); ++t) std::copy(acc[t].begin(), acc[t].end(), out.tokens.row(t).begin());
  out.segment_offsets = {0, acc.size()};
  return out;
}

template <typename T>
TokenBatch<T> concat_batches(std::span<const TokenBatch<T>> parts) {
  if (parts.empty()) throw InvalidInput("concat_batches: no parts");
  const std::size_t d = parts.front().tokens.cols;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.tokens.cols != d) throw ShapeError("concat_batches: token widths differ");
    total += p.size();
  }
  TokenBatch<T> out;
  out.tokens.resize(total, d);
  out.positions.reserve(total);
  out.segment_offsets = {0};
  std::size_t row = 0;
  for (const auto& p : parts) {
    std::copy(p.tokens.data.begin(), p.tokens.data.end(),
              out.tokens.data.begin() + static_cast<std::ptrdiff_t>(row * d));
    out.positions.insert(out.positions.end(), p.positions.begin(), p.positions.end());
    for (std::size_t s = 1; s < p.segment_offsets.size(); ++s)
      out.segment_offsets.push_back(row + p.segment_offsets[s]);
    row += p.size();
  }
  return out;
}

#define VOLT_INSTANTIATE_TOKENIZER(T)                                                             \
  template struct TokenBatch<T>;                                                                  \
  template PatchSet<T> patchify<T>(const SparseVoxelSet&, int, VoxelCoord);                       \
  template PatchSet<T> patchify<T>(const SparseVoxelSet&, const Matrix<T>&, int, VoxelCoord);     \
  template TokenBatch<T> embed<T>(const PatchSet<T>&, const Matrix<T>&, std::span<const T>);      \
  template void embed_backward<T>(const PatchSet<T>&, const Matrix<T>&, const Matrix<T>&,         \
                                  Matrix<T>&, std::span<T>, Matrix<T>*);                          \
  template ConvKernel3d<T> kernel_from_embedding<T>(const Matrix<T>&, int, std::size_t);          \
  template TokenBatch<T> embed_as_sparse_conv<T>(const SparseVoxelSet&, const ConvKernel3d<T>&,   \
                                                 std::span<const T>);                             \
  template TokenBatch<T> concat_batches<T>(std::span<const TokenBatch<T>>);

VOLT_INSTANTIATE_TOKENIZER(float)
VOLT_INSTANTIATE_TOKENIZER(double)

} // namespace volt
