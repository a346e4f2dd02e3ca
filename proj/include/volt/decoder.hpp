#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "volt/params.hpp"
#include "volt/scene.hpp"
#include "volt/sparse_conv.hpp"
#include "volt/tokenizer.hpp"

namespace volt {

// none: every voxel takes its patch token as feature. light: one transposed
// convolution with kernel size and stride P. big: light followed by two
// residual blocks of 3x3x3 neighborhood convolutions.
enum class DecoderMode { none, light, big };

DecoderMode parse_decoder_mode(std::string_view s);
std::string_view to_string(DecoderMode m);

struct DecoderConfig {
  DecoderMode mode = DecoderMode::light;
  std::size_t token_width = 64; // D
  std::size_t width = 64;       // D'; forced to D in mode none
  int patch_size = 5;
  std::vector<std::size_t> dataset_classes{6}; // K_d per dataset id
  bool distill_head = true;                    // head width K_0

  std::size_t feature_width() const { return mode == DecoderMode::none ? token_width : width; }
  void validate() const;
};

template <typename T>
void register_decoder_params(ParamStore<T>& store, const DecoderConfig& cfg);

// F_j = kernel[o_j]^T token_{t_j} + bias where kernel rows
// [o * D, o * D + D) hold slot o's D x D' block. Tokens: one row per patch.
template <typename T>
Matrix<T> upsample(const Matrix<T>& tokens, const PatchSet<T>& patches, const Matrix<T>& kernel,
                   std::span<const T> bias);

// Accumulates kernel/bias grads; returns d(tokens).
template <typename T>
Matrix<T> upsample_backward(const Matrix<T>& tokens, const PatchSet<T>& patches,
                            const Matrix<T>& kernel, const Matrix<T>& d_features,
                            Matrix<T>& d_kernel, std::span<T> d_bias);

template <typename T>
struct DecoderTrace {
  Matrix<T> tokens;
  std::vector<Matrix<T>> stage_inputs; // big mode: input of each conv
  std::vector<Matrix<T>> pre_relu;     // big mode: output of first conv per block
  NeighborTable neighbors;
};

// Per-voxel features F (M x D') of one scene from its tokens.
template <typename T>
Matrix<T> decoder_forward(const Matrix<T>& tokens, const PatchSet<T>& patches,
                          const SparseVoxelSet& vset, const DecoderConfig& cfg,
                          const ParamStore<T>& store, DecoderTrace<T>* trace);

template <typename T>
Matrix<T> decoder_backward(const Matrix<T>& d_features, const PatchSet<T>& patches,
                           const DecoderConfig& cfg, ParamStore<T>& store,
                           const DecoderTrace<T>& trace);

// Linear heads. Unknown dataset ids raise InvalidInput.
template <typename T>
Matrix<T> seg_logits(const Matrix<T>& features, std::size_t dataset_id, const ParamStore<T>& store);
template <typename T>
Matrix<T> distill_logits(const Matrix<T>& features, const ParamStore<T>& store);

template <typename T>
Matrix<T> seg_logits_backward(const Matrix<T>& features, const Matrix<T>& d_logits,
                              std::size_t dataset_id, ParamStore<T>& store);
template <typename T>
Matrix<T> distill_logits_backward(const Matrix<T>& features, const Matrix<T>& d_logits,
                                  ParamStore<T>& store);

// Row-wise argmax; ties go to the lowest class index.
template <typename T>
std::vector<std::int32_t> argmax_rows(const Matrix<T>& logits);

// Per-point class ids: argmax per voxel projected through point_to_voxel.
template <typename T>
std::vector<std::int32_t> predict_points(const Matrix<T>& voxel_logits, const SparseVoxelSet& vset);

} // namespace volt
