#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "volt/kernels.hpp"
#include "volt/layers.hpp"
#include "volt/params.hpp"
#include "volt/rng.hpp"
#include "volt/rope3d.hpp"
#include "volt/tokenizer.hpp"

namespace volt {

struct EncoderConfig {
  std::size_t depth = 2;
  std::size_t width = 64;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 4;
  double droppath_max = 0.3;
  bool qk_norm = true;
  bool final_norm = true; // LayerNorm after the last block (only when depth > 0)
  RopeConfig rope = RopeConfig::asymmetric(32);

  std::size_t head_dim() const { return heads ? width / heads : 0; }
  // Stochastic depth rate of block `index` (0-based): linear from 0 at the
  // first block to droppath_max at the last.
  double droppath_rate(std::size_t index) const;
  void validate() const;

  // "volt-tiny" (D=64, L=2, H=2), "volt-s" (D=384, L=12, H=6), "volt-b" (D=768, L=12, H=12).
  static EncoderConfig preset(std::string_view name);
};

// Registers every encoder tensor (zero-valued) under "blocks.<l>.*" and "norm.*".
template <typename T>
void register_encoder_params(ParamStore<T>& store, const EncoderConfig& cfg);

// Initial QKNorm gain: gain^2 = sqrt(head_dim), so the initial logit range
// matches unnormalized scaled dot-product attention.
double initial_qk_gain(std::size_t head_dim);

template <typename T>
struct AttentionTrace {
  Matrix<T> input;            // normalized block input
  Matrix<T> q_raw, k_raw, v;  // projections
  Matrix<T> q_unit, k_unit;   // L2-normalized per head (qk_norm only)
  std::vector<T> q_len, k_len;
  Matrix<T> q, k;             // what enters the softmax, after gain and rotation
  AttentionProbs<T> probs;
  Matrix<T> heads_out;        // before the output projection
};

template <typename T>
struct MlpTrace {
  Matrix<T> input;
  Matrix<T> pre_act;
  Matrix<T> act;
};

template <typename T>
struct BlockTrace {
  layers::LayerNormCache<T> norm1, norm2;
  AttentionTrace<T> attn;
  MlpTrace<T> mlp;
  std::vector<T> keep_attn; // per-segment branch multiplier: 0 or 1/(1-rate)
  std::vector<T> keep_mlp;
};

template <typename T>
struct EncoderTrace {
  std::vector<BlockTrace<T>> blocks;
  layers::LayerNormCache<T> final_norm;
  std::vector<Position3> positions;
  std::vector<Segment> segments;
  bool recorded = false;
};

// Shared context of one forward pass.
struct AttentionContext {
  std::vector<Position3> positions;
  std::vector<Segment> segments;
  RopeFrequencies freqs;
};

AttentionContext make_attention_context(const EncoderConfig& cfg,
                                        std::span<const VoxelCoord> patch_coords,
                                        std::span<const std::size_t> segment_offsets);

// Multi-head self-attention over normalized inputs `x` for block `index`.
template <typename T>
Matrix<T> attention(const Matrix<T>& x, const ParamStore<T>& store, std::size_t index,
                    const EncoderConfig& cfg, const AttentionContext& ctx, AttentionTrace<T>* trace);

template <typename T>
Matrix<T> attention_backward(const Matrix<T>& d_out, ParamStore<T>& store, std::size_t index,
                             const EncoderConfig& cfg, const AttentionContext& ctx,
                             const AttentionTrace<T>& trace);

template <typename T>
Matrix<T> mlp(const Matrix<T>& x, const ParamStore<T>& store, std::size_t index, MlpTrace<T>* trace);

template <typename T>
Matrix<T> mlp_backward(const Matrix<T>& d_out, ParamStore<T>& store, std::size_t index,
                       const MlpTrace<T>& trace);

// Pre-LN block with per-segment DropPath on both residual branches.
template <typename T>
Matrix<T> block_forward(const Matrix<T>& x, const ParamStore<T>& store, std::size_t index,
                        const EncoderConfig& cfg, const AttentionContext& ctx, bool training,
                        Rng* rng, BlockTrace<T>* trace);

template <typename T>
Matrix<T> block_backward(const Matrix<T>& d_out, ParamStore<T>& store, std::size_t index,
                         const EncoderConfig& cfg, const AttentionContext& ctx,
                         const BlockTrace<T>& trace);

// Applies all blocks (and the final norm). Positions and segments pass
// through unchanged. `rng` is only used in training mode.
template <typename T>
TokenBatch<T> encoder_forward(const TokenBatch<T>& x, const EncoderConfig& cfg,
                              const ParamStore<T>& store, bool training, Rng* rng,
                              EncoderTrace<T>* trace);

// Accumulates parameter gradients and returns d(tokens). Throws StateError
// when `trace` was not recorded by encoder_forward.
template <typename T>
Matrix<T> encoder_backward(const Matrix<T>& d_out, const EncoderConfig& cfg, ParamStore<T>& store,
                           const EncoderTrace<T>& trace);

} // namespace volt
