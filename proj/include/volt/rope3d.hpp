#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "volt/tensor.hpp"
#include "volt/tokenizer.hpp"

namespace volt {

enum class CoordinateMode { metric_index, per_scene_normalized };

using Position3 = std::array<double, 3>;

// Axis-factorized rotary embedding. Each head's dims are split into
// [x-block | y-block | z-block] of 2 * pairs[a] dims each; pair i of axis a
// (interleaved dims 2i, 2i+1 within the block) rotates by p_a * theta_i with
// theta_i = theta_base^(-i / pairs[a]). Frequencies are shared by all heads.
struct RopeConfig {
  std::size_t head_dim = 64;
  std::array<std::size_t, 3> pairs{12, 12, 8};
  double theta_base = 10000.0;
  CoordinateMode coordinate_mode = CoordinateMode::metric_index;

  // Throws ConfigError unless head_dim is even, theta_base > 1 and
  // 2 * (nx + ny + nz) == head_dim.
  void validate() const;

  // x and y get three parts, z two parts of head_dim / 2 pairs, so 64 -> (12, 12, 8).
  static RopeConfig asymmetric(std::size_t head_dim);
  // As even a split as the pair count allows; the remainder goes to x then y.
  static RopeConfig symmetric(std::size_t head_dim);
};

struct RopeFrequencies {
  std::array<std::vector<double>, 3> axis;
  std::size_t total_pairs() const { return axis[0].size() + axis[1].size() + axis[2].size(); }
};

RopeFrequencies build_frequencies(const RopeConfig& cfg);

// Rotates every head of `x` (tokens x heads*head_dim) in place. `inverse`
// applies the transpose rotation, which is also the backward pass.
template <typename T>
void apply_rope(Matrix<T>& x, std::size_t heads, std::span<const Position3> positions,
                const RopeFrequencies& freqs, bool inverse = false);

// Per-axis affine rescale of positions into [0, 1] given lo/hi bounds; an
// axis with hi == lo maps to 0.
std::vector<Position3> normalize_positions(std::span<const Position3> positions,
                                           const Position3& lo, const Position3& hi);

// Rotary positions for a token batch: integer patch indices, or indices
// rescaled to [0, 1] independently within each scene segment.
std::vector<Position3> rope_positions(std::span<const VoxelCoord> patch_coords,
                                      std::span<const std::size_t> segment_offsets,
                                      CoordinateMode mode);

} // namespace volt
