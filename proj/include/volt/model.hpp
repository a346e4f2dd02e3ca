#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "volt/decoder.hpp"
#include "volt/encoder.hpp"
#include "volt/losses.hpp"
#include "volt/params.hpp"
#include "volt/scene.hpp"
#include "volt/tokenizer.hpp"

namespace volt {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  std::size_t in_channels = 3;
  int patch_size = 5;

  // Keeps encoder width, decoder widths and patch size consistent.
  void sync();
  void validate() const;

  static ModelConfig from_preset(std::string_view preset, int patch_size, std::size_t in_channels,
                                 std::vector<std::size_t> dataset_classes,
                                 DecoderMode decoder = DecoderMode::light);
};

template <typename T>
struct ModelOutput {
  std::vector<Matrix<T>> features;       // per scene, M x D'
  std::vector<Matrix<T>> seg_logits;     // per scene, M x K_d
  std::vector<Matrix<T>> distill_logits; // per scene, M x K_0 (empty when not requested)
};

template <typename T>
struct ModelTrace {
  std::vector<PatchSet<T>> patches;
  EncoderTrace<T> encoder;
  std::vector<DecoderTrace<T>> decoder;
  std::vector<Matrix<T>> features;
  std::vector<std::size_t> dataset_ids;
  std::vector<std::size_t> token_offsets;
  bool recorded = false;
};

// Tokenizer -> encoder -> decoder -> heads over a batch of voxelized scenes.
template <typename T>
class VoltModel {
public:
  explicit VoltModel(ModelConfig cfg);

  // Parameter init (truncated normal weights, see init_params).
  void init(std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // `grid_shifts`, when non-empty, offsets each scene's patch grid.
  ModelOutput<T> forward(std::span<const SparseVoxelSet> scenes, std::span<const std::size_t> dataset_ids,
                         bool training, Rng* rng, ModelTrace<T>* trace, bool with_distill = false,
                         std::span<const VoxelCoord> grid_shifts = {}) const;

  // Accumulates parameter gradients. `d_distill` may be empty.
  void backward(const ModelTrace<T>& trace, std::span<const Matrix<T>> d_seg,
                std::span<const Matrix<T>> d_distill);

private:
  ModelConfig cfg_;
  ParamStore<T> params_;
};

struct LossConfig {
  SegLossConfig seg;
  bool distill = false;
  double teacher_weight = 0.5;
};

template <typename T>
struct BatchLoss {
  double total = 0.0;
  double seg = 0.0;
  double distill = 0.0;
  std::vector<Matrix<T>> d_seg;
  std::vector<Matrix<T>> d_distill;
};

// Mean over scenes of the per-scene objective. With distillation off the
// objective is L_seg on the segmentation head alone.
template <typename T>
BatchLoss<T> batch_loss(const ModelOutput<T>& out, std::span<const std::vector<std::int32_t>> y_gt,
                        std::span<const std::vector<std::int32_t>> y_teacher, const LossConfig& cfg);

} // namespace volt
