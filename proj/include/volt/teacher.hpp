#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "volt/params.hpp"
#include "volt/scene.hpp"
#include "volt/sparse_conv.hpp"

namespace volt {

struct TeacherConfig {
  std::size_t in_channels = 3;
  std::size_t hidden = 32;
  std::size_t classes = 6;
  std::size_t steps = 300;
  double lr = 1e-2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TeacherFitReport {
  double final_loss = 0.0;
  double voxel_accuracy = 0.0;
};

// Three 3x3x3 submanifold convolutions (C -> H -> H -> K, ReLU between)
// over the occupied voxels of a scene. Trained once with cross-entropy,
// then frozen; emits per-voxel argmax labels.
template <typename T>
class TeacherModel {
public:
  explicit TeacherModel(TeacherConfig cfg);

  const TeacherConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }

  Matrix<T> logits(const SparseVoxelSet& vset) const;

  // Raises StateError when the teacher has not been trained or loaded.
  std::vector<std::int32_t> predict(const SparseVoxelSet& vset) const;

  // Full-batch AdamW on labeled voxel sets; marks the teacher trained.
  TeacherFitReport fit(std::span<const SparseVoxelSet> scenes);

  double voxel_accuracy(std::span<const SparseVoxelSet> scenes) const;

  void save(const std::filesystem::path& path) const;
  // Loads weights and marks the teacher trained.
  void load(const std::filesystem::path& path);

private:
  struct Trace {
    NeighborTable table;
    Matrix<T> x0, h1, h2; // inputs to each conv (post-ReLU)
    Matrix<T> z1, z2;     // pre-ReLU outputs
  };
  Matrix<T> forward(const SparseVoxelSet& vset, Trace* trace) const;
  void backward(const Trace& trace, const Matrix<T>& d_logits);

  TeacherConfig cfg_;
  ParamStore<T> params_;
  bool trained_ = false;
};

} // namespace volt
