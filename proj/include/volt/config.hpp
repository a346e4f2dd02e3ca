#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "volt/augment.hpp"
#include "volt/decoder.hpp"
#include "volt/model.hpp"
#include "volt/rope3d.hpp"
#include "volt/scene.hpp"

namespace volt {

struct ModelSection {
  std::string preset = "volt-tiny";
  std::optional<std::size_t> depth, width, heads, mlp_ratio;
  std::optional<double> droppath;
  bool qk_norm = true;
  std::string rope_allocation = "asymmetric"; // asymmetric | symmetric
  std::optional<std::array<std::size_t, 3>> rope_pairs;
  double rope_base = 10000.0;
  CoordinateMode coordinate_mode = CoordinateMode::metric_index;
  int patch_size = 5;
  DecoderMode decoder = DecoderMode::light;
  std::optional<std::size_t> decoder_width;
  double voxel_size = 0.02;
  VoxelSampling sampling = VoxelSampling::deterministic;
  VoxelFeature feature = VoxelFeature::representative;
};

struct TrainSection {
  std::size_t steps = 1000;
  std::size_t batch_size = 8; // scenes per step
  double max_lr = 2e-3;
  double pct_start = 0.1;
  double div_factor = 25.0;
  double final_div_factor = 1000.0;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double label_smoothing = 0.1;
  double ce_weight = 1.0;
  double lovasz_weight = 1.0;
  double ema_decay = 0.999;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0; // 0: evaluate after the last step only
  std::size_t log_every = 1;
  bool deterministic = false; // 64-bit arithmetic
};

enum class TeacherSource { pretrained, oracle };

struct DistillSection {
  bool enabled = false;
  TeacherSource source = TeacherSource::pretrained;
  std::filesystem::path teacher_path; // empty: train the teacher before the student
  double teacher_weight = 0.5;
  std::size_t teacher_steps = 300;
  std::size_t teacher_hidden = 32;
  double teacher_lr = 1e-2;
};

// Scenes come from a directory of .volt files or are generated from `scene`.
struct DatasetSection {
  std::string name;
  std::size_t classes = 6;
  std::filesystem::path path;
  std::size_t synthetic = 0;
  SceneSpec scene;
};

struct RunConfig {
  ModelSection model;
  TrainSection train;
  DistillSection distill;
  AugmentConfig augment;
  std::vector<DatasetSection> datasets; // dataset id = position
  std::filesystem::path output_dir = "volt_out";

  std::vector<std::size_t> dataset_classes() const;
  ModelConfig model_config(std::size_t in_channels = 3) const;
  // Also validates the derived model config.
  void validate() const;
};

// key = value lines, optional [section] headers that prefix their keys with
// "section.", '#' comments. Unknown keys and duplicates raise ConfigError.
// Relative paths resolve against `base_dir`.
RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

// Keys: seed, extent, min_objects, max_objects, classes, noise, density.
SceneSpec parse_scene_spec(std::string_view text);

} // namespace volt
