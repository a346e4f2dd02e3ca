#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "volt/config.hpp"
#include "volt/metrics.hpp"
#include "volt/model.hpp"
#include "volt/teacher.hpp"

namespace volt {

struct LabeledScene {
  PointCloud cloud;
  std::size_t dataset = 0;
  std::string source;
};

// Sorted *.volt files of a directory, or a single file.
std::vector<std::filesystem::path> scene_files(const std::filesystem::path& path);

// Every scene of every configured dataset, datasets in declaration order.
// Labels must lie in [0, K_d) or be -1.
std::vector<LabeledScene> load_datasets(const RunConfig& cfg);

// VOLT_DETERMINISTIC=1 in the environment or train.deterministic.
bool deterministic_mode(const RunConfig& cfg);

struct MetricsRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_seg = 0.0;
  double loss_distill = 0.0;
  double grad_norm = 0.0;
  std::optional<double> eval_miou;
  std::optional<double> eval_accuracy;
};

std::string to_json_line(const MetricsRecord& r);

struct EvalReport {
  double voxel_accuracy = 0.0;
  double voxel_miou = 0.0; // mean over datasets
  double point_accuracy = 0.0;
  double point_miou = 0.0;
  std::vector<MiouReport> per_dataset_voxel;
  std::vector<std::vector<std::int32_t>> point_predictions; // per scene
};

// Deterministic voxelization, inference-mode forward, argmax per voxel.
template <typename T>
EvalReport evaluate(const VoltModel<T>& model, std::span<const LabeledScene> scenes, const RunConfig& cfg);

struct TrainOptions {
  bool write_files = true;
  std::function<void(const MetricsRecord&)> on_log;
};

struct TrainSummary {
  std::size_t steps = 0;
  bool double_precision = false;
  std::vector<MetricsRecord> log;
  EvalReport final_eval;           // EMA weights
  double raw_train_accuracy = 0.0; // live weights, voxel level
  std::optional<TeacherFitReport> teacher;
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
};

// augment -> voxelize -> model -> loss -> backward -> AdamW -> EMA per step.
// Writes metrics.jsonl and model.ckpt under cfg.output_dir. A non-finite loss
// writes nan_dump.json and throws NumericError.
TrainSummary train_loop(const RunConfig& cfg, const TrainOptions& opts = {});

template <typename T>
TrainSummary train_loop_typed(const RunConfig& cfg, const TrainOptions& opts);

// Loads EMA weights from the checkpoint and evaluates.
EvalReport eval_loop(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                     std::span<const LabeledScene> scenes);

} // namespace volt
