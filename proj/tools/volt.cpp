#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "volt/config.hpp"
#include "volt/error.hpp"
#include "volt/grad_check.hpp"
#include "volt/model.hpp"
#include "volt/rng.hpp"
#include "volt/scene.hpp"
#include "volt/tokenizer.hpp"
#include "volt/trainer.hpp"

namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw volt::InvalidInput("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw volt::InvalidInput("cannot write " + path.string());
  return out;
}

std::vector<volt::LabeledScene> scenes_from(const volt::RunConfig& cfg, const std::string& path,
                                            std::size_t dataset) {
  if (path.empty()) return volt::load_datasets(cfg);
  if (dataset >= cfg.datasets.size()) throw volt::InvalidInput("--dataset id outside the configured datasets");
  std::vector<volt::LabeledScene> out;
  for (const auto& f : volt::scene_files(path)) out.push_back({volt::load_scene(f), dataset, f.string()});
  return out;
}

int cmd_gen_data(const std::string& spec_path, std::size_t count, const fs::path& out_dir) {
  const volt::SceneSpec spec = spec_path.empty() ? volt::SceneSpec{} : volt::parse_scene_spec(read_text(spec_path));
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < count; ++i) {
    volt::SceneSpec s = spec;
    s.seed = volt::derive_seed(spec.seed, {i});
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%04zu.volt", i);
    const auto cloud = volt::generate_scene(s);
    volt::save_scene(cloud, out_dir / name);
    std::cout << (out_dir / name).string() << " points=" << cloud.size() << '\n';
  }
  return 0;
}

int cmd_train(const fs::path& config) {
  const auto cfg = volt::load_run_config(config);
  volt::TrainOptions opts;
  opts.on_log = [](const volt::MetricsRecord& r) { std::cout << volt::to_json_line(r) << '\n'; };
  const auto summary = volt::train_loop(cfg, opts);
  std::cout << "steps=" << summary.steps << " precision=" << (summary.double_precision ? "f64" : "f32")
            << " final_accuracy=" << summary.final_eval.voxel_accuracy
            << " final_miou=" << summary.final_eval.voxel_miou << " raw_accuracy=" << summary.raw_train_accuracy
            << '\n';
  if (summary.teacher) {
    std::cout << "teacher_accuracy=" << summary.teacher->voxel_accuracy << '\n';
  }
  std::cout << "checkpoint=" << summary.checkpoint.string() << " metrics=" << summary.metrics.string() << '\n';
  return 0;
}

int cmd_eval(const fs::path& config, const fs::path& checkpoint, const std::string& scenes_path,
             std::size_t dataset, std::string out_dir) {
  const auto cfg = volt::load_run_config(config);
  const auto scenes = scenes_from(cfg, scenes_path, dataset);
  const auto report = volt::eval_loop(cfg, checkpoint, scenes);
  const fs::path dir = out_dir.empty() ? cfg.output_dir / "eval" : fs::path(out_dir);
  fs::create_directories(dir);
  {
    auto csv = open_out(dir / "iou.csv");
    csv << "dataset,class,iou\n";
    for (std::size_t d = 0; d < report.per_dataset_voxel.size(); ++d) {
      const auto& r = report.per_dataset_voxel[d];
      for (std::size_t c = 0; c < r.iou.size(); ++c) {
        csv << d << ',' << c << ',';
        if (r.included[c]) csv << r.iou[c];
        csv << '\n';
      }
    }
  }
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    char name[40];
    std::snprintf(name, sizeof(name), "predictions_%04zu.csv", s);
    auto csv = open_out(dir / name);
    csv << "point_index,pred_class,label\n";
    const auto& pred = report.point_predictions[s];
    const auto& labels = scenes[s].cloud.labels;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      csv << i << ',' << pred[i] << ',' << (labels ? (*labels)[i] : volt::kIgnoreLabel) << '\n';
    }
  }
  std::cout << "scenes=" << scenes.size() << " voxel_accuracy=" << report.voxel_accuracy
            << " voxel_miou=" << report.voxel_miou << " point_accuracy=" << report.point_accuracy
            << " point_miou=" << report.point_miou << '\n';
  for (std::size_t d = 0; d < report.per_dataset_voxel.size(); ++d) {
    const auto& r = report.per_dataset_voxel[d];
    std::cout << "dataset " << d << " (" << cfg.datasets[d].name << ") miou=" << r.miou << " iou=[";
    for (std::size_t c = 0; c < r.iou.size(); ++c) {
      if (c) std::cout << ' ';
      if (r.included[c]) std::cout << r.iou[c]; else std::cout << '-';
    }
    std::cout << "]\n";
  }
  std::cout << "report=" << (dir / "iou.csv").string() << '\n';
  return 0;
}

template <typename T>
int bench_typed(const volt::RunConfig& cfg, const std::vector<volt::LabeledScene>& scenes, std::size_t repeat,
                const fs::path& csv_path, const fs::path& hist_path, std::size_t bin_width) {
  volt::VoltModel<T> model(cfg.model_config(scenes.front().cloud.channels()));
  model.init(cfg.train.seed);
  auto csv = open_out(csv_path);
  csv << "scene,points,voxels,tokens,forward_ms\n";
  std::vector<std::size_t> tokens;
  double total_ms = 0.0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto vset = volt::voxelize(scenes[s].cloud, cfg.model.voxel_size, volt::VoxelSampling::deterministic, 0,
                                     cfg.model.feature);
    const auto patches = volt::patchify<float>(vset, cfg.model.patch_size);
    const std::size_t id = scenes[s].dataset;
    double best = 0.0;
    for (std::size_t r = 0; r < repeat; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto out = model.forward(std::span<const volt::SparseVoxelSet>(&vset, 1),
                                     std::span<const std::size_t>(&id, 1), false, nullptr, nullptr);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      best = r == 0 ? ms : std::min(best, ms);
    }
    tokens.push_back(patches.size());
    total_ms += best;
    csv << s << ',' << scenes[s].cloud.size() << ',' << vset.size() << ',' << patches.size() << ',' << best << '\n';
  }
  const std::size_t max_tokens = *std::max_element(tokens.begin(), tokens.end());
  auto hist = open_out(hist_path);
  hist << "bin_lo,bin_hi,count\n";
  for (std::size_t lo = 0; lo <= max_tokens; lo += bin_width) {
    const auto count = std::count_if(tokens.begin(), tokens.end(),
                                     [&](std::size_t t) { return t >= lo && t < lo + bin_width; });
    hist << lo << ',' << lo + bin_width << ',' << count << '\n';
  }
  double mean_tokens = 0.0;
  for (auto t : tokens) mean_tokens += static_cast<double>(t);
  mean_tokens /= static_cast<double>(tokens.size());
  std::cout << "scenes=" << scenes.size() << " patch_size=" << cfg.model.patch_size
            << " mean_tokens=" << mean_tokens << " max_tokens=" << max_tokens
            << " mean_forward_ms=" << total_ms / static_cast<double>(scenes.size()) << '\n';
  std::cout << "csv=" << csv_path.string() << " histogram=" << hist_path.string() << '\n';
  return 0;
}

int cmd_bench(const fs::path& config, const std::string& scenes_path, std::size_t repeat, std::string csv,
              std::string hist, std::size_t bin_width) {
  const auto cfg = volt::load_run_config(config);
  const auto scenes = scenes_from(cfg, scenes_path, 0);
  if (repeat == 0 || bin_width == 0) throw volt::InvalidInput("--repeat and --bin-width must be >= 1");
  const fs::path csv_path = csv.empty() ? cfg.output_dir / "bench.csv" : fs::path(csv);
  const fs::path hist_path = hist.empty() ? cfg.output_dir / "bench_histogram.csv" : fs::path(hist);
  return volt::deterministic_mode(cfg) ? bench_typed<double>(cfg, scenes, repeat, csv_path, hist_path, bin_width)
                                       : bench_typed<float>(cfg, scenes, repeat, csv_path, hist_path, bin_width);
}

// Keeps the points inside a square x/y window around the scene centroid so
// finite differences stay affordable at full resolution.
volt::PointCloud window(const volt::PointCloud& cloud, double side) {
  double cx = 0.0, cy = 0.0;
  for (const auto& p : cloud.positions) cx += p[0], cy += p[1];
  cx /= static_cast<double>(cloud.size());
  cy /= static_cast<double>(cloud.size());
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.positions[i];
    if (std::abs(p[0] - cx) <= side / 2 && std::abs(p[1] - cy) <= side / 2) keep.push_back(i);
  }
  if (keep.empty()) throw volt::InvalidInput("grad-check window contains no points");
  return volt::select_points(cloud, keep);
}

int cmd_grad_check(const fs::path& config, std::size_t coordinates, std::size_t max_scenes, double side,
                   std::uint64_t seed) {
  const auto cfg = volt::load_run_config(config);
  auto scenes = volt::load_datasets(cfg);
  if (scenes.size() > max_scenes) scenes.resize(max_scenes);
  for (auto& s : scenes) s.cloud = window(s.cloud, side);
  const auto report = volt::model_grad_check(cfg, scenes, coordinates, seed);
  for (const auto& [module, err] : report.by_module()) {
    std::cout << "module=" << module << " max_rel_error=" << err << '\n';
  }
  std::cout << "coordinates=" << report.entries.size() << " max_rel_error=" << report.max_error << '\n';
  return 0;
}

int cmd_inspect_tokens(const fs::path& config, const fs::path& scene, const std::string& out) {
  const auto cfg = volt::load_run_config(config);
  const auto cloud = volt::load_scene(scene);
  const auto vset = volt::voxelize(cloud, cfg.model.voxel_size, volt::VoxelSampling::deterministic, 0,
                                   cfg.model.feature);
  const auto patches = volt::patchify<float>(vset, cfg.model.patch_size);
  std::ofstream file;
  if (!out.empty()) file = open_out(out);
  std::ostream& os = out.empty() ? std::cout : file;
  os << "token_index,px,py,pz,occupied_slots\n";
  for (std::size_t t = 0; t < patches.size(); ++t) {
    const auto& c = patches.patch_coords[t];
    os << t << ',' << c[0] << ',' << c[1] << ',' << c[2] << ','
       << patches.patch_voxel_begin[t + 1] - patches.patch_voxel_begin[t] << '\n';
  }
  return 0;
}

void report_error(std::string_view kind, std::string_view message) {
  nlohmann::json j{{"error", kind}, {"message", message}};
  std::cerr << j.dump() << std::endl;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"volt: voxel transformer for 3D semantic segmentation"};
  app.require_subcommand(1);

  std::string config, checkpoint, scenes, spec, out, csv, hist, scene;
  std::size_t count = 8, repeat = 3, dataset = 0, coordinates = 256, max_scenes = 2, bin_width = 500;
  double side = 0.6;
  std::uint64_t seed = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate synthetic labeled rooms");
  gen->add_option("--spec", spec, "Scene spec file (key = value)");
  gen->add_option("--count", count, "Number of scenes")->check(CLI::PositiveNumber);
  gen->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a model from a run config");
  train->add_option("--config", config, "Run config")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint (EMA weights)");
  eval->add_option("--config", config, "Run config")->required();
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--scenes", scenes, "Scene file or directory (default: configured datasets)");
  eval->add_option("--dataset", dataset, "Dataset id for --scenes");
  eval->add_option("--out", out, "Directory for CSV output");

  auto* bench = app.add_subcommand("bench", "Token counts and forward latency per scene");
  bench->add_option("--config", config, "Run config")->required();
  bench->add_option("--scenes", scenes, "Scene file or directory (default: configured datasets)");
  bench->add_option("--repeat", repeat, "Forward passes per scene (best is reported)");
  bench->add_option("--csv", csv, "Per-scene CSV path");
  bench->add_option("--histogram", hist, "Sequence-length histogram CSV path");
  bench->add_option("--bin-width", bin_width, "Histogram bin width in tokens");

  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient check in 64-bit");
  gc->add_option("--config", config, "Run config")->required();
  gc->add_option("--coordinates", coordinates, "Minimum number of checked coordinates");
  gc->add_option("--scenes", max_scenes, "Maximum number of scenes")->check(CLI::PositiveNumber);
  gc->add_option("--window", side, "Side of the x/y window cut from each scene, meters")->check(CLI::PositiveNumber);
  gc->add_option("--seed", seed, "Seed for init and coordinate choice");

  auto* inspect = app.add_subcommand("inspect-tokens", "Dump the patch tokens of one scene as CSV");
  inspect->add_option("--config", config, "Run config")->required();
  inspect->add_option("--scene", scene, "Scene file")->required();
  inspect->add_option("--out", out, "CSV path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    report_error("usage", e.what());
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(spec, count, out);
    if (*train) return cmd_train(config);
    if (*eval) return cmd_eval(config, checkpoint, scenes, dataset, out);
    if (*bench) return cmd_bench(config, scenes, repeat, csv, hist, bin_width);
    if (*gc) return cmd_grad_check(config, coordinates, max_scenes, side, seed);
    if (*inspect) return cmd_inspect_tokens(config, scene, out);
  } catch (const volt::Error& e) {
    report_error(e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return 1;
  }
  return 1;
}
