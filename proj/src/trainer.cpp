#include "volt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "volt/checkpoint.hpp"
#include "volt/error.hpp"
#include "volt/optim.hpp"
#include "volt/rng.hpp"

namespace volt {

namespace {

enum Stream : std::uint64_t { kVoxel = 0xb0, kBatch = 0xc0, kDrop = 0xd0, kShift = 0xe0, kTeacher = 0xf0, kInit = 0xf1 };

void check_labels(const PointCloud& cloud, std::size_t classes, const std::string& source) {
  if (!cloud.labels) throw InvalidInput("scene " + source + " has no labels");
  for (auto y : *cloud.labels) {
    if (y != kIgnoreLabel && (y < 0 || static_cast<std::size_t>(y) >= classes)) {
      throw InvalidInput("scene " + source + " has label " + std::to_string(y) + " outside [0, " +
                         std::to_string(classes) + ")");
    }
  }
}

std::vector<std::size_t> sample_batch(std::size_t n, std::size_t batch, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (batch >= n) return idx;
  Rng rng(seed);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n - 1)(rng);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(batch);
  return idx;
}

template <typename T>
void write_nan_dump(const std::filesystem::path& path, std::size_t step, double lr, const BatchLoss<T>& loss,
                    const ParamStore<T>& store) {
  nlohmann::json j;
  j["step"] = step;
  j["lr"] = lr;
  j["loss_total"] = std::isfinite(loss.total) ? nlohmann::json(loss.total) : nlohmann::json(std::to_string(loss.total));
  j["loss_seg"] = std::isfinite(loss.seg) ? nlohmann::json(loss.seg) : nlohmann::json(std::to_string(loss.seg));
  j["loss_distill"] =
      std::isfinite(loss.distill) ? nlohmann::json(loss.distill) : nlohmann::json(std::to_string(loss.distill));
  auto& params = j["params"];
  for (const auto& p : store) {
    double v2 = 0.0;
    bool finite = true;
    for (T v : p.value.data) {
      v2 += static_cast<double>(v) * static_cast<double>(v);
      finite = finite && std::isfinite(static_cast<double>(v));
    }
    params.push_back({{"name", p.name}, {"value_norm", std::isfinite(v2) ? std::sqrt(v2) : -1.0}, {"finite", finite}});
  }
  std::ofstream out(path);
  out << j.dump(2) << '\n';
}

} // namespace

std::vector<std::filesystem::path> scene_files(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw InvalidInput("scene path " + path.string() + " does not exist");
  if (fs::is_regular_file(path)) return {path};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_regular_file() && e.path().extension() == ".volt") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw InvalidInput("no .volt scenes under " + path.string());
  return out;
}

std::vector<LabeledScene> load_datasets(const RunConfig& cfg) {
  std::vector<LabeledScene> out;
  for (std::size_t d = 0; d < cfg.datasets.size(); ++d) {
    const auto& ds = cfg.datasets[d];
    if (!ds.path.empty()) {
      for (const auto& f : scene_files(ds.path)) out.push_back({load_scene(f), d, f.string()});
    } else {
      for (std::size_t i = 0; i < ds.synthetic; ++i) {
        SceneSpec spec = ds.scene;
        spec.seed = derive_seed(ds.scene.seed, {i});
        out.push_back({generate_scene(spec), d, ds.name + "#" + std::to_string(i)});
      }
    }
  }
  if (out.empty()) throw InvalidInput("configured datasets contain no scenes");
  const std::size_t c = out.front().cloud.channels();
  for (const auto& s : out) {
    s.cloud.validate();
    check_labels(s.cloud, cfg.datasets[s.dataset].classes, s.source);
    if (s.cloud.channels() != c) throw ShapeError("scene " + s.source + " differs in feature channel count");
  }
  return out;
}

bool deterministic_mode(const RunConfig& cfg) {
  const char* env = std::getenv("VOLT_DETERMINISTIC");
  return cfg.train.deterministic || (env && std::string_view(env) == "1");
}

std::string to_json_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["loss_total"] = r.loss_total;
  j["loss_seg"] = r.loss_seg;
  j["loss_distill"] = r.loss_distill;
  j["grad_norm"] = r.grad_norm;
  if (r.eval_miou) j["eval_miou"] = *r.eval_miou;
  if (r.eval_accuracy) j["eval_accuracy"] = *r.eval_accuracy;
  return j.dump();
}

template <typename T>
EvalReport evaluate(const VoltModel<T>& model, std::span<const LabeledScene> scenes, const RunConfig& cfg) {
  const auto classes = cfg.dataset_classes();
  std::vector<ConfusionMatrix> voxel_cm, point_cm;
  for (auto k : classes) {
    voxel_cm.emplace_back(k);
    point_cm.emplace_back(k);
  }
  EvalReport report;
  for (const auto& s : scenes) {
    if (s.dataset >= classes.size()) throw InvalidInput("scene " + s.source + " has an unknown dataset id");
    const SparseVoxelSet vset = voxelize(s.cloud, cfg.model.voxel_size, VoxelSampling::deterministic, 0,
                                         cfg.model.feature);
    const std::size_t id = s.dataset;
    const auto out = model.forward(std::span<const SparseVoxelSet>(&vset, 1), std::span<const std::size_t>(&id, 1),
                                   false, nullptr, nullptr);
    const auto voxel_pred = argmax_rows(out.seg_logits[0]);
    auto point_pred = predict_points(out.seg_logits[0], vset);
    if (vset.labels) voxel_cm[id].add(*vset.labels, voxel_pred);
    if (s.cloud.labels) point_cm[id].add(*s.cloud.labels, point_pred);
    report.point_predictions.push_back(std::move(point_pred));
  }
  std::uint64_t vt = 0, vc = 0, pt = 0, pc = 0;
  double vm = 0.0, pm = 0.0;
  std::size_t used = 0;
  for (std::size_t d = 0; d < classes.size(); ++d) {
    if (voxel_cm[d].total() == 0) {
      report.per_dataset_voxel.push_back(MiouReport{});
      continue;
    }
    const auto vr = miou(voxel_cm[d]);
    const auto pr = miou(point_cm[d]);
    vm += vr.miou;
    pm += pr.miou;
    ++used;
    for (std::size_t c = 0; c < classes[d]; ++c) {
      vc += voxel_cm[d].at(c, c);
      pc += point_cm[d].at(c, c);
    }
    vt += voxel_cm[d].total();
    pt += point_cm[d].total();
    report.per_dataset_voxel.push_back(vr);
  }
  if (used) {
    report.voxel_miou = vm / static_cast<double>(used);
    report.point_miou = pm / static_cast<double>(used);
  }
  report.voxel_accuracy = vt ? static_cast<double>(vc) / static_cast<double>(vt) : 0.0;
  report.point_accuracy = pt ? static_cast<double>(pc) / static_cast<double>(pt) : 0.0;
  return report;
}

template <typename T>
TrainSummary train_loop_typed(const RunConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  const auto scenes = load_datasets(cfg);
  const std::size_t n = scenes.size();
  const std::size_t in_channels = scenes.front().cloud.channels();
  const ModelConfig mcfg = cfg.model_config(in_channels);
  const auto& tc = cfg.train;

  TrainSummary summary;
  summary.double_precision = std::is_same_v<T, double>;
  std::ofstream metrics;
  if (opts.write_files) {
    std::filesystem::create_directories(cfg.output_dir);
    summary.metrics = cfg.output_dir / "metrics.jsonl";
    summary.checkpoint = cfg.output_dir / "model.ckpt";
    metrics.open(summary.metrics);
    if (!metrics) throw InvalidInput("cannot write " + summary.metrics.string());
  }

  std::vector<PointCloud> clouds;
  clouds.reserve(n);
  for (const auto& s : scenes) clouds.push_back(s.cloud);

  std::optional<TeacherModel<T>> teacher;
  if (cfg.distill.enabled && cfg.distill.source == TeacherSource::pretrained) {
    TeacherConfig tcfg;
    tcfg.in_channels = in_channels;
    tcfg.hidden = cfg.distill.teacher_hidden;
    tcfg.classes = cfg.datasets.front().classes;
    tcfg.steps = cfg.distill.teacher_steps;
    tcfg.lr = cfg.distill.teacher_lr;
    tcfg.seed = derive_seed(tc.seed, {kTeacher});
    teacher.emplace(tcfg);
    if (!cfg.distill.teacher_path.empty() && std::filesystem::exists(cfg.distill.teacher_path)) {
      teacher->load(cfg.distill.teacher_path);
    } else {
      std::vector<SparseVoxelSet> train_sets;
      for (const auto& s : scenes)
        if (s.dataset == 0)
          train_sets.push_back(voxelize(s.cloud, cfg.model.voxel_size, VoxelSampling::deterministic, 0,
                                        cfg.model.feature));
      summary.teacher = teacher->fit(train_sets);
      if (opts.write_files) {
        teacher->save(cfg.distill.teacher_path.empty() ? cfg.output_dir / "teacher.ckpt" : cfg.distill.teacher_path);
      }
    }
  }

  VoltModel<T> model(mcfg);
  model.init(derive_seed(tc.seed, {kInit}));
  AdamW<T> opt(model.params(), AdamWConfig{tc.beta1, tc.beta2, tc.eps, tc.weight_decay});
  const OneCycleSchedule sched{tc.max_lr, std::max<std::size_t>(tc.steps, 1), tc.pct_start, tc.div_factor,
                               tc.final_div_factor};
  Ema<T> ema(model.params(), tc.ema_decay);
  const LossConfig loss_cfg{SegLossConfig{tc.label_smoothing, tc.ce_weight, tc.lovasz_weight}, cfg.distill.enabled,
                            cfg.distill.teacher_weight};
  VoltModel<T> eval_model(mcfg);
  auto eval_ema = [&]() {
    ema.copy_to(eval_model.params());
    return evaluate(eval_model, scenes, cfg);
  };

  for (std::size_t step = 0; step < tc.steps; ++step) {
    const auto batch_idx = sample_batch(n, tc.batch_size, derive_seed(tc.seed, {step, kBatch}));
    std::vector<PointCloud> batch;
    std::vector<std::size_t> ids;
    for (auto i : batch_idx) {
      batch.push_back(clouds[i]);
      ids.push_back(scenes[i].dataset);
    }
    const auto augmented = augment_batch(batch, cfg.augment, step);
    std::vector<SparseVoxelSet> vsets;
    std::vector<std::vector<std::int32_t>> y_gt, y_teacher;
    std::vector<VoxelCoord> shifts;
    for (std::size_t b = 0; b < augmented.size(); ++b) {
      vsets.push_back(voxelize(augmented[b], cfg.model.voxel_size, cfg.model.sampling,
                               derive_seed(tc.seed, {step, b, kVoxel}), cfg.model.feature));
      y_gt.push_back(*vsets.back().labels);
      if (cfg.distill.enabled) {
        y_teacher.push_back(teacher ? teacher->predict(vsets.back()) : y_gt.back());
      }
      if (cfg.augment.grid_shift) {
        Rng rng(derive_seed(cfg.augment.seed, {step, b, kShift}));
        std::uniform_int_distribution<std::int32_t> u(0, cfg.model.patch_size - 1);
        shifts.push_back(VoxelCoord{u(rng), u(rng), u(rng)});
      }
    }

    Rng drop_rng(derive_seed(tc.seed, {step, kDrop}));
    ModelTrace<T> trace;
    const auto out = model.forward(vsets, ids, true, &drop_rng, &trace, cfg.distill.enabled, shifts);
    const auto loss = batch_loss(out, y_gt, y_teacher, loss_cfg);
    const double lr = sched.lr(step);
    if (!std::isfinite(loss.total)) {
      if (opts.write_files) write_nan_dump(cfg.output_dir / "nan_dump.json", step, lr, loss, model.params());
      throw NumericError("non-finite loss at step " + std::to_string(step) +
                         (opts.write_files ? "; diagnostics in " + (cfg.output_dir / "nan_dump.json").string() : ""));
    }
    model.params().zero_grad();
    model.backward(trace, loss.d_seg, loss.d_distill);
    const double gnorm = model.params().grad_norm();
    opt.step(model.params(), lr);
    ema.update(model.params());

    const bool last = step + 1 == tc.steps;
    const bool do_eval = last || (tc.eval_every && (step + 1) % tc.eval_every == 0);
    if (last || do_eval || step % tc.log_every == 0) {
      MetricsRecord rec{step, lr, loss.total, loss.seg, loss.distill, gnorm, std::nullopt, std::nullopt};
      if (do_eval) {
        const auto ev = eval_ema();
        rec.eval_miou = ev.voxel_miou;
        rec.eval_accuracy = ev.voxel_accuracy;
        if (last) summary.final_eval = ev;
      }
      if (metrics.is_open()) metrics << to_json_line(rec) << '\n' << std::flush;
      if (opts.on_log) opts.on_log(rec);
      summary.log.push_back(rec);
    }
  }
  if (tc.steps == 0) summary.final_eval = eval_ema();
  summary.steps = tc.steps;
  summary.raw_train_accuracy = evaluate(model, scenes, cfg).voxel_accuracy;
  if (opts.write_files) save_checkpoint<T>(summary.checkpoint, model.params(), &ema);
  return summary;
}

TrainSummary train_loop(const RunConfig& cfg, const TrainOptions& opts) {
  return deterministic_mode(cfg) ? train_loop_typed<double>(cfg, opts) : train_loop_typed<float>(cfg, opts);
}

namespace {

template <typename T>
EvalReport eval_typed(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                      std::span<const LabeledScene> scenes) {
  if (scenes.empty()) throw InvalidInput("eval needs at least one scene");
  VoltModel<T> model(cfg.model_config(scenes.front().cloud.channels()));
  load_checkpoint<T>(checkpoint, model.params(), true);
  return evaluate(model, scenes, cfg);
}

} // namespace

EvalReport eval_loop(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                     std::span<const LabeledScene> scenes) {
  return deterministic_mode(cfg) ? eval_typed<double>(cfg, checkpoint, scenes)
                                 : eval_typed<float>(cfg, checkpoint, scenes);
}

template EvalReport evaluate<float>(const VoltModel<float>&, std::span<const LabeledScene>, const RunConfig&);
template EvalReport evaluate<double>(const VoltModel<double>&, std::span<const LabeledScene>, const RunConfig&);
template TrainSummary train_loop_typed<float>(const RunConfig&, const TrainOptions&);
template TrainSummary train_loop_typed<double>(const RunConfig&, const TrainOptions&);

} // namespace volt
