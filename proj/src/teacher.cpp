#include "volt/teacher.hpp"

#include <cmath>

#include "volt/checkpoint.hpp"
#include "volt/decoder.hpp"
#include "volt/error.hpp"
#include "volt/losses.hpp"
#include "volt/metrics.hpp"
#include "volt/optim.hpp"
#include "volt/rng.hpp"

namespace volt {

void TeacherConfig::validate() const {
  if (in_channels == 0 || hidden == 0 || classes < 2) throw ConfigError("teacher: bad layer widths");
  if (!(lr > 0.0)) throw ConfigError("teacher: lr must be positive");
}

namespace {

template <typename T>
Matrix<T> to_input(const SparseVoxelSet& vset) {
  return cast<T>(vset.features);
}

template <typename T>
void relu_inplace(Matrix<T>& m) {
  for (auto& v : m.data) v = v > T(0) ? v : T(0);
}

} // namespace

template <typename T>
TeacherModel<T>::TeacherModel(TeacherConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t k = NeighborTable::kVolume;
  const std::size_t widths[4] = {cfg_.in_channels, cfg_.hidden, cfg_.hidden, cfg_.classes};
  Rng rng(cfg_.seed);
  for (int l = 0; l < 3; ++l) {
    const std::string base = "teacher.conv" + std::to_string(l + 1);
    auto& w = params_.add(base + ".weight", k * widths[l], widths[l + 1], ParamKind::weight);
    params_.add(base + ".bias", 1, widths[l + 1], ParamKind::bias);
    const double sigma = std::sqrt(2.0 / static_cast<double>(k * widths[l]));
    for (auto& v : w.value.data) v = static_cast<T>(truncated_normal(rng, sigma));
  }
}

template <typename T>
Matrix<T> TeacherModel<T>::forward(const SparseVoxelSet& vset, Trace* trace) const {
  if (vset.channels() != cfg_.in_channels) {
    throw ShapeError("teacher expects " + std::to_string(cfg_.in_channels) + " channels, scene has " +
                     std::to_string(vset.channels()));
  }
  NeighborTable table(vset.coords);
  Matrix<T> x0 = to_input<T>(vset);
  Matrix<T> z1 = neighborhood_conv(x0, table, params_.at("teacher.conv1.weight"), params_.at("teacher.conv1.bias"));
  Matrix<T> h1 = z1;
  relu_inplace(h1);
  Matrix<T> z2 = neighborhood_conv(h1, table, params_.at("teacher.conv2.weight"), params_.at("teacher.conv2.bias"));
  Matrix<T> h2 = z2;
  relu_inplace(h2);
  Matrix<T> out = neighborhood_conv(h2, table, params_.at("teacher.conv3.weight"), params_.at("teacher.conv3.bias"));
  if (trace) {
    trace->table = std::move(table);
    trace->x0 = std::move(x0);
    trace->z1 = std::move(z1);
    trace->h1 = std::move(h1);
    trace->z2 = std::move(z2);
    trace->h2 = std::move(h2);
  }
  return out;
}

template <typename T>
void TeacherModel<T>::backward(const Trace& tr, const Matrix<T>& d_logits) {
  Matrix<T> d_h2 = neighborhood_conv_backward(tr.h2, d_logits, tr.table, params_.at("teacher.conv3.weight"),
                                              params_.at("teacher.conv3.bias"));
  for (std::size_t i = 0; i < d_h2.data.size(); ++i)
    if (tr.z2.data[i] <= T(0)) d_h2.data[i] = T(0);
  Matrix<T> d_h1 = neighborhood_conv_backward(tr.h1, d_h2, tr.table, params_.at("teacher.conv2.weight"),
                                              params_.at("teacher.conv2.bias"));
  for (std::size_t i = 0; i < d_h1.data.size(); ++i)
    if (tr.z1.data[i] <= T(0)) d_h1.data[i] = T(0);
  neighborhood_conv_backward(tr.x0, d_h1, tr.table, params_.at("teacher.conv1.weight"),
                             params_.at("teacher.conv1.bias"), false);
}

template <typename T>
Matrix<T> TeacherModel<T>::logits(const SparseVoxelSet& vset) const {
  return forward(vset, nullptr);
}

template <typename T>
std::vector<std::int32_t> TeacherModel<T>::predict(const SparseVoxelSet& vset) const {
  if (!trained_) throw StateError("teacher used for distillation before it was trained or loaded");
  return argmax_rows(forward(vset, nullptr));
}

template <typename T>
TeacherFitReport TeacherModel<T>::fit(std::span<const SparseVoxelSet> scenes) {
  if (scenes.empty()) throw InvalidInput("teacher fit needs at least one scene");
  for (const auto& s : scenes)
    if (!s.labels) throw InvalidInput("teacher fit needs labeled scenes");
  AdamW<T> opt(params_, AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  OneCycleSchedule sched{cfg_.lr, cfg_.steps, 0.1, 25.0, 100.0};
  TeacherFitReport report;
  const double inv = 1.0 / static_cast<double>(scenes.size());
  for (std::size_t step = 0; step < cfg_.steps; ++step) {
    params_.zero_grad();
    double loss = 0.0;
    for (const auto& s : scenes) {
      Trace tr;
      const Matrix<T> z = forward(s, &tr);
      auto ce = ce_label_smooth(z, std::span<const std::int32_t>(*s.labels), 0.0);
      if (ce.all_ignored) continue;
      loss += ce.value * inv;
      for (auto& g : ce.grad.data) g *= static_cast<T>(inv);
      backward(tr, ce.grad);
    }
    if (!std::isfinite(loss)) throw NumericError("teacher loss diverged at step " + std::to_string(step));
    opt.step(params_, sched.lr(step));
    report.final_loss = loss;
  }
  trained_ = true;
  report.voxel_accuracy = voxel_accuracy(scenes);
  return report;
}

template <typename T>
double TeacherModel<T>::voxel_accuracy(std::span<const SparseVoxelSet> scenes) const {
  ConfusionMatrix cm(cfg_.classes);
  for (const auto& s : scenes) {
    if (!s.labels) throw InvalidInput("teacher accuracy needs labeled scenes");
    cm.add(*s.labels, argmax_rows(forward(s, nullptr)));
  }
  return cm.accuracy();
}

template <typename T>
void TeacherModel<T>::save(const std::filesystem::path& path) const {
  save_checkpoint<T>(path, params_, nullptr);
}

template <typename T>
void TeacherModel<T>::load(const std::filesystem::path& path) {
  load_checkpoint<T>(path, params_, false);
  trained_ = true;
}

template class TeacherModel<float>;
template class TeacherModel<double>;

} // namespace volt
