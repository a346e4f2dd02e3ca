#include "volt/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "volt/error.hpp"
#include "volt/model.hpp"
#include "volt/rng.hpp"

namespace volt {

std::string module_of(std::string_view name) {
  if (name.rfind("embed.", 0) == 0) return "tokenizer";
  if (name.rfind("blocks.", 0) == 0 || name.rfind("norm.", 0) == 0) return "encoder";
  if (name.rfind("decoder.", 0) == 0) return "decoder";
  if (name.rfind("head.", 0) == 0) return "heads";
  return std::string(name.substr(0, name.find('.')));
}

std::map<std::string, double> GradCheckReport::by_module() const {
  std::map<std::string, double> out;
  for (const auto& e : entries) {
    auto& v = out[module_of(e.param)];
    v = std::max(v, e.error);
  }
  return out;
}

GradCheckReport grad_check(ParamStore<double>& store, const LossClosure& loss, std::size_t coordinates,
                           double eps, std::uint64_t seed) {
  if (store.size() == 0) throw InvalidInput("grad_check: empty parameter store");
  if (!(eps > 0.0)) throw InvalidInput("grad_check: eps must be positive");
  store.zero_grad();
  loss(true);
  std::vector<Matrix<double>> analytic;
  for (const auto& p : store) analytic.push_back(p.grad);

  const std::size_t per_param = std::max<std::size_t>(2, (coordinates + store.size() - 1) / store.size());
  Rng rng(seed);
  GradCheckReport report;
  std::size_t pi = 0;
  for (auto& p : store) {
    const std::size_t size = p.value.size();
    std::vector<std::size_t> idx(size);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t take = std::min(per_param, size);
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = std::uniform_int_distribution<std::size_t>(i, size - 1)(rng);
      std::swap(idx[i], idx[j]);
    }
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t k = idx[i];
      const double saved = p.value.data[k];
      p.value.data[k] = saved + eps;
      const double up = loss(false);
      p.value.data[k] = saved - eps;
      const double down = loss(false);
      p.value.data[k] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi].data[k];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      report.entries.push_back({p.name, k, a, numeric, err});
      report.max_error = std::max(report.max_error, err);
    }
    ++pi;
  }
  return report;
}

GradCheckReport model_grad_check(const RunConfig& cfg, std::span<const LabeledScene> scenes,
                                 std::size_t coordinates, std::uint64_t seed) {
  if (scenes.empty()) throw InvalidInput("grad-check needs at least one scene");
  ModelConfig mcfg = cfg.model_config(scenes.front().cloud.channels());
  mcfg.decoder.distill_head = true;
  VoltModel<double> model(mcfg);
  model.init(seed);

  std::vector<SparseVoxelSet> vsets;
  std::vector<std::size_t> ids;
  std::vector<std::vector<std::int32_t>> y_gt, y_teacher;
  const auto k0 = static_cast<std::int32_t>(cfg.datasets.front().classes);
  for (const auto& s : scenes) {
    vsets.push_back(voxelize(s.cloud, cfg.model.voxel_size, VoxelSampling::deterministic, 0, cfg.model.feature));
    ids.push_back(s.dataset);
    y_gt.push_back(*vsets.back().labels);
    auto yt = y_gt.back();
    for (std::size_t i = 0; i < yt.size(); ++i) {
      if (i % 3 == 0) yt[i] = static_cast<std::int32_t>((i / 3) % static_cast<std::size_t>(k0));
      else if (yt[i] >= k0 || yt[i] < 0) yt[i] = 0;
    }
    y_teacher.push_back(std::move(yt));
  }
  const LossConfig loss_cfg{SegLossConfig{cfg.train.label_smoothing, cfg.train.ce_weight, cfg.train.lovasz_weight},
                            true, cfg.distill.teacher_weight};
  const std::uint64_t drop_seed = derive_seed(seed, {0xd0});
  auto closure = [&](bool with_grad) {
    Rng drop(drop_seed);
    ModelTrace<double> trace;
    const auto out = model.forward(vsets, ids, true, &drop, with_grad ? &trace : nullptr, true);
    const auto loss = batch_loss(out, y_gt, y_teacher, loss_cfg);
    if (with_grad) model.backward(trace, loss.d_seg, loss.d_distill);
    return loss.total;
  };
  return grad_check(model.params(), closure, coordinates, 1e-4, derive_seed(seed, {0x9c}));
}

} // namespace volt
