#include "volt/decoder.hpp"

#include <string>

#include "volt/error.hpp"
#include "volt/layers.hpp"

namespace volt {

DecoderMode parse_decoder_mode(std::string_view s) {
  if (s == "none") return DecoderMode::none;
  if (s == "light") return DecoderMode::light;
  if (s == "big") return DecoderMode::big;
  throw ConfigError("unknown decoder mode '" + std::string(s) + "' (none | light | big)");
}

std::string_view to_string(DecoderMode m) {
  switch (m) {
    case DecoderMode::none: return "none";
    case DecoderMode::light: return "light";
    case DecoderMode::big: return "big";
  }
  return "?";
}

void DecoderConfig::validate() const {
  if (patch_size < 1) throw ConfigError("patch size must be >= 1");
  if (token_width == 0 || width == 0) throw ConfigError("decoder widths must be positive");
  if (dataset_classes.empty()) throw ConfigError("at least one dataset head is required");
  for (auto k : dataset_classes)
    if (k < 2) throw ConfigError("every dataset needs K >= 2 classes");
}

namespace {

std::string refine_name(std::size_t block, int conv, std::string_view leaf) {
  return "decoder.refine." + std::to_string(block) + ".conv" + std::to_string(conv) + "." +
         std::string(leaf);
}

std::string seg_name(std::size_t id, std::string_view leaf) {
  return "head.seg." + std::to_string(id) + "." + std::string(leaf);
}

constexpr std::size_t kRefineBlocks = 2;

} // namespace

template <typename T>
void register_decoder_params(ParamStore<T>& store, const DecoderConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.token_width, f = cfg.feature_width();
  const auto p = static_cast<std::size_t>(cfg.patch_size);
  if (cfg.mode != DecoderMode::none) {
    store.add("decoder.upsample.weight", p * p * p * d, f, ParamKind::weight);
    store.add("decoder.upsample.bias", 1, f, ParamKind::bias);
  }
  if (cfg.mode == DecoderMode::big) {
    for (std::size_t b = 0; b < kRefineBlocks; ++b)
      for (int c = 1; c <= 2; ++c) {
        store.add(refine_name(b, c, "weight"), NeighborTable::kVolume * f, f, ParamKind::weight);
        store.add(refine_name(b, c, "bias"), 1, f, ParamKind::bias);
      }
  }
  for (std::size_t id = 0; id < cfg.dataset_classes.size(); ++id) {
    store.add(seg_name(id, "weight"), f, cfg.dataset_classes[id], ParamKind::weight);
    store.add(seg_name(id, "bias"), 1, cfg.dataset_classes[id], ParamKind::bias);
  }
  if (cfg.distill_head) {
    store.add("head.distill.weight", f, cfg.dataset_classes.front(), ParamKind::weight);
    store.add("head.distill.bias", 1, cfg.dataset_classes.front(), ParamKind::bias);
  }
}

template <typename T>
Matrix<T> upsample(const Matrix<T>& tokens, const PatchSet<T>& patches, const Matrix<T>& kernel,
                   std::span<const T> bias) {
  const std::size_t d = tokens.cols, f = kernel.cols;
  if (tokens.rows != patches.size()) throw ShapeError("upsample: one token per patch required");
  require_shape(kernel, patches.slots() * d, f, "upsample kernel");
  if (bias.size() != f) throw ShapeError("upsample: bias width mismatch");
  const std::size_t m = patches.voxel_to_patch.size();
  for (std::size_t t : patches.voxel_to_patch)
    if (t >= tokens.rows) throw InvalidInput("upsample: voxel references a missing patch token");

  Matrix<T> out(m, f);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t jj = 0; jj < static_cast<std::ptrdiff_t>(m); ++jj) {
    const auto j = static_cast<std::size_t>(jj);
    const T* tok = &tokens(patches.voxel_to_patch[j], 0);
    const std::size_t base = patches.voxel_local_offset[j] * d;
    T* dst = &out(j, 0);
    for (std::size_t c = 0; c < f; ++c) dst[c] = bias[c];
    for (std::size_t a = 0; a < d; ++a) {
      const T v = tok[a];
      const T* w = &kernel(base + a, 0);
      for (std::size_t c = 0; c < f; ++c) dst[c] += v * w[c];
    }
  }
  return out;
}

template <typename T>
Matrix<T> upsample_backward(const Matrix<T>& tokens, const PatchSet<T>& patches,
                            const Matrix<T>& kernel, const Matrix<T>& d_features,
                            Matrix<T>& d_kernel, std::span<T> d_bias) {
  const std::size_t d = tokens.cols, f = kernel.cols, slots = patches.slots();
  const std::size_t m = patches.voxel_to_patch.size();
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t c = 0; c < f; ++c) d_bias[c] += d_features(j, c);

  std::vector<std::vector<std::size_t>> by_slot(slots);
  for (std::size_t j = 0; j < m; ++j) by_slot[patches.voxel_local_offset[j]].push_back(j);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t oo = 0; oo < static_cast<std::ptrdiff_t>(slots); ++oo) {
    const auto o = static_cast<std::size_t>(oo);
    for (std::size_t j : by_slot[o]) {
      const T* tok = &tokens(patches.voxel_to_patch[j], 0);
      const T* g = &d_features(j, 0);
      for (std::size_t a = 0; a < d; ++a) {
        T* w = &d_kernel(o * d + a, 0);
        for (std::size_t c = 0; c < f; ++c) w[c] += tok[a] * g[c];
      }
    }
  }

  Matrix<T> d_tokens(tokens.rows, d);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t tt = 0; tt < static_cast<std::ptrdiff_t>(tokens.rows); ++tt) {
    const auto t = static_cast<std::size_t>(tt);
    T* dt = &d_tokens(t, 0);
    for (std::size_t q = patches.patch_voxel_begin[t]; q < patches.patch_voxel_begin[t + 1]; ++q) {
      const std::size_t j = patches.patch_voxels[q];
      const std::size_t base = patches.voxel_local_offset[j] * d;
      const T* g = &d_features(j, 0);
      for (std::size_t a = 0; a < d; ++a) {
        const T* w = &kernel(base + a, 0);
        T acc = T(0);
        for (std::size_t c = 0; c < f; ++c) acc += w[c] * g[c];
        dt[a] += acc;
      }
    }
  }
  return d_tokens;
}

template <typename T>
Matrix<T> decoder_forward(const Matrix<T>& tokens, const PatchSet<T>& patches,
                          const SparseVoxelSet& vset, const DecoderConfig& cfg,
                          const ParamStore<T>& store, DecoderTrace<T>* trace) {
  if (trace) trace->tokens = tokens;
  if (cfg.mode == DecoderMode::none) {
    Matrix<T> out(patches.voxel_to_patch.size(), tokens.cols);
    for (std::size_t j = 0; j < out.rows; ++j) {
      auto src = tokens.row(patches.voxel_to_patch[j]);
      std::copy(src.begin(), src.end(), out.row(j).begin());
    }
    return out;
  }

  const auto& up_w = store.at("decoder.upsample.weight");
  const auto& up_b = store.at("decoder.upsample.bias");
  Matrix<T> x = upsample(tokens, patches, up_w.value, std::span<const T>(up_b.value.data));
  if (cfg.mode == DecoderMode::light) return x;

  NeighborTable local_table;
  NeighborTable& table = trace ? trace->neighbors : local_table;
  table = NeighborTable(vset.coords);
  if (trace) {
    trace->stage_inputs.clear();
    trace->pre_relu.clear();
  }
  for (std::size_t b = 0; b < kRefineBlocks; ++b) {
    Matrix<T> h = neighborhood_conv(x, table, store.at(refine_name(b, 1, "weight")),
                                    store.at(refine_name(b, 1, "bias")));
    Matrix<T> r = h;
    for (auto& v : r.data) v = v > T(0) ? v : T(0);
    Matrix<T> y = neighborhood_conv(r, table, store.at(refine_name(b, 2, "weight")),
                                    store.at(refine_name(b, 2, "bias")));
    if (trace) {
      trace->stage_inputs.push_back(x);
      trace->stage_inputs.push_back(r);
      trace->pre_relu.push_back(std::move(h));
    }
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += y.data[i];
  }
  return x;
}

template <typename T>
Matrix<T> decoder_backward(const Matrix<T>& d_features, const PatchSet<T>& patches,
                           const DecoderConfig& cfg, ParamStore<T>& store,
                           const DecoderTrace<T>& trace) {
  if (cfg.mode == DecoderMode::none) {
    Matrix<T> d_tokens(trace.tokens.rows, trace.tokens.cols);
    for (std::size_t j = 0; j < d_features.rows; ++j) {
      auto dst = d_tokens.row(patches.voxel_to_patch[j]);
      auto src = d_features.row(j);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
    return d_tokens;
  }

  Matrix<T> dx = d_features;
  if (cfg.mode == DecoderMode::big) {
    if (trace.pre_relu.size() != kRefineBlocks) throw StateError("decoder trace missing refine stages");
    for (std::size_t b = kRefineBlocks; b-- > 0;) {
      Matrix<T> dr = neighborhood_conv_backward(trace.stage_inputs[2 * b + 1], dx, trace.neighbors,
                                                store.at(refine_name(b, 2, "weight")),
                                                store.at(refine_name(b, 2, "bias")));
      const Matrix<T>& h = trace.pre_relu[b];
      for (std::size_t i = 0; i < dr.data.size(); ++i)
        if (!(h.data[i] > T(0))) dr.data[i] = T(0);
      Matrix<T> d_in = neighborhood_conv_backward(trace.stage_inputs[2 * b], dr, trace.neighbors,
                                                  store.at(refine_name(b, 1, "weight")),
                                                  store.at(refine_name(b, 1, "bias")));
      for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += d_in.data[i];
    }
  }
  auto& up_w = store.at("decoder.upsample.weight");
  auto& up_b = store.at("decoder.upsample.bias");
  return upsample_backward(trace.tokens, patches, up_w.value, dx, up_w.grad,
                           std::span<T>(up_b.grad.data));
}

namespace {

template <typename T>
const Param<T>& seg_weight(const ParamStore<T>& store, std::size_t id) {
  const std::string name = seg_name(id, "weight");
  if (!store.contains(name)) throw InvalidInput("unknown dataset id " + std::to_string(id));
  return store.at(name);
}

} // namespace

template <typename T>
Matrix<T> seg_logits(const Matrix<T>& features, std::size_t dataset_id, const ParamStore<T>& store) {
  const auto& w = seg_weight(store, dataset_id);
  return layers::linear(features, w, store.at(seg_name(dataset_id, "bias")));
}

template <typename T>
Matrix<T> distill_logits(const Matrix<T>& features, const ParamStore<T>& store) {
  if (!store.contains("head.distill.weight")) throw StateError("model has no distillation head");
  return layers::linear(features, store.at("head.distill.weight"), store.at("head.distill.bias"));
}

template <typename T>
Matrix<T> seg_logits_backward(const Matrix<T>& features, const Matrix<T>& d_logits,
                              std::size_t dataset_id, ParamStore<T>& store) {
  seg_weight(store, dataset_id);
  return layers::linear_backward(features, d_logits, store.at(seg_name(dataset_id, "weight")),
                                 store.at(seg_name(dataset_id, "bias")));
}

template <typename T>
Matrix<T> distill_logits_backward(const Matrix<T>& features, const Matrix<T>& d_logits,
                                  ParamStore<T>& store) {
  return layers::linear_backward(features, d_logits, store.at("head.distill.weight"),
                                 store.at("head.distill.bias"));
}

template <typename T>
std::vector<std::int32_t> argmax_rows(const Matrix<T>& logits) {
  std::vector<std::int32_t> out(logits.rows);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    auto r = logits.row(i);
    std::size_t best = 0;
    for (std::size_t k = 1; k < r.size(); ++k)
      if (r[k] > r[best]) best = k;
    out[i] = static_cast<std::int32_t>(best);
  }
  return out;
}

template <typename T>
std::vector<std::int32_t> predict_points(const Matrix<T>& voxel_logits, const SparseVoxelSet& vset) {
  if (voxel_logits.rows != vset.size()) throw ShapeError("predict_points: one logit row per voxel required");
  const auto per_voxel = argmax_rows(voxel_logits);
  std::vector<std::int32_t> out(vset.point_to_voxel.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = per_voxel[vset.point_to_voxel[i]];
  return out;
}

#define VOLT_INSTANTIATE_DECODER(T)                                                                \
  template void register_decoder_params<T>(ParamStore<T>&, const DecoderConfig&);                  \
  template Matrix<T> upsample<T>(const Matrix<T>&, const PatchSet<T>&, const Matrix<T>&,           \
                                 std::span<const T>);                                              \
  template Matrix<T> upsample_backward<T>(const Matrix<T>&, const PatchSet<T>&, const Matrix<T>&,  \
                                          const Matrix<T>&, Matrix<T>&, std::span<T>);             \
  template Matrix<T> decoder_forward<T>(const Matrix<T>&, const PatchSet<T>&,                      \
                                        const SparseVoxelSet&, const DecoderConfig&,               \
                                        const ParamStore<T>&, DecoderTrace<T>*);                   \
  template Matrix<T> decoder_backward<T>(const Matrix<T>&, const PatchSet<T>&,                     \
                                         const DecoderConfig&, ParamStore<T>&,                     \
                                         const DecoderTrace<T>&);                                  \
  template Matrix<T> seg_logits<T>(const Matrix<T>&, std::size_t, const ParamStore<T>&);           \
  template Matrix<T> distill_logits<T>(const Matrix<T>&, const ParamStore<T>&);                    \
  template Matrix<T> seg_logits_backward<T>(const Matrix<T>&, const Matrix<T>&, std::size_t,       \
                                            ParamStore<T>&);                                       \
  template Matrix<T> distill_logits_backward<T>(const Matrix<T>&, const Matrix<T>&,                \
                                                ParamStore<T>&);                                   \
  template std::vector<std::int32_t> argmax_rows<T>(const Matrix<T>&);                             \
  template std::vector<std::int32_t> predict_points<T>(const Matrix<T>&, const SparseVoxelSet&);

VOLT_INSTANTIATE_DECODER(float)
VOLT_INSTANTIATE_DECODER(double)

} // namespace volt
