#include "volt/model.hpp"

#include "volt/error.hpp"
#include "volt/optim.hpp"

namespace volt {

void ModelConfig::sync() {
  decoder.token_width = encoder.width;
  if (decoder.mode == DecoderMode::none) decoder.width = encoder.width;
  decoder.patch_size = patch_size;
}

void ModelConfig::validate() const {
  encoder.validate();
  decoder.validate();
  if (in_channels == 0) throw ConfigError("model needs at least one input channel");
  if (patch_size < 1) throw ConfigError("patch size must be >= 1");
  if (decoder.token_width != encoder.width || decoder.patch_size != patch_size) {
    throw ConfigError("decoder config is out of sync with encoder width / patch size");
  }
}

ModelConfig ModelConfig::from_preset(std::string_view preset, int patch_size, std::size_t in_channels,
                                     std::vector<std::size_t> dataset_classes, DecoderMode decoder) {
  ModelConfig cfg;
  cfg.encoder = EncoderConfig::preset(preset);
  cfg.patch_size = patch_size;
  cfg.in_channels = in_channels;
  cfg.decoder.mode = decoder;
  cfg.decoder.width = cfg.encoder.width;
  cfg.decoder.dataset_classes = std::move(dataset_classes);
  cfg.sync();
  return cfg;
}

template <typename T>
VoltModel<T>::VoltModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto p = static_cast<std::size_t>(cfg_.patch_size);
  params_.add("embed.weight", p * p * p * cfg_.in_channels, cfg_.encoder.width, ParamKind::weight);
  params_.add("embed.bias", 1, cfg_.encoder.width, ParamKind::bias);
  register_encoder_params(params_, cfg_.encoder);
  register_decoder_params(params_, cfg_.decoder);
}

template <typename T>
void VoltModel<T>::init(std::uint64_t seed) {
  init_params(params_, seed, initial_qk_gain(cfg_.encoder.head_dim()));
}

template <typename T>
ModelOutput<T> VoltModel<T>::forward(std::span<const SparseVoxelSet> scenes,
                                     std::span<const std::size_t> dataset_ids, bool training, Rng* rng,
                                     ModelTrace<T>* trace, bool with_distill,
                                     std::span<const VoxelCoord> grid_shifts) const {
  if (scenes.empty()) throw InvalidInput("model forward needs at least one scene");
  if (dataset_ids.size() != scenes.size()) throw ShapeError("one dataset id per scene required");
  if (!grid_shifts.empty() && grid_shifts.size() != scenes.size()) {
    throw ShapeError("one grid shift per scene required");
  }
  const std::size_t n = scenes.size();
  const auto& embed_w = params_.at("embed.weight");
  const auto embed_b = std::span<const T>(params_.at("embed.bias").value.data);

  std::vector<PatchSet<T>> patches(n);
  std::vector<TokenBatch<T>> parts(n);
  for (std::size_t s = 0; s < n; ++s) {
    if (scenes[s].channels() != cfg_.in_channels) {
      throw ShapeError("scene " + std::to_string(s) + " has " + std::to_string(scenes[s].channels()) +
                       " channels, model expects " + std::to_string(cfg_.in_channels));
    }
    patches[s] = patchify<T>(scenes[s], cfg_.patch_size, grid_shifts.empty() ? VoxelCoord{0, 0, 0} : grid_shifts[s]);
    parts[s] = embed(patches[s], embed_w.value, embed_b);
  }
  const TokenBatch<T> tokens = concat_batches<T>(parts);
  const TokenBatch<T> encoded =
      encoder_forward(tokens, cfg_.encoder, params_, training, rng, trace ? &trace->encoder : nullptr);

  ModelOutput<T> out;
  if (trace) {
    trace->decoder.assign(n, DecoderTrace<T>{});
    trace->dataset_ids.assign(dataset_ids.begin(), dataset_ids.end());
    trace->token_offsets = tokens.segment_offsets;
  }
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t begin = tokens.segment_offsets[s], end = tokens.segment_offsets[s + 1];
    Matrix<T> scene_tokens(end - begin, encoded.tokens.cols);
    std::copy(encoded.tokens.data.begin() + static_cast<std::ptrdiff_t>(begin * encoded.tokens.cols),
              encoded.tokens.data.begin() + static_cast<std::ptrdiff_t>(end * encoded.tokens.cols),
              scene_tokens.data.begin());
    Matrix<T> f = decoder_forward(scene_tokens, patches[s], scenes[s], cfg_.decoder, params_,
                                  trace ? &trace->decoder[s] : nullptr);
    out.seg_logits.push_back(seg_logits(f, dataset_ids[s], params_));
    if (with_distill) out.distill_logits.push_back(distill_logits(f, params_));
    out.features.push_back(std::move(f));
  }
  if (trace) {
    trace->patches = std::move(patches);
    trace->features = out.features;
    trace->recorded = true;
  }
  return out;
}

template <typename T>
void VoltModel<T>::backward(const ModelTrace<T>& trace, std::span<const Matrix<T>> d_seg,
                            std::span<const Matrix<T>> d_distill) {
  if (!trace.recorded) throw StateError("model backward called without a recorded forward trace");
  const std::size_t n = trace.patches.size();
  if (d_seg.size() != n || (!d_distill.empty() && d_distill.size() != n)) {
    throw ShapeError("model backward: one gradient per scene required");
  }
  const std::size_t d = cfg_.encoder.width;
  Matrix<T> d_tokens(trace.token_offsets.back(), d);
  for (std::size_t s = 0; s < n; ++s) {
    Matrix<T> d_f = seg_logits_backward(trace.features[s], d_seg[s], trace.dataset_ids[s], params_);
    if (!d_distill.empty()) {
      Matrix<T> d_f2 = distill_logits_backward(trace.features[s], d_distill[s], params_);
      for (std::size_t i = 0; i < d_f.data.size(); ++i) d_f.data[i] += d_f2.data[i];
    }
    Matrix<T> d_scene = decoder_backward(d_f, trace.patches[s], cfg_.decoder, params_, trace.decoder[s]);
    std::copy(d_scene.data.begin(), d_scene.data.end(),
              d_tokens.data.begin() + static_cast<std::ptrdiff_t>(trace.token_offsets[s] * d));
  }
  const Matrix<T> d_embedded = encoder_backward(d_tokens, cfg_.encoder, params_, trace.encoder);
  auto& embed_w = params_.at("embed.weight");
  auto& embed_b = params_.at("embed.bias");
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t begin = trace.token_offsets[s], end = trace.token_offsets[s + 1];
    Matrix<T> slice(end - begin, d);
    std::copy(d_embedded.data.begin() + static_cast<std::ptrdiff_t>(begin * d),
              d_embedded.data.begin() + static_cast<std::ptrdiff_t>(end * d), slice.data.begin());
    embed_backward<T>(trace.patches[s], embed_w.value, slice, embed_w.grad,
                   std::span<T>(embed_b.grad.data), nullptr);
  }
}

template <typename T>
BatchLoss<T> batch_loss(const ModelOutput<T>& out, std::span<const std::vector<std::int32_t>> y_gt,
                        std::span<const std::vector<std::int32_t>> y_teacher, const LossConfig& cfg) {
  const std::size_t n = out.seg_logits.size();
  if (y_gt.size() != n) throw ShapeError("batch_loss: one label vector per scene required");
  if (cfg.distill && (y_teacher.size() != n || out.distill_logits.size() != n)) {
    throw StateError("batch_loss: distillation needs teacher labels and distillation logits");
  }
  BatchLoss<T> res;
  const T inv = T(1) / static_cast<T>(n);
  for (std::size_t s = 0; s < n; ++s) {
    if (cfg.distill) {
      auto dl = distill_loss(out.seg_logits[s], out.distill_logits[s], y_gt[s], y_teacher[s],
                             cfg.teacher_weight, cfg.seg);
      res.total += dl.total / static_cast<double>(n);
      res.seg += dl.seg / static_cast<double>(n);
      res.distill += dl.distill / static_cast<double>(n);
      for (auto& g : dl.d_seg_logits.data) g *= inv;
      for (auto& g : dl.d_distill_logits.data) g *= inv;
      res.d_seg.push_back(std::move(dl.d_seg_logits));
      res.d_distill.push_back(std::move(dl.d_distill_logits));
    } else {
      auto sl = seg_loss(out.seg_logits[s], y_gt[s], cfg.seg);
      res.total += sl.value / static_cast<double>(n);
      res.seg += sl.value / static_cast<double>(n);
      for (auto& g : sl.grad.data) g *= inv;
      res.d_seg.push_back(std::move(sl.grad));
    }
  }
  return res;
}

template class VoltModel<float>;
template class VoltModel<double>;
template BatchLoss<float> batch_loss<float>(const ModelOutput<float>&, std::span<const std::vector<std::int32_t>>,
                                            std::span<const std::vector<std::int32_t>>, const LossConfig&);
template BatchLoss<double> batch_loss<double>(const ModelOutput<double>&,
                                              std::span<const std::vector<std::int32_t>>,
                                              std::span<const std::vector<std::int32_t>>, const LossConfig&);

} // namespace volt
