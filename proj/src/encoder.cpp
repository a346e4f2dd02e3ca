#include "volt/encoder.hpp"

#include <cmath>

#include "volt/error.hpp"

namespace volt {

namespace {

std::string pname(std::size_t block, std::string_view leaf) {
  return "blocks." + std::to_string(block) + "." + std::string(leaf);
}

template <typename T>
std::span<const T> values(const ParamStore<T>& s, const std::string& name) {
  return std::span<const T>(s.at(name).value.data);
}

template <typename T>
std::span<T> grads(ParamStore<T>& s, const std::string& name) {
  return std::span<T>(s.at(name).grad.data);
}

// Multiplies each token row by the multiplier of its segment.
template <typename T>
void scale_by_segment(Matrix<T>& m, std::span<const Segment> segs, std::span<const T> keep) {
  for (std::size_t s = 0; s < segs.size(); ++s) {
    if (keep[s] == T(1)) continue;
    for (std::size_t i = segs[s].begin; i < segs[s].end; ++i)
      for (auto& v : m.row(i)) v *= keep[s];
  }
}

template <typename T>
std::vector<T> sample_keep(std::size_t segments, double rate, bool training, Rng* rng) {
  std::vector<T> keep(segments, T(1));
  if (!training || rate <= 0.0) return keep;
  if (!rng) throw StateError("DropPath in training mode needs a generator");
  for (auto& k : keep) k = bernoulli(*rng, 1.0 - rate) ? static_cast<T>(1.0 / (1.0 - rate)) : T(0);
  return keep;
}

} // namespace

double EncoderConfig::droppath_rate(std::size_t index) const {
  if (depth <= 1) return 0.0;
  return droppath_max * static_cast<double>(index) / static_cast<double>(depth - 1);
}

void EncoderConfig::validate() const {
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw ConfigError("encoder width must be a positive multiple of heads");
  }
  if (head_dim() % 2 != 0) throw ConfigError("encoder head_dim must be even");
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be >= 1");
  if (droppath_max < 0.0 || droppath_max >= 1.0) throw ConfigError("droppath_max must be in [0, 1)");
  if (rope.head_dim != head_dim()) {
    throw ConfigError("rope head_dim " + std::to_string(rope.head_dim) +
                      " does not match encoder head_dim " + std::to_string(head_dim()));
  }
  rope.validate();
}

EncoderConfig EncoderConfig::preset(std::string_view name) {
  EncoderConfig cfg;
  if (name == "volt-tiny") {
    cfg.width = 64, cfg.depth = 2, cfg.heads = 2, cfg.droppath_max = 0.1;
  } else if (name == "volt-s") {
    cfg.width = 384, cfg.depth = 12, cfg.heads = 6, cfg.droppath_max = 0.3;
  } else if (name == "volt-b") {
    cfg.width = 768, cfg.depth = 12, cfg.heads = 12, cfg.droppath_max = 0.3;
  } else {
    throw ConfigError("unknown model preset '" + std::string(name) + "'");
  }
  cfg.rope = RopeConfig::asymmetric(cfg.head_dim());
  return cfg;
}

double initial_qk_gain(std::size_t head_dim) {
  return std::pow(static_cast<double>(head_dim), 0.25);
}

template <typename T>
void register_encoder_params(ParamStore<T>& store, const EncoderConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.width, hidden = cfg.width * cfg.mlp_ratio;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    store.add(pname(l, "norm1.weight"), 1, d, ParamKind::norm_scale);
    store.add(pname(l, "norm1.bias"), 1, d, ParamKind::norm_bias);
    for (const char* proj : {"q", "k", "v", "proj"}) {
      store.add(pname(l, std::string("attn.") + proj + ".weight"), d, d, ParamKind::weight);
      store.add(pname(l, std::string("attn.") + proj + ".bias"), 1, d, ParamKind::bias);
    }
    if (cfg.qk_norm) store.add(pname(l, "attn.qk_gain"), 1, cfg.heads, ParamKind::qk_gain);
    store.add(pname(l, "norm2.weight"), 1, d, ParamKind::norm_scale);
    store.add(pname(l, "norm2.bias"), 1, d, ParamKind::norm_bias);
    store.add(pname(l, "mlp.fc1.weight"), d, hidden, ParamKind::weight);
    store.add(pname(l, "mlp.fc1.bias"), 1, hidden, ParamKind::bias);
    store.add(pname(l, "mlp.fc2.weight"), hidden, d, ParamKind::weight);
    store.add(pname(l, "mlp.fc2.bias"), 1, d, ParamKind::bias);
  }
  if (cfg.depth > 0 && cfg.final_norm) {
    store.add("norm.weight", 1, d, ParamKind::norm_scale);
    store.add("norm.bias", 1, d, ParamKind::norm_bias);
  }
}

AttentionContext make_attention_context(const EncoderConfig& cfg,
                                        std::span<const VoxelCoord> patch_coords,
                                        std::span<const std::size_t> segment_offsets) {
  AttentionContext ctx;
  ctx.segments = segments_from_offsets(segment_offsets);
  ctx.positions = rope_positions(patch_coords, segment_offsets, cfg.rope.coordinate_mode);
  ctx.freqs = build_frequencies(cfg.rope);
  return ctx;
}

namespace {

// Per (token, head) L2 normalization of x in place; returns the lengths.
template <typename T>
std::vector<T> normalize_heads(Matrix<T>& x, std::size_t heads) {
  const std::size_t hd = x.cols / heads;
  std::vector<T> len(x.rows * heads);
  for (std::size_t t = 0; t < x.rows; ++t)
    for (std::size_t h = 0; h < heads; ++h) {
      T* v = &x(t, h * hd);
      T s = T(0);
      for (std::size_t d = 0; d < hd; ++d) s += v[d] * v[d];
      const T n = std::sqrt(s + T(1e-12));
      len[t * heads + h] = n;
      for (std::size_t d = 0; d < hd; ++d) v[d] /= n;
    }
  return len;
}

template <typename T>
void scale_heads(Matrix<T>& x, std::size_t heads, std::span<const T> gain) {
  const std::size_t hd = x.cols / heads;
  for (std::size_t t = 0; t < x.rows; ++t)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t d = 0; d < hd; ++d) x(t, h * hd + d) *= gain[h];
}

// Backward of unit = raw / |raw| followed by gain scaling. `d` holds the
// gradient w.r.t. the gained vectors on entry and w.r.t. raw on exit.
template <typename T>
void qk_norm_backward(Matrix<T>& d, const Matrix<T>& unit, std::span<const T> len,
                      std::size_t heads, std::span<const T> gain, std::span<T> d_gain) {
  const std::size_t hd = d.cols / heads;
  for (std::size_t t = 0; t < d.rows; ++t)
    for (std::size_t h = 0; h < heads; ++h) {
      T* g = &d(t, h * hd);
      const T* u = &unit(t, h * hd);
      T gu = T(0);
      for (std::size_t k = 0; k < hd; ++k) gu += g[k] * u[k];
      d_gain[h] += gu;
      // d unit = gain * g; d raw = (d unit - u (u . d unit)) / len
      const T scale = gain[h] / len[t * heads + h];
      for (std::size_t k = 0; k < hd; ++k) g[k] = scale * (g[k] - u[k] * gu);
    }
}

} // namespace

template <typename T>
Matrix<T> attention(const Matrix<T>& x, const ParamStore<T>& store, std::size_t index,
                    const EncoderConfig& cfg, const AttentionContext& ctx, AttentionTrace<T>* trace) {
  AttentionTrace<T> local;
  AttentionTrace<T>& tr = trace ? *trace : local;
  const std::size_t heads = cfg.heads;
  tr.input = x;
  tr.q_raw = layers::linear(x, store.at(pname(index, "attn.q.weight")), store.at(pname(index, "attn.q.bias")));
  tr.k_raw = layers::linear(x, store.at(pname(index, "attn.k.weight")), store.at(pname(index, "attn.k.bias")));
  tr.v = layers::linear(x, store.at(pname(index, "attn.v.weight")), store.at(pname(index, "attn.v.bias")));

  T scale;
  if (cfg.qk_norm) {
    tr.q_unit = tr.q_raw;
    tr.k_unit = tr.k_raw;
    tr.q_len = normalize_heads(tr.q_unit, heads);
    tr.k_len = normalize_heads(tr.k_unit, heads);
    tr.q = tr.q_unit;
    tr.k = tr.k_unit;
    const auto gain = values(store, pname(index, "attn.qk_gain"));
    scale_heads(tr.q, heads, gain);
    scale_heads(tr.k, heads, gain);
    scale = T(1);
  } else {
    tr.q = tr.q_raw;
    tr.k = tr.k_raw;
    scale = T(1) / std::sqrt(static_cast<T>(cfg.head_dim()));
  }
  apply_rope(tr.q, heads, ctx.positions, ctx.freqs);
  apply_rope(tr.k, heads, ctx.positions, ctx.freqs);

  kernels::attention_forward(tr.q, tr.k, tr.v, ctx.segments, heads, scale, tr.heads_out,
                             trace ? &tr.probs : nullptr);
  return layers::linear(tr.heads_out, store.at(pname(index, "attn.proj.weight")),
                        store.at(pname(index, "attn.proj.bias")));
}

template <typename T>
Matrix<T> attention_backward(const Matrix<T>& d_out, ParamStore<T>& store, std::size_t index,
                             const EncoderConfig& cfg, const AttentionContext& ctx,
                             const AttentionTrace<T>& tr) {
  const std::size_t heads = cfg.heads;
  Matrix<T> d_heads = layers::linear_backward(tr.heads_out, d_out, store.at(pname(index, "attn.proj.weight")),
                                              store.at(pname(index, "attn.proj.bias")));
  const T scale = cfg.qk_norm ? T(1) : T(1) / std::sqrt(static_cast<T>(cfg.head_dim()));
  Matrix<T> dq, dk, dv;
  kernels::attention_backward(tr.q, tr.k, tr.v, tr.probs, ctx.segments, heads, scale, d_heads, dq, dk, dv);
  apply_rope(dq, heads, ctx.positions, ctx.freqs, /*inverse=*/true);
  apply_rope(dk, heads, ctx.positions, ctx.freqs, /*inverse=*/true);
  if (cfg.qk_norm) {
    const auto gain = values(store, pname(index, "attn.qk_gain"));
    auto d_gain = grads(store, pname(index, "attn.qk_gain"));
    qk_norm_backward(dq, tr.q_unit, std::span<const T>(tr.q_len), heads, gain, d_gain);
    qk_norm_backward(dk, tr.k_unit, std::span<const T>(tr.k_len), heads, gain, d_gain);
  }
  Matrix<T> dx = layers::linear_backward(tr.input, dq, store.at(pname(index, "attn.q.weight")),
                                         store.at(pname(index, "attn.q.bias")));
  Matrix<T> dxk = layers::linear_backward(tr.input, dk, store.at(pname(index, "attn.k.weight")),
                                          store.at(pname(index, "attn.k.bias")));
  Matrix<T> dxv = layers::linear_backward(tr.input, dv, store.at(pname(index, "attn.v.weight")),
                                          store.at(pname(index, "attn.v.bias")));
  for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dxk.data[i] + dxv.data[i];
  return dx;
}

template <typename T>
Matrix<T> mlp(const Matrix<T>& x, const ParamStore<T>& store, std::size_t index, MlpTrace<T>* trace) {
  MlpTrace<T> local;
  MlpTrace<T>& tr = trace ? *trace : local;
  tr.input = x;
  tr.pre_act = layers::linear(x, store.at(pname(index, "mlp.fc1.weight")), store.at(pname(index, "mlp.fc1.bias")));
  tr.act = tr.pre_act;
  for (auto& v : tr.act.data) v = layers::gelu(v);
  return layers::linear(tr.act, store.at(pname(index, "mlp.fc2.weight")), store.at(pname(index, "mlp.fc2.bias")));
}

template <typename T>
Matrix<T> mlp_backward(const Matrix<T>& d_out, ParamStore<T>& store, std::size_t index,
                       const MlpTrace<T>& tr) {
  Matrix<T> d_act = layers::linear_backward(tr.act, d_out, store.at(pname(index, "mlp.fc2.weight")),
                                            store.at(pname(index, "mlp.fc2.bias")));
  for (std::size_t i = 0; i < d_act.data.size(); ++i) d_act.data[i] *= layers::gelu_grad(tr.pre_act.data[i]);
  return layers::linear_backward(tr.input, d_act, store.at(pname(index, "mlp.fc1.weight")),
                                 store.at(pname(index, "mlp.fc1.bias")));
}

template <typename T>
Matrix<T> block_forward(const Matrix<T>& x, const ParamStore<T>& store, std::size_t index,
                        const EncoderConfig& cfg, const AttentionContext& ctx, bool training,
                        Rng* rng, BlockTrace<T>* trace) {
  BlockTrace<T> local;
  BlockTrace<T>& tr = trace ? *trace : local;
  const double rate = cfg.droppath_rate(index);
  tr.keep_attn = sample_keep<T>(ctx.segments.size(), rate, training, rng);
  tr.keep_mlp = sample_keep<T>(ctx.segments.size(), rate, training, rng);

  Matrix<T> h = layers::layer_norm(x, values(store, pname(index, "norm1.weight")),
                                   values(store, pname(index, "norm1.bias")), trace ? &tr.norm1 : nullptr);
  Matrix<T> a = attention(h, store, index, cfg, ctx, trace ? &tr.attn : nullptr);
  scale_by_segment(a, ctx.segments, std::span<const T>(tr.keep_attn));
  Matrix<T> x1 = x;
  for (std::size_t i = 0; i < x1.data.size(); ++i) x1.data[i] += a.data[i];

  Matrix<T> h2 = layers::layer_norm(x1, values(store, pname(index, "norm2.weight")),
                                    values(store, pname(index, "norm2.bias")), trace ? &tr.norm2 : nullptr);
  Matrix<T> m = mlp(h2, store, index, trace ? &tr.mlp : nullptr);
  scale_by_segment(m, ctx.segments, std::span<const T>(tr.keep_mlp));
  for (std::size_t i = 0; i < x1.data.size(); ++i) x1.data[i] += m.data[i];
  return x1;
}

template <typename T>
Matrix<T> block_backward(const Matrix<T>& d_out, ParamStore<T>& store, std::size_t index,
                         const EncoderConfig& cfg, const AttentionContext& ctx,
                         const BlockTrace<T>& tr) {
  Matrix<T> d_branch = d_out;
  scale_by_segment(d_branch, ctx.segments, std::span<const T>(tr.keep_mlp));
  Matrix<T> d_h2 = mlp_backward(d_branch, store, index, tr.mlp);
  Matrix<T> d_x1 = layers::layer_norm_backward(d_h2, tr.norm2, values(store, pname(index, "norm2.weight")),
                                               grads(store, pname(index, "norm2.weight")),
                                               grads(store, pname(index, "norm2.bias")));
  for (std::size_t i = 0; i < d_x1.data.size(); ++i) d_x1.data[i] += d_out.data[i];

  d_branch = d_x1;
  scale_by_segment(d_branch, ctx.segments, std::span<const T>(tr.keep_attn));
  Matrix<T> d_h = attention_backward(d_branch, store, index, cfg, ctx, tr.attn);
  Matrix<T> d_x = layers::layer_norm_backward(d_h, tr.norm1, values(store, pname(index, "norm1.weight")),
                                              grads(store, pname(index, "norm1.weight")),
                                              grads(store, pname(index, "norm1.bias")));
  for (std::size_t i = 0; i < d_x.data.size(); ++i) d_x.data[i] += d_x1.data[i];
  return d_x;
}

template <typename T>
TokenBatch<T> encoder_forward(const TokenBatch<T>& x, const EncoderConfig& cfg,
                              const ParamStore<T>& store, bool training, Rng* rng,
                              EncoderTrace<T>* trace) {
  x.validate();
  if (x.tokens.cols != cfg.width) throw ShapeError("encoder_forward: token width differs from config");
  TokenBatch<T> out;
  out.positions = x.positions;
  out.segment_offsets = x.segment_offsets;
  if (cfg.depth == 0) {
    out.tokens = x.tokens;
    if (trace) *trace = EncoderTrace<T>{{}, {}, {}, segments_from_offsets(x.segment_offsets), true};
    return out;
  }

  AttentionContext ctx = make_attention_context(cfg, x.positions, x.segment_offsets);
  if (trace) {
    trace->blocks.assign(cfg.depth, BlockTrace<T>{});
    trace->positions = ctx.positions;
    trace->segments = ctx.segments;
  }
  Matrix<T> h = x.tokens;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    h = block_forward(h, store, l, cfg, ctx, training, rng, trace ? &trace->blocks[l] : nullptr);
  }
  if (cfg.final_norm) {
    h = layers::layer_norm(h, values(store, "norm.weight"), values(store, "norm.bias"),
                           trace ? &trace->final_norm : nullptr);
  }
  out.tokens = std::move(h);
  if (trace) trace->recorded = true;
  return out;
}

template <typename T>
Matrix<T> encoder_backward(const Matrix<T>& d_out, const EncoderConfig& cfg, ParamStore<T>& store,
                           const EncoderTrace<T>& trace) {
  if (!trace.recorded) throw StateError("encoder_backward called without a recorded forward trace");
  if (cfg.depth == 0) return d_out;
  if (trace.blocks.size() != cfg.depth) throw StateError("encoder trace depth does not match config");

  AttentionContext ctx{trace.positions, trace.segments, build_frequencies(cfg.rope)};
  Matrix<T> d = d_out;
  if (cfg.final_norm) {
    d = layers::layer_norm_backward(d, trace.final_norm, values(store, "norm.weight"),
                                    grads(store, "norm.weight"), grads(store, "norm.bias"));
  }
  for (std::size_t l = cfg.depth; l-- > 0;) d = block_backward(d, store, l, cfg, ctx, trace.blocks[l]);
  return d;
}

#define VOLT_INSTANTIATE_ENCODER(T)                                                                \
  template void register_encoder_params<T>(ParamStore<T>&, const EncoderConfig&);                  \
  template Matrix<T> attention<T>(const Matrix<T>&, const ParamStore<T>&, std::size_t,             \
                                  const EncoderConfig&, const AttentionContext&, AttentionTrace<T>*); \
  template Matrix<T> attention_backward<T>(const Matrix<T>&, ParamStore<T>&, std::size_t,          \
                                           const EncoderConfig&, const AttentionContext&,          \
                                           const AttentionTrace<T>&);                              \
  template Matrix<T> mlp<T>(const Matrix<T>&, const ParamStore<T>&, std::size_t, MlpTrace<T>*);    \
  template Matrix<T> mlp_backward<T>(const Matrix<T>&, ParamStore<T>&, std::size_t,                \
                                     const MlpTrace<T>&);                                          \
  template Matrix<T> block_forward<T>(const Matrix<T>&, const ParamStore<T>&, std::size_t,         \
                                      const EncoderConfig&, const AttentionContext&, bool, Rng*,   \
                                      BlockTrace<T>*);                                             \
  template Matrix<T> block_backward<T>(const Matrix<T>&, ParamStore<T>&, std::size_t,              \
                                       const EncoderConfig&, const AttentionContext&,              \
                                       const BlockTrace<T>&);                                      \
  template TokenBatch<T> encoder_forward<T>(const TokenBatch<T>&, const EncoderConfig&,            \
                                            const ParamStore<T>&, bool, Rng*, EncoderTrace<T>*);   \
  template Matrix<T> encoder_backward<T>(const Matrix<T>&, const EncoderConfig&, ParamStore<T>&,   \
                                         const EncoderTrace<T>&);

VOLT_INSTANTIATE_ENCODER(float)
VOLT_INSTANTIATE_ENCODER(double)

} // namespace volt
