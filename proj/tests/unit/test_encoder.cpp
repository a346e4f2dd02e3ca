#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "volt/encoder.hpp"
#include "volt/optim.hpp"

using namespace volt;

namespace {

EncoderConfig tiny() { return EncoderConfig::preset("volt-tiny"); }

ParamStore<double> make_store(const EncoderConfig& cfg, std::uint64_t seed, double sigma = 0.2) {
  ParamStore<double> s;
  register_encoder_params(s, cfg);
  init_params(s, seed, initial_qk_gain(cfg.head_dim()), sigma);
  // Nonzero biases and norm affines so every term is exercised.
  Rng rng(seed + 1);
  for (auto& p : s)
    if (p.kind != ParamKind::weight && p.kind != ParamKind::qk_gain)
      for (auto& v : p.value.data) v += uniform(rng, -0.1, 0.1);
  return s;
}

TokenBatch<double> random_batch(std::vector<std::size_t> lens, std::size_t width, std::uint64_t seed) {
  TokenBatch<double> b;
  const std::size_t n = std::accumulate(lens.begin(), lens.end(), std::size_t{0});
  b.tokens = test::random_matrix<double>(n, width, seed);
  Rng rng(seed + 7);
  for (std::size_t i = 0; i < n; ++i)
    b.positions.push_back({static_cast<std::int32_t>(rng() % 9), static_cast<std::int32_t>(rng() % 9),
                           static_cast<std::int32_t>(rng() % 4)});
  b.segment_offsets = {0};
  for (auto l : lens) b.segment_offsets.push_back(b.segment_offsets.back() + l);
  return b;
}

// Straight-line reference: one scene, plain loops, no shared helpers.
using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Matrix<double>& m) {
  Mat out(m.rows, std::vector<double>(m.cols));
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) out[i][j] = m(i, j);
  return out;
}

Mat ref_linear(const Mat& x, const Matrix<double>& w, const Matrix<double>& b) {
  Mat y(x.size(), std::vector<double>(w.cols));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < w.cols; ++j) {
      double s = b(0, j);
      for (std::size_t p = 0; p < w.rows; ++p) s += x[i][p] * w(p, j);
      y[i][j] = s;
    }
  return y;
}

Mat ref_ln(const Mat& x, const Matrix<double>& g, const Matrix<double>& b) {
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i].size());
    double mean = 0.0, var = 0.0;
    for (double v : x[i]) mean += v / d;
    for (double v : x[i]) var += (v - mean) * (v - mean) / d;
    for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mean) / std::sqrt(var + 1e-6) * g(0, j) + b(0, j);
  }
  return y;
}

Mat ref_encoder(const TokenBatch<double>& in, const EncoderConfig& cfg, const ParamStore<double>& s) {
  Mat x = to_mat(in.tokens);
  const std::size_t n = x.size(), hd = cfg.head_dim();
  auto P = [&](std::size_t l, const std::string& leaf) -> const Matrix<double>& {
    return s.at("blocks." + std::to_string(l) + "." + leaf).value;
  };
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    Mat h = ref_ln(x, P(l, "norm1.weight"), P(l, "norm1.bias"));
    Mat q = ref_linear(h, P(l, "attn.q.weight"), P(l, "attn.q.bias"));
    Mat k = ref_linear(h, P(l, "attn.k.weight"), P(l, "attn.k.bias"));
    Mat v = ref_linear(h, P(l, "attn.v.weight"), P(l, "attn.v.bias"));
    Mat o(n, std::vector<double>(cfg.width, 0.0));
    for (std::size_t head = 0; head < cfg.heads; ++head) {
      const double g = P(l, "attn.qk_gain")(0, head);
      auto prep = [&](std::vector<double> row, std::size_t t) {
        std::vector<double> u(row.begin() + static_cast<long>(head * hd), row.begin() + static_cast<long>((head + 1) * hd));
        double norm = 0.0;
        for (double a : u) norm += a * a;
        norm = std::sqrt(norm);
        for (double& a : u) a = a / norm * g;
        std::size_t base = 0;
        for (int axis = 0; axis < 3; ++axis) {
          const std::size_t np = cfg.rope.pairs[static_cast<std::size_t>(axis)];
          for (std::size_t i = 0; i < np; ++i) {
            const double ang = in.positions[t][static_cast<std::size_t>(axis)] *
                               std::pow(cfg.rope.theta_base, -static_cast<double>(i) / static_cast<double>(np));
            const double a0 = u[base + 2 * i], a1 = u[base + 2 * i + 1];
            u[base + 2 * i] = a0 * std::cos(ang) - a1 * std::sin(ang);
            u[base + 2 * i + 1] = a0 * std::sin(ang) + a1 * std::cos(ang);
          }
          base += 2 * np;
        }
        return u;
      };
      for (std::size_t i = 0; i < n; ++i) {
        auto qi = prep(q[i], i);
        std::vector<double> logit(n);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
          auto kj = prep(k[j], j);
          logit[j] = 0.0;
          for (std::size_t d = 0; d < hd; ++d) logit[j] += qi[d] * kj[d];
          mx = std::max(mx, logit[j]);
        }
        double z = 0.0;
        for (double& a : logit) z += (a = std::exp(a - mx));
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t d = 0; d < hd; ++d) o[i][head * hd + d] += logit[j] / z * v[j][head * hd + d];
      }
    }
    Mat a = ref_linear(o, P(l, "attn.proj.weight"), P(l, "attn.proj.bias"));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < cfg.width; ++j) x[i][j] += a[i][j];
    Mat h2 = ref_ln(x, P(l, "norm2.weight"), P(l, "norm2.bias"));
    Mat f1 = ref_linear(h2, P(l, "mlp.fc1.weight"), P(l, "mlp.fc1.bias"));
    for (auto& r : f1)
      for (double& a : r) a = 0.5 * a * (1.0 + std::erf(a / std::sqrt(2.0)));
    Mat f2 = ref_linear(f1, P(l, "mlp.fc2.weight"), P(l, "mlp.fc2.bias"));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < cfg.width; ++j) x[i][j] += f2[i][j];
  }
  return ref_ln(x, s.at("norm.weight").value, s.at("norm.bias").value);
}

} // namespace

TEST(EncoderConfig, Presets) {
  auto t = tiny();
  EXPECT_EQ(t.width, 64u);
  EXPECT_EQ(t.depth, 2u);
  EXPECT_EQ(t.heads, 2u);
  auto s = EncoderConfig::preset("volt-s");
  EXPECT_EQ(s.width, 384u);
  EXPECT_EQ(s.depth, 12u);
  EXPECT_EQ(s.heads, 6u);
  EXPECT_EQ(s.rope.pairs, (std::array<std::size_t, 3>{12, 12, 8}));
  auto b = EncoderConfig::preset("volt-b");
  EXPECT_EQ(b.width, 768u);
  EXPECT_EQ(b.heads, 12u);
  EXPECT_THROW(EncoderConfig::preset("volt-xl"), ConfigError);
}

TEST(EncoderConfig, ValidationErrors) {
  auto c = tiny();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.rope = RopeConfig::asymmetric(64);
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.droppath_max = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(EncoderConfig, DropPathScheduleLinearInDepth) {
  auto c = EncoderConfig::preset("volt-s");
  EXPECT_EQ(c.droppath_rate(0), 0.0);
  EXPECT_DOUBLE_EQ(c.droppath_rate(c.depth - 1), c.droppath_max);
  for (std::size_t l = 1; l < c.depth; ++l) {
    EXPECT_GT(c.droppath_rate(l), c.droppath_rate(l - 1));
    EXPECT_NEAR(c.droppath_rate(l), c.droppath_max * static_cast<double>(l) / 11.0, 1e-15);
  }
  c.depth = 1;
  EXPECT_EQ(c.droppath_rate(0), 0.0);
}

TEST(EncoderConfig, InitialGainSquaredIsSqrtHeadDim) {
  EXPECT_NEAR(initial_qk_gain(64) * initial_qk_gain(64), 8.0, 1e-12);
}

TEST(Attention, SingleTokenSceneAttendsToItself) {
  auto cfg = tiny();
  auto s = make_store(cfg, 1);
  auto b = random_batch({1, 1}, 64, 2);
  auto ctx = make_attention_context(cfg, b.positions, b.segment_offsets);
  AttentionTrace<double> tr;
  auto out = attention(b.tokens, s, 0, cfg, ctx, &tr);
  for (const auto& p : tr.probs) EXPECT_EQ(p(0, 0), 1.0);
  Matrix<double> v = tr.v;
  auto want = ref_linear(to_mat(v), s.at("blocks.0.attn.proj.weight").value, s.at("blocks.0.attn.proj.bias").value);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 64; ++j) EXPECT_NEAR(out(i, j), want[i][j], 1e-12);
}

TEST(Attention, UniformValuesIgnoreLogits) {
  auto cfg = tiny();
  auto s = make_store(cfg, 3);
  s.at("blocks.0.attn.v.weight").value.zero();
  auto b = random_batch({7}, 64, 4);
  auto ctx = make_attention_context(cfg, b.positions, b.segment_offsets);
  auto out = attention(b.tokens, s, 0, cfg, ctx, static_cast<AttentionTrace<double>*>(nullptr));
  Mat vb(1, std::vector<double>(64));
  for (std::size_t j = 0; j < 64; ++j) vb[0][j] = s.at("blocks.0.attn.v.bias").value(0, j);
  auto want = ref_linear(vb, s.at("blocks.0.attn.proj.weight").value, s.at("blocks.0.attn.proj.bias").value);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 64; ++j) EXPECT_NEAR(out(i, j), want[0][j], 1e-12);
}

TEST(Attention, QkNormBoundsLogits) {
  auto cfg = tiny();
  auto s = make_store(cfg, 5);
  s.at("blocks.0.attn.qk_gain").value.data = {1.7, 0.6};
  auto b = random_batch({20}, 64, 6);
  auto ctx = make_attention_context(cfg, b.positions, b.segment_offsets);
  AttentionTrace<double> tr;
  attention(b.tokens, s, 0, cfg, ctx, &tr);
  for (std::size_t h = 0; h < 2; ++h) {
    const double g = s.at("blocks.0.attn.qk_gain").value(0, h);
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t j = 0; j < 20; ++j) {
        double l = 0.0;
        for (std::size_t d = 0; d < 32; ++d) l += tr.q(i, h * 32 + d) * tr.k(j, h * 32 + d);
        EXPECT_LE(std::abs(l), g * g + 1e-12);
      }
  }
}

TEST(Mlp, ZeroWeightsGiveSecondBias) {
  auto cfg = tiny();
  auto s = make_store(cfg, 7);
  s.at("blocks.0.mlp.fc1.weight").value.zero();
  s.at("blocks.0.mlp.fc2.weight").value.zero();
  auto x = test::random_matrix<double>(4, 64, 8);
  auto y = mlp(x, s, 0, static_cast<MlpTrace<double>*>(nullptr));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 64; ++j) EXPECT_EQ(y(i, j), s.at("blocks.0.mlp.fc2.bias").value(0, j));
}

TEST(Mlp, InverseWeightsInLinearRegime) {
  ParamStore<double> s;
  s.add("blocks.0.mlp.fc1.weight", 2, 2, ParamKind::weight).value.data = {2, 1, 1, 1};
  s.add("blocks.0.mlp.fc1.bias", 1, 2, ParamKind::bias);
  s.add("blocks.0.mlp.fc2.weight", 2, 2, ParamKind::weight).value.data = {1, -1, -1, 2};
  s.add("blocks.0.mlp.fc2.bias", 1, 2, ParamKind::bias);
  Matrix<double> x(1, 2);
  x.data = {10, 20};
  auto y = mlp(x, s, 0, static_cast<MlpTrace<double>*>(nullptr));
  EXPECT_NEAR(y(0, 0), 10.0, 1e-12);
  EXPECT_NEAR(y(0, 1), 20.0, 1e-12);
}

TEST(Mlp, MatchesNaiveLoops) {
  auto cfg = tiny();
  auto s = make_store(cfg, 9);
  auto x = test::random_matrix<double>(6, 64, 10);
  auto y = mlp(x, s, 1, static_cast<MlpTrace<double>*>(nullptr));
  Mat f1 = ref_linear(to_mat(x), s.at("blocks.1.mlp.fc1.weight").value, s.at("blocks.1.mlp.fc1.bias").value);
  for (auto& r : f1)
    for (double& a : r) a = 0.5 * a * (1.0 + std::erf(a / std::sqrt(2.0)));
  Mat f2 = ref_linear(f1, s.at("blocks.1.mlp.fc2.weight").value, s.at("blocks.1.mlp.fc2.bias").value);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 64; ++j) EXPECT_NEAR(y(i, j), f2[i][j], 1e-6);
}

TEST(Block, ZeroRateIsDeterministicInTraining) {
  auto cfg = tiny();
  cfg.droppath_max = 0.0;
  auto s = make_store(cfg, 11);
  auto b = random_batch({5, 4}, 64, 12);
  auto ctx = make_attention_context(cfg, b.positions, b.segment_offsets);
  Rng r1(1), r2(2);
  auto a = block_forward(b.tokens, s, 1, cfg, ctx, true, &r1, static_cast<BlockTrace<double>*>(nullptr));
  auto c = block_forward(b.tokens, s, 1, cfg, ctx, false, &r2, static_cast<BlockTrace<double>*>(nullptr));
  EXPECT_EQ(a, c);
}

TEST(Block, NearOneRateKeepsInput) {
  auto cfg = tiny();
  cfg.droppath_max = 0.999;
  auto s = make_store(cfg, 13);
  auto b = random_batch({6}, 64, 14);
  auto ctx = make_attention_context(cfg, b.positions, b.segment_offsets);
  Rng rng(3);
  int unchanged = 0;
  for (int i = 0; i < 1000; ++i)
    unchanged += block_forward(b.tokens, s, 1, cfg, ctx, true, &rng, static_cast<BlockTrace<double>*>(nullptr)) == b.tokens;
  EXPECT_GE(unchanged, 990);
}

TEST(Block, DropPathMonteCarloMatchesExpectation) {
  auto cfg = tiny();
  cfg.droppath_max = 0.5;
  auto s = make_store(cfg, 15);
  s.at("blocks.1.mlp.fc2.weight").value.zero();
  s.at("blocks.1.mlp.fc2.bias").value.zero();
  auto b = random_batch({5}, 64, 16);
  auto ctx = make_attention_context(cfg, b.positions, b.segment_offsets);
  auto det = block_forward(b.tokens, s, 1, cfg, ctx, false, nullptr, static_cast<BlockTrace<double>*>(nullptr));
  Matrix<double> sum(5, 64);
  Rng rng(17);
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    auto y = block_forward(b.tokens, s, 1, cfg, ctx, true, &rng, static_cast<BlockTrace<double>*>(nullptr));
    for (std::size_t k = 0; k < sum.data.size(); ++k) sum.data[k] += y.data[k] - b.tokens.data[k];
  }
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < sum.data.size(); ++k) {
    const double branch = det.data[k] - b.tokens.data[k];
    num += std::pow(sum.data[k] / n - branch, 2);
    den += branch * branch;
  }
  EXPECT_LE(std::sqrt(num / den), 0.02);
}

TEST(Encoder, DepthZeroIsIdentity) {
  auto cfg = tiny();
  cfg.depth = 0;
  ParamStore<double> s;
  register_encoder_params(s, cfg);
  EXPECT_EQ(s.size(), 0u);
  auto b = random_batch({3, 2}, 64, 18);
  auto out = encoder_forward(b, cfg, s, false, nullptr, static_cast<EncoderTrace<double>*>(nullptr));
  EXPECT_EQ(out.tokens, b.tokens);
  EXPECT_EQ(out.positions, b.positions);
}

TEST(Encoder, MatchesStraightLineReference) {
  auto cfg = tiny();
  auto s = make_store(cfg, 19);
  auto b = random_batch({3}, 64, 20);
  auto out = encoder_forward(b, cfg, s, false, nullptr, static_cast<EncoderTrace<double>*>(nullptr));
  auto ref = ref_encoder(b, cfg, s);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 64; ++j) EXPECT_NEAR(out.tokens(i, j), ref[i][j], 1e-6);
}

TEST(Encoder, BatchedEqualsSeparate) {
  auto cfg = tiny();
  auto s = make_store(cfg, 21);
  auto b = random_batch({9, 14}, 64, 22);
  auto both = encoder_forward(b, cfg, s, false, nullptr, static_cast<EncoderTrace<double>*>(nullptr));
  for (std::size_t seg = 0; seg < 2; ++seg) {
    const std::size_t lo = b.segment_offsets[seg], hi = b.segment_offsets[seg + 1];
    TokenBatch<double> one;
    one.tokens.resize(hi - lo, 64);
    std::copy(b.tokens.data.begin() + static_cast<long>(lo * 64), b.tokens.data.begin() + static_cast<long>(hi * 64),
              one.tokens.data.begin());
    one.positions.assign(b.positions.begin() + static_cast<long>(lo), b.positions.begin() + static_cast<long>(hi));
    one.segment_offsets = {0, hi - lo};
    auto alone = encoder_forward(one, cfg, s, false, nullptr, static_cast<EncoderTrace<double>*>(nullptr));
    for (std::size_t i = 0; i < hi - lo; ++i)
      for (std::size_t j = 0; j < 64; ++j) EXPECT_NEAR(both.tokens(lo + i, j), alone.tokens(i, j), 1e-6);
  }
}

TEST(Encoder, PermutationEquivariant) {
  auto cfg = tiny();
  auto s = make_store(cfg, 23);
  auto b = random_batch({12}, 64, 24);
  std::vector<std::size_t> perm(12);
  std::iota(perm.begin(), perm.end(), 0u);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[0], perm[5]);
  TokenBatch<double> pb = b;
  for (std::size_t i = 0; i < 12; ++i) {
    for (std::size_t j = 0; j < 64; ++j) pb.tokens(i, j) = b.tokens(perm[i], j);
    pb.positions[i] = b.positions[perm[i]];
  }
  auto out = encoder_forward(b, cfg, s, false, nullptr, static_cast<EncoderTrace<double>*>(nullptr));
  auto pout = encoder_forward(pb, cfg, s, false, nullptr, static_cast<EncoderTrace<double>*>(nullptr));
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = 0; j < 64; ++j) EXPECT_NEAR(pout.tokens(i, j), out.tokens(perm[i], j), 1e-5);
}

TEST(Encoder, EvalForwardIsBitwiseRepeatable) {
  auto cfg = tiny();
  ParamStore<float> s;
  register_encoder_params(s, cfg);
  init_params(s, 25, initial_qk_gain(32));
  TokenBatch<float> b;
  b.tokens = test::random_matrix<float>(40, 64, 26);
  for (int i = 0; i < 40; ++i) b.positions.push_back({i % 5, i / 5, i % 3});
  b.segment_offsets = {0, 17, 40};
  auto a = encoder_forward(b, cfg, s, false, nullptr, static_cast<EncoderTrace<float>*>(nullptr));
  auto c = encoder_forward(b, cfg, s, false, nullptr, static_cast<EncoderTrace<float>*>(nullptr));
  EXPECT_EQ(a.tokens, c.tokens);
}

TEST(EncoderBackward, RequiresTrace) {
  auto cfg = tiny();
  auto s = make_store(cfg, 27);
  EncoderTrace<double> tr;
  Matrix<double> d(3, 64);
  try {
    encoder_backward(d, cfg, s, tr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "state");
  }
}

TEST(EncoderBackward, ZeroUpstreamGivesZeroGrads) {
  auto cfg = tiny();
  auto s = make_store(cfg, 29);
  auto b = random_batch({5, 3}, 64, 30);
  EncoderTrace<double> tr;
  Rng rng(1);
  encoder_forward(b, cfg, s, true, &rng, &tr);
  auto dx = encoder_backward(Matrix<double>(8, 64), cfg, s, tr);
  for (double g : dx.data) EXPECT_EQ(g, 0.0);
  for (const auto& p : s)
    for (double g : p.grad.data) EXPECT_EQ(g, 0.0);
}

TEST(EncoderBackward, MatchesFiniteDifferences) {
  auto cfg = tiny();
  cfg.droppath_max = 0.0;
  auto s = make_store(cfg, 31);
  auto b = random_batch({4, 3}, 64, 32);
  auto g = test::random_matrix<double>(7, 64, 33);
  auto loss = [&]() {
    auto out = encoder_forward(b, cfg, s, false, nullptr, static_cast<EncoderTrace<double>*>(nullptr));
    double v = 0.0;
    for (std::size_t i = 0; i < g.data.size(); ++i) v += g.data[i] * out.tokens.data[i];
    return v;
  };
  EncoderTrace<double> tr;
  encoder_forward(b, cfg, s, false, nullptr, &tr);
  s.zero_grad();
  auto dx = encoder_backward(g, cfg, s, tr);
  const double eps = 1e-5;
  double worst = 0.0;
  for (auto& p : s)
    for (std::size_t i = 0; i < p.value.data.size(); i += 97) {
      const double keep = p.value.data[i];
      p.value.data[i] = keep + eps;
      const double up = loss();
      p.value.data[i] = keep - eps;
      const double dn = loss();
      p.value.data[i] = keep;
      const double num = (up - dn) / (2 * eps);
      worst = std::max(worst, std::abs(num - p.grad.data[i]) / std::max(1.0, std::abs(num)));
    }
  for (std::size_t i = 0; i < b.tokens.data.size(); i += 13) {
    const double keep = b.tokens.data[i];
    b.tokens.data[i] = keep + eps;
    const double up = loss();
    b.tokens.data[i] = keep - eps;
    const double dn = loss();
    b.tokens.data[i] = keep;
    const double num = (up - dn) / (2 * eps);
    worst = std::max(worst, std::abs(num - dx.data[i]) / std::max(1.0, std::abs(num)));
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(LayerNorm, TwoTokenHandDerivation) {
  Matrix<double> x(2, 2);
  x.data = {1.0, 3.0, 5.0, 2.0};
  std::vector<double> g{2.0, 0.5}, b{0.1, -0.1};
  layers::LayerNormCache<double> cache;
  auto y = layers::layer_norm(x, std::span<const double>(g), std::span<const double>(b), &cache);
  // With two entries the normalized row is (-s, s), s = 1 / sqrt(1 + eps / var).
  const double s1 = 1.0 / std::sqrt(1.0 + 1e-6 / 1.0), s2 = 1.0 / std::sqrt(1.0 + 1e-6 / 2.25);
  EXPECT_NEAR(y(0, 0), -s1 * 2.0 + 0.1, 1e-12);
  EXPECT_NEAR(y(1, 1), -s2 * 0.5 - 0.1, 1e-12);
  Matrix<double> dy(2, 2);
  dy.data = {1.0, 2.0, -1.0, 4.0};
  std::vector<double> dg(2, 0.0), db(2, 0.0);
  auto dx = layers::layer_norm_backward(dy, cache, std::span<const double>(g), std::span<double>(dg), std::span<double>(db));
  EXPECT_NEAR(dg[0], 1.0 * -s1 + -1.0 * s2, 1e-12);
  EXPECT_NEAR(dg[1], 2.0 * s1 + 4.0 * -s2, 1e-12);
  EXPECT_NEAR(db[0], 0.0, 1e-12);
  EXPECT_NEAR(db[1], 6.0, 1e-12);
  // Two-entry LN output is invariant to shifting both inputs.
  EXPECT_NEAR(dx(0, 0) + dx(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(dx(1, 0) + dx(1, 1), 0.0, 1e-12);
}
