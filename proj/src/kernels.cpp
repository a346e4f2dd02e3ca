#include "volt/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace volt {

std::vector<Segment> segments_from_offsets(std::span<const std::size_t> offsets) {
  if (offsets.size() < 2 || offsets.front() != 0) {
    throw InvalidInput("segment offsets must start at 0 and contain at least one segment");
  }
  std::vector<Segment> segs;
  segs.reserve(offsets.size() - 1);
  for (std::size_t i = 0; i + 1 < offsets.size(); ++i) {
    if (offsets[i + 1] <= offsets[i]) {
      throw InvalidInput("segment " + std::to_string(i) + " has no tokens");
    }
    segs.push_back({offsets[i], offsets[i + 1]});
  }
  return segs;
}

namespace {

template <typename T>
void prepare_output(Matrix<T>& c, std::size_t rows, std::size_t cols, bool accumulate) {
  if (accumulate) {
    require_shape(c, rows, cols, "matmul accumulate target");
  } else if (c.rows != rows || c.cols != cols) {
    c.resize(rows, cols);
  } else {
    c.zero();
  }
}

// len x hd block of one head, transposed to hd x len.
template <typename T>
std::vector<T> head_transposed(const Matrix<T>& m, Segment seg, std::size_t off, std::size_t hd) {
  const std::size_t len = seg.size();
  std::vector<T> t(hd * len);
  for (std::size_t j = 0; j < len; ++j) {
    const T* r = &m(seg.begin + j, off);
    for (std::size_t d = 0; d < hd; ++d) t[d * len + j] = r[d];
  }
  return t;
}

} // namespace

namespace kernels {

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t a_rs, std::size_t a_cs,
          const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  constexpr std::size_t MR = 4, NR = 32;
  for (std::size_t i0 = 0; i0 < m; i0 += MR) {
    const std::size_t mr = std::min(MR, m - i0);
    const T* ai = a + i0 * a_rs;
    for (std::size_t j0 = 0; j0 < n; j0 += NR) {
      const std::size_t nr = std::min(NR, n - j0);
      T acc[MR][NR] = {};
      if (mr == MR && nr == NR) {
        for (std::size_t p = 0; p < k; ++p) {
          const T a0 = ai[p * a_cs], a1 = ai[a_rs + p * a_cs];
          const T a2 = ai[2 * a_rs + p * a_cs], a3 = ai[3 * a_rs + p * a_cs];
          if (a0 == T(0) && a1 == T(0) && a2 == T(0) && a3 == T(0)) continue;
          const T* bp = b + p * ldb + j0;
          for (std::size_t j = 0; j < NR; ++j) {
            acc[0][j] += a0 * bp[j];
            acc[1][j] += a1 * bp[j];
            acc[2][j] += a2 * bp[j];
            acc[3][j] += a3 * bp[j];
          }
        }
      } else {
        for (std::size_t p = 0; p < k; ++p) {
          const T* bp = b + p * ldb + j0;
          for (std::size_t r = 0; r < mr; ++r) {
            const T av = ai[r * a_rs + p * a_cs];
            if (av == T(0)) continue;
            for (std::size_t j = 0; j < nr; ++j) acc[r][j] += av * bp[j];
          }
        }
      }
      for (std::size_t r = 0; r < mr; ++r) {
        T* cr = c + (i0 + r) * ldc + j0;
        for (std::size_t j = 0; j < nr; ++j) cr[j] += acc[r][j];
      }
    }
  }
}

namespace {

constexpr std::size_t kRowBlock = 16;

template <typename T>
void gemm_parallel(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t a_rs,
                   std::size_t a_cs, const T* b, T* c) {
  const auto blocks = static_cast<std::ptrdiff_t>((m + kRowBlock - 1) / kRowBlock);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t bi = 0; bi < blocks; ++bi) {
    const std::size_t i0 = static_cast<std::size_t>(bi) * kRowBlock;
    gemm(std::min(kRowBlock, m - i0), n, k, a + i0 * a_rs, a_rs, a_cs, b, n, c + i0 * n, n);
  }
}

} // namespace

template <typename T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate) {
  if (a.cols != b.rows) throw ShapeError("matmul: inner dimensions differ");
  prepare_output(c, a.rows, b.cols, accumulate);
  gemm_parallel(a.rows, b.cols, a.cols, a.data.data(), a.cols, 1, b.data.data(), c.data.data());
}

template <typename T>
void matmul_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate) {
  if (a.rows != b.rows) throw ShapeError("matmul_tn: inner dimensions differ");
  prepare_output(c, a.cols, b.cols, accumulate);
  gemm_parallel(a.cols, b.cols, a.rows, a.data.data(), 1, a.cols, b.data.data(), c.data.data());
}

template <typename T>
void matmul_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate) {
  if (a.cols != b.cols) throw ShapeError("matmul_nt: inner dimensions differ");
  prepare_output(c, a.rows, b.rows, accumulate);
  const std::size_t k = a.cols, n = b.rows;
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b.data[j * k + p];
  gemm_parallel(a.rows, n, k, a.data.data(), k, 1, bt.data(), c.data.data());
}

template <typename T>
void add_row_bias(Matrix<T>& m, std::span<const T> bias) {
  if (bias.size() != m.cols) throw ShapeError("add_row_bias: bias width mismatch");
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m.rows); ++i) {
    auto r = m.row(static_cast<std::size_t>(i));
    for (std::size_t j = 0; j < m.cols; ++j) r[j] += bias[j];
  }
}

template <typename T>
void column_sum(const Matrix<T>& m, std::span<T> out, bool accumulate) {
  if (out.size() != m.cols) throw ShapeError("column_sum: output width mismatch");
  if (!accumulate) std::fill(out.begin(), out.end(), T(0));
  for (std::size_t i = 0; i < m.rows; ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < m.cols; ++j) out[j] += r[j];
  }
}

template <typename T>
void attention_forward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                       std::span<const Segment> segments, std::size_t heads, T scale,
                       Matrix<T>& out, AttentionProbs<T>* probs) {
  if (q.cols % heads != 0 || k.cols != q.cols || v.cols != q.cols || k.rows != q.rows ||
      v.rows != q.rows) {
    throw ShapeError("attention_forward: q/k/v shapes disagree");
  }
  const std::size_t hd = q.cols / heads, w = q.cols;
  out.resize(q.rows, q.cols);
  if (probs) probs->assign(segments.size() * heads, Matrix<T>{});

  for (std::size_t s = 0; s < segments.size(); ++s) {
    const Segment seg = segments[s];
    const std::size_t len = seg.size();
    const auto blocks = static_cast<std::ptrdiff_t>((len + kRowBlock - 1) / kRowBlock);
    for (std::size_t h = 0; h < heads; ++h) {
      Matrix<T>* pm = nullptr;
      if (probs) {
        pm = &(*probs)[s * heads + h];
        pm->resize(len, len);
      }
      const std::size_t off = h * hd;
      const std::vector<T> kt = head_transposed(k, seg, off, hd);
#pragma omp parallel
      {
        std::vector<T> local(pm ? 0 : kRowBlock * len);
#pragma omp for schedule(static)
        for (std::ptrdiff_t bi = 0; bi < blocks; ++bi) {
          const std::size_t i0 = static_cast<std::size_t>(bi) * kRowBlock;
          const std::size_t rows = std::min(kRowBlock, len - i0);
          T* sc = pm ? &(*pm)(i0, 0) : local.data();
          std::fill(sc, sc + rows * len, T(0));
          gemm(rows, len, hd, &q(seg.begin + i0, off), w, std::size_t{1}, kt.data(), len, sc, len);
          for (std::size_t r = 0; r < rows; ++r) {
            T* row = sc + r * len;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < len; ++j) {
              row[j] *= scale;
              mx = std::max(mx, row[j]);
            }
            T sum = T(0);
            for (std::size_t j = 0; j < len; ++j) {
              row[j] = std::exp(row[j] - mx);
              sum += row[j];
            }
            const T inv = T(1) / sum;
            for (std::size_t j = 0; j < len; ++j) row[j] *= inv;
          }
          gemm(rows, hd, len, sc, len, std::size_t{1}, &v(seg.begin, off), w, &out(seg.begin + i0, off), w);
        }
      }
    }
  }
}

template <typename T>
void attention_backward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                        const AttentionProbs<T>& probs, std::span<const Segment> segments,
                        std::size_t heads, T scale, const Matrix<T>& d_out, Matrix<T>& d_q,
                        Matrix<T>& d_k, Matrix<T>& d_v) {
  if (probs.size() != segments.size() * heads) {
    throw StateError("attention_backward: probabilities do not match the segment layout");
  }
  const std::size_t hd = q.cols / heads, w = q.cols;
  d_q.resize(q.rows, q.cols);
  d_k.resize(k.rows, k.cols);
  d_v.resize(v.rows, v.cols);

  for (std::size_t s = 0; s < segments.size(); ++s) {
    const Segment seg = segments[s];
    const std::size_t len = seg.size();
    const auto blocks = static_cast<std::ptrdiff_t>((len + kRowBlock - 1) / kRowBlock);
    for (std::size_t h = 0; h < heads; ++h) {
      const Matrix<T>& p = probs[s * heads + h];
      const std::size_t off = h * hd;
      Matrix<T> ds(len, len);
      const std::vector<T> vt = head_transposed(v, seg, off, hd);

#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t bi = 0; bi < blocks; ++bi) {
        const std::size_t i0 = static_cast<std::size_t>(bi) * kRowBlock;
        const std::size_t rows = std::min(kRowBlock, len - i0);
        // dV = P^T dO
        gemm(rows, hd, len, &p(0, i0), std::size_t{1}, len, &d_out(seg.begin, off), w,
             &d_v(seg.begin + i0, off), w);
        // dS = P * (dO V^T - rowdot) * scale, then dQ = dS K
        gemm(rows, len, hd, &d_out(seg.begin + i0, off), w, std::size_t{1}, vt.data(), len, &ds(i0, 0), len);
        for (std::size_t i = i0; i < i0 + rows; ++i) {
          T dot = T(0);
          for (std::size_t j = 0; j < len; ++j) dot += p(i, j) * ds(i, j);
          for (std::size_t j = 0; j < len; ++j) ds(i, j) = p(i, j) * (ds(i, j) - dot) * scale;
        }
        gemm(rows, hd, len, &ds(i0, 0), len, std::size_t{1}, &k(seg.begin, off), w, &d_q(seg.begin + i0, off), w);
      }

      // dK = dS^T Q
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t bi = 0; bi < blocks; ++bi) {
        const std::size_t j0 = static_cast<std::size_t>(bi) * kRowBlock;
        const std::size_t rows = std::min(kRowBlock, len - j0);
        gemm(rows, hd, len, &ds(0, j0), std::size_t{1}, len, &q(seg.begin, off), w, &d_k(seg.begin + j0, off), w);
      }
    }
  }
}

} // namespace kernels

namespace serial {

template <typename T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate) {
  if (a.cols != b.rows) throw ShapeError("matmul: inner dimensions differ");
  prepare_output(c, a.rows, b.cols, accumulate);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      T acc = T(0);
      for (std::size_t p = 0; p < a.cols; ++p) acc += a(i, p) * b(p, j);
      c(i, j) += acc;
    }
}

template <typename T>
void matmul_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate) {
  if (a.rows != b.rows) throw ShapeError("matmul_tn: inner dimensions differ");
  prepare_output(c, a.cols, b.cols, accumulate);
  for (std::size_t i = 0; i < a.cols; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      T acc = T(0);
      for (std::size_t p = 0; p < a.rows; ++p) acc += a(p, i) * b(p, j);
      c(i, j) += acc;
    }
}

template <typename T>
void matmul_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate) {
  if (a.cols != b.cols) throw ShapeError("matmul_nt: inner dimensions differ");
  prepare_output(c, a.rows, b.rows, accumulate);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.rows; ++j) {
      T acc = T(0);
      for (std::size_t p = 0; p < a.cols; ++p) acc += a(i, p) * b(j, p);
      c(i, j) += acc;
    }
}

template <typename T>
void attention_forward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                       std::span<const Segment> segments, std::size_t heads, T scale,
                       Matrix<T>& out) {
  const std::size_t n = q.rows;
  const std::size_t hd = q.cols / heads;
  std::vector<std::size_t> seg_of(n);
  for (std::size_t s = 0; s < segments.size(); ++s)
    for (std::size_t i = segments[s].begin; i < segments[s].end; ++i) seg_of[i] = s;

  out.resize(n, q.cols);
  Matrix<T> logits(n, n);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (seg_of[i] != seg_of[j]) {
          logits(i, j) = -std::numeric_limits<T>::infinity();
          continue;
        }
        T acc = T(0);
        for (std::size_t d = 0; d < hd; ++d) acc += q(i, h * hd + d) * k(j, h * hd + d);
        logits(i, j) = scale * acc;
      }
    for (std::size_t i = 0; i < n; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, logits(i, j));
      T sum = T(0);
      for (std::size_t j = 0; j < n; ++j) sum += std::exp(logits(i, j) - mx);
      for (std::size_t d = 0; d < hd; ++d) {
        T acc = T(0);
        for (std::size_t j = 0; j < n; ++j)
          acc += std::exp(logits(i, j) - mx) / sum * v(j, h * hd + d);
        out(i, h * hd + d) = acc;
      }
    }
  }
}

} // namespace serial

#define VOLT_INSTANTIATE_KERNELS(T)                                                                \
  template void kernels::gemm<T>(std::size_t, std::size_t, std::size_t, const T*, std::size_t,     \
                                 std::size_t, const T*, std::size_t, T*, std::size_t);             \
  template void kernels::matmul<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&, bool);         \
  template void kernels::matmul_tn<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&, bool);      \
  template void kernels::matmul_nt<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&, bool);      \
  template void kernels::add_row_bias<T>(Matrix<T>&, std::span<const T>);                         \
  template void kernels::column_sum<T>(const Matrix<T>&, std::span<T>, bool);                      \
  template void kernels::attention_forward<T>(const Matrix<T>&, const Matrix<T>&,                  \
                                              const Matrix<T>&, std::span<const Segment>,          \
                                              std::size_t, T, Matrix<T>&, AttentionProbs<T>*);     \
  template void kernels::attention_backward<T>(                                                    \
      const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, const AttentionProbs<T>&,              \
      std::span<const Segment>, std::size_t, T, const Matrix<T>&, Matrix<T>&, Matrix<T>&,          \
      Matrix<T>&);                                                                                 \
  template void serial::matmul<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&, bool);          \
  template void serial::matmul_tn<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&, bool);       \
  template void serial::matmul_nt<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&, bool);       \
  template void serial::attention_forward<T>(const Matrix<T>&, const Matrix<T>&,                   \
                                             const Matrix<T>&, std::span<const Segment>,           \
                                             std::size_t, T, Matrix<T>&);

VOLT_INSTANTIATE_KERNELS(float)
VOLT_INSTANTIATE_KERNELS(double)

} // namespace volt
