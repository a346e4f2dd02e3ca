#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "volt/tensor.hpp"

// Dense building blocks used by every module. `volt::kernels` holds the
// OpenMP-parallel versions used at run time; `volt::serial` holds plain
// reference loops with a different summation order, used by the tests as
// oracles and by the benchmark as the baseline.
//
// All parallel kernels partition work by output element, so every sum is
// accumulated by one thread in a fixed order and results do not depend on the
// thread count.

namespace volt {

// Token range [begin, end) of one scene inside a concatenated batch.
struct Segment {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

std::vector<Segment> segments_from_offsets(std::span<const std::size_t> offsets);

// Per-(segment, head) attention probabilities kept for the backward pass.
// probs[s * heads + h] is a len x len matrix for segment s.
template <typename T>
using AttentionProbs = std::vector<Matrix<T>>;

namespace kernels {

// Serial register-blocked product: C(i, j) += sum_p A(i, p) B(p, j) with
// A(i, p) = a[i * a_rs + p * a_cs], B(p, j) = b[p * ldb + j], C(i, j) = c[i * ldc + j].
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t a_rs, std::size_t a_cs,
          const T* b, std::size_t ldb, T* c, std::size_t ldc);

// C = A * B. A: m x k, B: k x n.
template <typename T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false);

// C = A^T * B. A: k x m, B: k x n.
template <typename T>
void matmul_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false);

// C = A * B^T. A: m x k, B: n x k.
template <typename T>
void matmul_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false);

template <typename T>
void add_row_bias(Matrix<T>& m, std::span<const T> bias);

// out[j] (+)= sum_i m(i, j)
template <typename T>
void column_sum(const Matrix<T>& m, std::span<T> out, bool accumulate = false);

// Multi-head softmax attention restricted to each segment. q, k, v and out
// are tokens x (heads * head_dim); logits are scale * q.k.
template <typename T>
void attention_forward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                       std::span<const Segment> segments, std::size_t heads, T scale,
                       Matrix<T>& out, AttentionProbs<T>* probs);

template <typename T>
void attention_backward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                        const AttentionProbs<T>& probs, std::span<const Segment> segments,
                        std::size_t heads, T scale, const Matrix<T>& d_out, Matrix<T>& d_q,
                        Matrix<T>& d_k, Matrix<T>& d_v);

} // namespace kernels

namespace serial {

template <typename T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false);
template <typename T>
void matmul_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false);
template <typename T>
void matmul_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false);

// Dense masked attention: materializes the full tokens x tokens logit matrix
// per head and masks cross-segment pairs with -inf.
template <typename T>
void attention_forward(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v,
                       std::span<const Segment> segments, std::size_t heads, T scale,
                       Matrix<T>& out);

} // namespace serial

} // namespace volt
