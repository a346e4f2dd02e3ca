#pragma once

#include <span>
#include <vector>

#include "volt/params.hpp"
#include "volt/tensor.hpp"

// Small differentiable pieces shared by the encoder, decoder and teacher.
namespace volt::layers {

inline constexpr double kLayerNormEps = 1e-6;

template <typename T>
struct LayerNormCache {
  Matrix<T> normalized; // (x - mean) * rstd
  std::vector<T> rstd;
};

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, std::span<const T> scale, std::span<const T> shift,
                     LayerNormCache<T>* cache);

// Returns dx; accumulates d_scale / d_shift.
template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const LayerNormCache<T>& cache,
                              std::span<const T> scale, std::span<T> d_scale, std::span<T> d_shift);

// y = x W + b
template <typename T>
Matrix<T> linear(const Matrix<T>& x, const Param<T>& weight, const Param<T>& bias);

// Accumulates weight/bias grads, returns dx when `want_dx`.
template <typename T>
Matrix<T> linear_backward(const Matrix<T>& x, const Matrix<T>& dy, Param<T>& weight,
                          Param<T>& bias, bool want_dx = true);

// Exact erf-based GELU.
template <typename T>
T gelu(T x);
template <typename T>
T gelu_grad(T x);

} // namespace volt::layers
