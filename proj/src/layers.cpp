#include "volt/layers.hpp"

#include <cmath>
#include <numbers>

#include "volt/kernels.hpp"

namespace volt::layers {

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, std::span<const T> scale, std::span<const T> shift,
                     LayerNormCache<T>* cache) {
  if (scale.size() != x.cols || shift.size() != x.cols) throw ShapeError("layer_norm: width mismatch");
  const std::size_t n = x.rows, d = x.cols;
  Matrix<T> y(n, d);
  Matrix<T> local;
  Matrix<T>& xhat = cache ? cache->normalized : local;
  xhat.resize(n, d);
  std::vector<T> local_rstd;
  std::vector<T>& rstd = cache ? cache->rstd : local_rstd;
  rstd.assign(n, T(0));
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    auto r = x.row(i);
    T mean = T(0);
    for (T v : r) mean += v;
    mean /= static_cast<T>(d);
    T var = T(0);
    for (T v : r) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[i] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (r[j] - mean) * rs;
      y(i, j) = xhat(i, j) * scale[j] + shift[j];
    }
  }
  return y;
}

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const LayerNormCache<T>& cache,
                              std::span<const T> scale, std::span<T> d_scale, std::span<T> d_shift) {
  const Matrix<T>& xhat = cache.normalized;
  const std::size_t n = dy.rows, d = dy.cols;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      d_scale[j] += dy(i, j) * xhat(i, j);
      d_shift[j] += dy(i, j);
    }
  Matrix<T> dx(n, d);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    T mean_g = T(0), mean_gx = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T g = dy(i, j) * scale[j];
      mean_g += g;
      mean_gx += g * xhat(i, j);
    }
    mean_g /= static_cast<T>(d);
    mean_gx /= static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const T g = dy(i, j) * scale[j];
      dx(i, j) = cache.rstd[i] * (g - mean_g - xhat(i, j) * mean_gx);
    }
  }
  return dx;
}

template <typename T>
Matrix<T> linear(const Matrix<T>& x, const Param<T>& weight, const Param<T>& bias) {
  Matrix<T> y;
  kernels::matmul(x, weight.value, y);
  kernels::add_row_bias(y, std::span<const T>(bias.value.data));
  return y;
}

template <typename T>
Matrix<T> linear_backward(const Matrix<T>& x, const Matrix<T>& dy, Param<T>& weight,
                          Param<T>& bias, bool want_dx) {
  kernels::matmul_tn(x, dy, weight.grad, /*accumulate=*/true);
  kernels::column_sum(dy, std::span<T>(bias.grad.data), /*accumulate=*/true);
  Matrix<T> dx;
  if (want_dx) kernels::matmul_nt(dy, weight.value, dx);
  return dx;
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

#define VOLT_INSTANTIATE_LAYERS(T)                                                                 \
  template Matrix<T> layer_norm<T>(const Matrix<T>&, std::span<const T>, std::span<const T>,       \
                                   LayerNormCache<T>*);                                            \
  template Matrix<T> layer_norm_backward<T>(const Matrix<T>&, const LayerNormCache<T>&,            \
                                            std::span<const T>, std::span<T>, std::span<T>);       \
  template Matrix<T> linear<T>(const Matrix<T>&, const Param<T>&, const Param<T>&);                \
  template Matrix<T> linear_backward<T>(const Matrix<T>&, const Matrix<T>&, Param<T>&, Param<T>&,  \
                                        bool);                                                     \
  template T gelu<T>(T);                                                                           \
  template T gelu_grad<T>(T);

VOLT_INSTANTIATE_LAYERS(float)
VOLT_INSTANTIATE_LAYERS(double)

} // namespace volt::layers
