#include "volt/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "volt/error.hpp"

namespace volt {

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
  Matrix<T> p(logits.rows, logits.cols);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    auto z = logits.row(i);
    const T mx = *std::max_element(z.begin(), z.end());
    T sum = T(0);
    for (std::size_t k = 0; k < z.size(); ++k) {
      p(i, k) = std::exp(z[k] - mx);
      sum += p(i, k);
    }
    for (std::size_t k = 0; k < z.size(); ++k) p(i, k) /= sum;
  }
  return p;
}

template <typename T>
Matrix<T> softmax_backward(const Matrix<T>& probs, const Matrix<T>& d_probs) {
  Matrix<T> dz(probs.rows, probs.cols);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    T dot = T(0);
    for (std::size_t k = 0; k < probs.cols; ++k) dot += probs(i, k) * d_probs(i, k);
    for (std::size_t k = 0; k < probs.cols; ++k) dz(i, k) = probs(i, k) * (d_probs(i, k) - dot);
  }
  return dz;
}

namespace {

void check_labels(std::size_t rows, std::size_t classes, std::span<const std::int32_t> labels,
                  std::int32_t ignore) {
  if (labels.size() != rows) {
    throw ShapeError("loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  }
  for (auto y : labels) {
    if (y != ignore && (y < 0 || static_cast<std::size_t>(y) >= classes)) {
      throw InvalidInput("loss: label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

} // namespace

template <typename T>
LossValue<T> ce_label_smooth(const Matrix<T>& logits, std::span<const std::int32_t> labels,
                             double smoothing, std::int32_t ignore) {
  const std::size_t n = logits.rows, k = logits.cols;
  check_labels(n, k, labels, ignore);
  LossValue<T> out;
  out.grad.resize(n, k);
  std::size_t valid = 0;
  for (auto y : labels) valid += (y != ignore);
  if (valid == 0) {
    out.all_ignored = true;
    return out;
  }
  const double off = smoothing / static_cast<double>(k);
  const double on = 1.0 - smoothing + off;
  const double inv = 1.0 / static_cast<double>(valid);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == ignore) continue;
    auto z = logits.row(i);
    const double mx = static_cast<double>(*std::max_element(z.begin(), z.end()));
    double sum = 0.0;
    for (T v : z) sum += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t c = 0; c < k; ++c) {
      const double t = (static_cast<std::size_t>(labels[i]) == c) ? on : off;
      const double logp = static_cast<double>(z[c]) - lse;
      total -= t * logp;
      out.grad(i, c) = static_cast<T>((std::exp(logp) - t) * inv);
    }
  }
  out.value = total * inv;
  return out;
}

template <typename T>
LossValue<T> lovasz_softmax(const Matrix<T>& probs, std::span<const std::int32_t> labels,
                            std::int32_t ignore) {
  const std::size_t k = probs.cols;
  check_labels(probs.rows, k, labels, ignore);
  LossValue<T> out;
  out.grad.resize(probs.rows, k);

  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != ignore) rows.push_back(i);
  if (rows.empty()) {
    out.all_ignored = true;
    return out;
  }
  const std::size_t p = rows.size();

  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < k; ++c) {
    const bool any = std::any_of(rows.begin(), rows.end(),
                                 [&](std::size_t i) { return static_cast<std::size_t>(labels[i]) == c; });
    if (any) present.push_back(c);
  }

  std::vector<T> err(p);
  std::vector<std::size_t> order(p);
  std::vector<T> jac(p);
  double total = 0.0;
  const T inv_classes = T(1) / static_cast<T>(present.size());
  for (std::size_t c : present) {
    std::size_t gts = 0;
    for (std::size_t q = 0; q < p; ++q) {
      const std::size_t i = rows[q];
      const bool fg = static_cast<std::size_t>(labels[i]) == c;
      gts += fg;
      err[q] = fg ? T(1) - probs(i, c) : probs(i, c);
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return err[a] > err[b]; });

    // Jaccard loss of the top-(r+1) errors: 1 - |gt \ fn| / |gt u fp|.
    T cum_fg = T(0), cum_bg = T(0);
    for (std::size_t r = 0; r < p; ++r) {
      const std::size_t i = rows[order[r]];
      if (static_cast<std::size_t>(labels[i]) == c) cum_fg += T(1); else cum_bg += T(1);
      const T inter = static_cast<T>(gts) - cum_fg;
      const T uni = static_cast<T>(gts) + cum_bg;
      jac[r] = T(1) - inter / uni;
    }
    // sum_r e_r (J_r - J_{r-1}) rewritten as sum_r J_r (e_r - e_{r+1}).
    T loss_c = T(0);
    for (std::size_t r = 0; r < p; ++r) {
      const T next = r + 1 < p ? err[order[r + 1]] : T(0);
      loss_c += jac[r] * (err[order[r]] - next);
    }
    total += static_cast<double>(loss_c);

    for (std::size_t r = 0; r < p; ++r) {
      const std::size_t i = rows[order[r]];
      const T d_err = (jac[r] - (r > 0 ? jac[r - 1] : T(0))) * inv_classes;
      const bool fg = static_cast<std::size_t>(labels[i]) == c;
      out.grad(i, c) += fg ? -d_err : d_err;
    }
  }
  out.value = total / static_cast<double>(present.size());
  return out;
}

template <typename T>
LossValue<T> seg_loss(const Matrix<T>& logits, std::span<const std::int32_t> labels,
                      const SegLossConfig& cfg) {
  LossValue<T> out;
  out.grad.resize(logits.rows, logits.cols);
  if (cfg.ce_weight != 0.0) {
    auto ce = ce_label_smooth(logits, labels, cfg.smoothing);
    out.value += cfg.ce_weight * ce.value;
    out.all_ignored = ce.all_ignored;
    for (std::size_t i = 0; i < out.grad.size(); ++i)
      out.grad.data[i] += static_cast<T>(cfg.ce_weight) * ce.grad.data[i];
  }
  if (cfg.lovasz_weight != 0.0) {
    const Matrix<T> probs = softmax_rows(logits);
    auto lv = lovasz_softmax(probs, labels);
    out.value += cfg.lovasz_weight * lv.value;
    out.all_ignored = lv.all_ignored;
    const Matrix<T> dz = softmax_backward(probs, lv.grad);
    for (std::size_t i = 0; i < out.grad.size(); ++i)
      out.grad.data[i] += static_cast<T>(cfg.lovasz_weight) * dz.data[i];
  }
  return out;
}

template <typename T>
DistillLossValue<T> distill_loss(const Matrix<T>& seg_logits, const Matrix<T>& distill_logits,
                                 std::span<const std::int32_t> y_gt,
                                 std::span<const std::int32_t> y_teacher, double teacher_weight,
                                 const SegLossConfig& cfg) {
  if (y_gt.size() != y_teacher.size() || seg_logits.rows != distill_logits.rows) {
    throw ShapeError("distill_loss: ground truth and teacher labels differ in length");
  }
  if (teacher_weight < 0.0 || teacher_weight > 1.0) throw InvalidInput("teacher weight must be in [0, 1]");
  DistillLossValue<T> out;
  auto seg = seg_loss(seg_logits, y_gt, cfg);
  out.seg = seg.value;
  out.d_seg_logits = std::move(seg.grad);
  const T ws = static_cast<T>(1.0 - teacher_weight);
  for (auto& g : out.d_seg_logits.data) g *= ws;
  out.d_distill_logits.resize(distill_logits.rows, distill_logits.cols);
  if (teacher_weight > 0.0) {
    auto dis = seg_loss(distill_logits, y_teacher, cfg);
    out.distill = dis.value;
    out.d_distill_logits = std::move(dis.grad);
    for (auto& g : out.d_distill_logits.data) g *= static_cast<T>(teacher_weight);
  }
  out.total = (1.0 - teacher_weight) * out.seg + teacher_weight * out.distill;
  return out;
}

#define VOLT_INSTANTIATE_LOSSES(T)                                                                 \
  template Matrix<T> softmax_rows<T>(const Matrix<T>&);                                            \
  template Matrix<T> softmax_backward<T>(const Matrix<T>&, const Matrix<T>&);                      \
  template LossValue<T> ce_label_smooth<T>(const Matrix<T>&, std::span<const std::int32_t>,        \
                                           double, std::int32_t);                                  \
  template LossValue<T> lovasz_softmax<T>(const Matrix<T>&, std::span<const std::int32_t>,         \
                                          std::int32_t);                                           \
  template LossValue<T> seg_loss<T>(const Matrix<T>&, std::span<const std::int32_t>,               \
                                    const SegLossConfig&);                                         \
  template DistillLossValue<T> distill_loss<T>(const Matrix<T>&, const Matrix<T>&,                 \
                                               std::span<const std::int32_t>,                      \
                                               std::span<const std::int32_t>, double,              \
                                               const SegLossConfig&);

VOLT_INSTANTIATE_LOSSES(float)
VOLT_INSTANTIATE_LOSSES(double)

} // namespace volt
