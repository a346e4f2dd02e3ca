#pragma once

#include <cstdint>
#include <span>

#include "volt/scene.hpp"
#include "volt/tensor.hpp"

namespace volt {

// Scalar loss with its gradient w.r.t. the input it was computed from.
template <typename T>
struct LossValue {
  double value = 0.0;
  Matrix<T> grad;
  bool all_ignored = false;
};

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits);

// dz = p * (dp - sum(p * dp)) per row.
template <typename T>
Matrix<T> softmax_backward(const Matrix<T>& probs, const Matrix<T>& d_probs);

// Mean over non-ignored rows of -sum_k t_k log softmax_k with
// t = (1 - eps) onehot + eps / K. All rows ignored -> 0 with all_ignored set.
template <typename T>
LossValue<T> ce_label_smooth(const Matrix<T>& logits, std::span<const std::int32_t> labels,
                             double smoothing, std::int32_t ignore = kIgnoreLabel);

// Lovasz-softmax over classes present in the labels. Gradient is w.r.t. probs.
template <typename T>
LossValue<T> lovasz_softmax(const Matrix<T>& probs, std::span<const std::int32_t> labels,
                            std::int32_t ignore = kIgnoreLabel);

struct SegLossConfig {
  double smoothing = 0.1;
  double ce_weight = 1.0;
  double lovasz_weight = 1.0;
};

// ce_weight * CE + lovasz_weight * Lovasz(softmax(logits)); gradient w.r.t. logits.
template <typename T>
LossValue<T> seg_loss(const Matrix<T>& logits, std::span<const std::int32_t> labels,
                      const SegLossConfig& cfg);

template <typename T>
struct DistillLossValue {
  double total = 0.0;
  double seg = 0.0;
  double distill = 0.0;
  Matrix<T> d_seg_logits;
  Matrix<T> d_distill_logits;
};

// (1 - w) L_seg(seg_logits, y_gt) + w L_seg(distill_logits, y_teacher).
// w = 0.5 gives the equal-weight joint objective; w = 0 is plain supervision.
template <typename T>
DistillLossValue<T> distill_loss(const Matrix<T>& seg_logits, const Matrix<T>& distill_logits,
                                 std::span<const std::int32_t> y_gt,
                                 std::span<const std::int32_t> y_teacher, double teacher_weight,
                                 const SegLossConfig& cfg);

} // namespace volt
