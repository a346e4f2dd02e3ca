#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "volt/scene.hpp"

namespace volt {

// K x K counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
public:
  explicit ConfusionMatrix(std::size_t classes);

  // Rows whose ground truth equals `ignore` are skipped.
  void add(std::span<const std::int32_t> gt, std::span<const std::int32_t> pred,
           std::int32_t ignore = kIgnoreLabel);
  void add(std::size_t gt, std::size_t pred, std::uint64_t count = 1);

  std::size_t classes() const { return k_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * k_ + pred]; }
  std::uint64_t total() const;
  double accuracy() const;

private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct MiouReport {
  double miou = 0.0;
  std::vector<double> iou;    // NaN for excluded classes
  std::vector<bool> included; // false when tp + fp + fn == 0
  double accuracy = 0.0;
};

// IoU_c = tp / (tp + fp + fn); classes with an empty union are left out of the mean.
MiouReport miou(const ConfusionMatrix& cm);

} // namespace volt
