#include "volt/metrics.hpp"

#include <limits>
#include <numeric>
#include <string>

#include "volt/error.hpp"

namespace volt {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw InvalidInput("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(std::span<const std::int32_t> gt, std::span<const std::int32_t> pred,
                          std::int32_t ignore) {
  if (gt.size() != pred.size()) {
    throw ShapeError("confusion: " + std::to_string(gt.size()) + " labels vs " +
                     std::to_string(pred.size()) + " predictions");
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore) continue;
    if (gt[i] < 0 || pred[i] < 0) throw InvalidInput("confusion: negative class id");
    add(static_cast<std::size_t>(gt[i]), static_cast<std::size_t>(pred[i]));
  }
}

void ConfusionMatrix::add(std::size_t gt, std::size_t pred, std::uint64_t count) {
  if (gt >= k_ || pred >= k_) {
    throw InvalidInput("confusion: class id outside [0, " + std::to_string(k_) + ")");
  }
  counts_[gt * k_ + pred] += count;
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

double ConfusionMatrix::accuracy() const {
  const std::uint64_t n = total();
  if (n == 0) return 0.0;
  std::uint64_t tp = 0;
  for (std::size_t c = 0; c < k_; ++c) tp += at(c, c);
  return static_cast<double>(tp) / static_cast<double>(n);
}

MiouReport miou(const ConfusionMatrix& cm) {
  const std::size_t k = cm.classes();
  MiouReport r;
  r.iou.assign(k, std::numeric_limits<double>::quiet_NaN());
  r.included.assign(k, false);
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t uni = row + col - tp;
    if (uni == 0) continue;
    r.iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
    r.included[c] = true;
    sum += r.iou[c];
    ++used;
  }
  r.miou = used ? sum / static_cast<double>(used) : 0.0;
  r.accuracy = cm.accuracy();
  return r;
}

} // namespace volt
