#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <vector>

#include "dsspn/hierarchy.hpp"
#include "dsspn/tensor.hpp"

namespace dsspn {

struct SegmentationMetrics {
  double mean_iou{0.0};
  double pixel_acc{0.0};
  double class_average_acc{0.0};
  std::map<int, double> per_class_iou;  // classes with at least one GT pixel
};

// K x K confusion matrix over a fixed list of label ids; rows are ground
// truth, columns predictions.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(std::vector<int> label_ids) : ids_{std::move(label_ids)} {
    std::sort(ids_.begin(), ids_.end());
    if (std::adjacent_find(ids_.begin(), ids_.end()) != ids_.end()) throw ValidationError("metrics: duplicate label id");
    confusion_.assign(ids_.size() * ids_.size(), 0);
  }
  explicit MetricAccumulator(const DatasetBinding& binding) : MetricAccumulator(binding.label_ids()) {}

  std::size_t num_classes() const { return ids_.size(); }
  const std::vector<int>& label_ids() const { return ids_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return confusion_[gt * ids_.size() + pred]; }
  std::uint64_t total() const { return total_; }

  void accumulate(const LabelMap& pred, const LabelMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
      throw ShapeError(str_cat("metrics: prediction ", pred.height, "x", pred.width, " vs ground truth ", gt.height, "x", gt.width));
    }
    std::vector<std::pair<std::size_t, std::size_t>> cells;
    cells.reserve(gt.size());
    for (std::size_t p = 0; p < gt.size(); ++p) {
      if (gt.values[p] == LabelMap::kIgnore) continue;
      cells.emplace_back(index(gt.values[p]), index(pred.values[p]));
    }
    // Validate everything before touching the counts.
    for (const auto& [g, q] : cells) ++confusion_[g * ids_.size() + q];
    total_ += cells.size();
  }

  void merge(const MetricAccumulator& other) {
    if (other.ids_ != ids_) throw ValidationError("metrics: cannot merge accumulators over different labels");
    for (std::size_t i = 0; i < confusion_.size(); ++i) confusion_[i] += other.confusion_[i];
    total_ += other.total_;
  }

  SegmentationMetrics metrics() const {
    if (total_ == 0) throw ValidationError("metrics: no pixels accumulated");
    const std::size_t k = ids_.size();
    SegmentationMetrics m;
    std::uint64_t trace = 0;
    double iou_sum = 0.0, acc_sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < k; ++c) {
      std::uint64_t gt = 0, pr = 0;
      for (std::size_t j = 0; j < k; ++j) {
        gt += at(c, j);
        pr += at(j, c);
      }
      const std::uint64_t tp = at(c, c);
      trace += tp;
      if (gt == 0) continue;
      const double iou = static_cast<double>(tp) / static_cast<double>(gt + pr - tp);
      m.per_class_iou[ids_[c]] = iou;
      iou_sum += iou;
      acc_sum += static_cast<double>(tp) / static_cast<double>(gt);
      ++present;
    }
    m.mean_iou = iou_sum / static_cast<double>(present);
    m.class_average_acc = acc_sum / static_cast<double>(present);
    m.pixel_acc = static_cast<double>(trace) / static_cast<double>(total_);
    return m;
  }

 private:
  std::size_t index(int label) const {
    auto it = std::lower_bound(ids_.begin(), ids_.end(), label);
    if (it == ids_.end() || *it != label) throw BindingError(str_cat("metrics: label ", label, " is not bound"));
    return static_cast<std::size_t>(it - ids_.begin());
  }

  std::vector<int> ids_;
  std::vector<std::uint64_t> confusion_;
  std::uint64_t total_{0};
};

}  // namespace dsspn
