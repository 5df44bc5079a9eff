// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "protoseg/data.hpp"

namespace protoseg {

/// K x K pixel counts; rows are ground truth, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 2);

  int num_classes() const { return k_; }
  std::uint64_t at(int truth, int predicted) const { return counts_[static_cast<std::size_t>(truth) * k_ + predicted]; }
  std::uint64_t& at(int truth, int predicted) { return counts_[static_cast<std::size_t>(truth) * k_ + predicted]; }
  std::uint64_t total() const;
  std::uint64_t row_sum(int truth) const;
  std::uint64_t col_sum(int predicted) const;

  /// Counts one prediction/ground-truth pair of equal shape.
  void add(const SegMask& prediction, const SegMask& ground_truth);
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int k_;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion_matrix(const SegMask& prediction, const SegMask& ground_truth, int num_classes);

struct MetricReport {
  double f1_with_bg = 0.0;
  double f1_no_bg = 0.0;
  double miou_with_bg = 0.0;
  double miou_no_bg = 0.0;
  double balanced_acc = 0.0;
  double mcc = 0.0;
  double fw_iou = 0.0;
  /// Classes left out of macro averages because they never occur.
  int excluded_classes = 0;

  static constexpr std::size_t kColumns = 7;
  /// Field names in table column order.
  static const std::array<std::string, kColumns>& keys();
  /// Table headers: "F1 w/bg", "F1 w/o", ...
  static const std::array<std::string, kColumns>& labels();
  std::array<double, kColumns> values() const;
  static MetricReport from_values(const std::array<double, kColumns>& v);
};

/// Per-class precision/recall/F1/IoU folded into the report. Classes with no
/// ground truth and no prediction are excluded; a class with a zero
/// precision or recall denominator scores F1 = 0. Balanced accuracy averages
/// recall over classes present in the ground truth. MCC is the multiclass
/// covariance form; when its denominator vanishes it is 1 for a diagonal
/// matrix and 0 otherwise. An empty foreground set scores 1.
MetricReport compute_metrics(const ConfusionMatrix& cm, int background_id = 0);

struct MetricSummary {
  MetricReport mean;
  MetricReport stddev;
  int episodes = 0;
};

/// Mean and population standard deviation of each field.
MetricSummary summarize(const std::vector<MetricReport>& reports);

/// Object with the seven fields in column order plus excluded_classes.
nlohmann::ordered_json to_json(const MetricReport& report);
MetricReport metric_report_from_json(const nlohmann::json& j);

std::string csv_header();
std::string csv_row(const MetricReport& report);

}  // namespace protoseg
