// SPDX-License-Identifier: Apache-2.0
#include "protoseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "protoseg/error.hpp"

namespace protoseg {

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
  PROTOSEG_REQUIRE(num_classes >= 1, "confusion matrix needs at least one class");
  counts_.assign(static_cast<std::size_t>(k_) * k_, 0);
}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

std::uint64_t ConfusionMatrix::row_sum(int truth) const {
  std::uint64_t s = 0;
  for (int p = 0; p < k_; ++p) s += at(truth, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(int predicted) const {
  std::uint64_t s = 0;
  for (int t = 0; t < k_; ++t) s += at(t, predicted);
  return s;
}

void ConfusionMatrix::add(const SegMask& prediction, const SegMask& ground_truth) {
  PROTOSEG_REQUIRE(prediction.height == ground_truth.height && prediction.width == ground_truth.width,
                   "confusion_matrix: prediction and ground truth differ in shape");
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const int p = prediction.labels[i], g = ground_truth.labels[i];
    PROTOSEG_REQUIRE(p >= 0 && p < k_ && g >= 0 && g < k_,
                     "confusion_matrix: label outside 0.." + std::to_string(k_ - 1));
    ++at(g, p);
  }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  PROTOSEG_REQUIRE(other.k_ == k_, "cannot merge confusion matrices of different class counts");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

ConfusionMatrix confusion_matrix(const SegMask& prediction, const SegMask& ground_truth, int num_classes) {
  ConfusionMatrix cm(num_classes);
  cm.add(prediction, ground_truth);
  return cm;
}

const std::array<std::string, MetricReport::kColumns>& MetricReport::keys() {
  static const std::array<std::string, kColumns> k{"f1_with_bg", "f1_no_bg",     "miou_with_bg", "miou_no_bg",
                                                   "balanced_acc", "mcc", "fw_iou"};
  return k;
}

const std::array<std::string, MetricReport::kColumns>& MetricReport::labels() {
  static const std::array<std::string, kColumns> l{"F1 w/bg", "F1 w/o", "mIoU w/bg", "mIoU w/o",
                                                   "Bal. Acc.", "MCC", "FW IoU"};
  return l;
}

std::array<double, MetricReport::kColumns> MetricReport::values() const {
  return {f1_with_bg, f1_no_bg, miou_with_bg, miou_no_bg, balanced_acc, mcc, fw_iou};
}

MetricReport MetricReport::from_values(const std::array<double, kColumns>& v) {
  MetricReport r;
  r.f1_with_bg = v[0];
  r.f1_no_bg = v[1];
  r.miou_with_bg = v[2];
  r.miou_no_bg = v[3];
  r.balanced_acc = v[4];
  r.mcc = v[5];
  r.fw_iou = v[6];
  return r;
}

MetricReport compute_metrics(const ConfusionMatrix& cm, int background_id) {
  const int k = cm.num_classes();
  const double total = static_cast<double>(cm.total());
  PROTOSEG_REQUIRE(total > 0, "compute_metrics: confusion matrix is empty");

  MetricReport r;
  double f1_all = 0, f1_fg = 0, iou_all = 0, iou_fg = 0, recall_sum = 0, fw = 0;
  int n_all = 0, n_fg = 0, n_recall = 0;
  for (int c = 0; c < k; ++c) {
    const double tp = static_cast<double>(cm.at(c, c));
    const double t = static_cast<double>(cm.row_sum(c));
    const double p = static_cast<double>(cm.col_sum(c));
    const double fn = t - tp, fp = p - tp;
    if (tp + fp + fn == 0) {
      ++r.excluded_classes;
      continue;
    }
    double f1 = 0.0;
    if (p > 0 && t > 0) {
      const double precision = tp / p, recall = tp / t;
      f1 = precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    }
    const double iou = tp / (tp + fp + fn);
    f1_all += f1;
    iou_all += iou;
    ++n_all;
    if (c != background_id) {
      f1_fg += f1;
      iou_fg += iou;
      ++n_fg;
    }
    if (t > 0) {
      recall_sum += tp / t;
      ++n_recall;
      fw += t / total * iou;
    }
  }
  r.f1_with_bg = f1_all / n_all;
  r.miou_with_bg = iou_all / n_all;
  r.f1_no_bg = n_fg > 0 ? f1_fg / n_fg : 1.0;
  r.miou_no_bg = n_fg > 0 ? iou_fg / n_fg : 1.0;
  r.balanced_acc = recall_sum / n_recall;
  r.fw_iou = fw;

  double trace = 0, sum_pt = 0, sum_p2 = 0, sum_t2 = 0;
  bool diagonal = true;
  for (int c = 0; c < k; ++c) {
    trace += static_cast<double>(cm.at(c, c));
    const double p = static_cast<double>(cm.col_sum(c)), t = static_cast<double>(cm.row_sum(c));
    sum_pt += p * t;
    sum_p2 += p * p;
    sum_t2 += t * t;
    for (int j = 0; j < k; ++j)
      if (j != c && cm.at(c, j) != 0) diagonal = false;
  }
  const double den = std::sqrt((total * total - sum_p2) * (total * total - sum_t2));
  r.mcc = den > 0 ? (trace * total - sum_pt) / den : (diagonal ? 1.0 : 0.0);
  r.mcc = std::clamp(r.mcc, -1.0, 1.0);
  return r;
}

MetricSummary summarize(const std::vector<MetricReport>& reports) {
  MetricSummary s;
  s.episodes = static_cast<int>(reports.size());
  if (reports.empty()) return s;
  std::array<double, MetricReport::kColumns> mean{}, var{};
  for (const auto& r : reports) {
    auto v = r.values();
    for (std::size_t i = 0; i < v.size(); ++i) mean[i] += v[i] / reports.size();
  }
  for (const auto& r : reports) {
    auto v = r.values();
    for (std::size_t i = 0; i < v.size(); ++i) var[i] += (v[i] - mean[i]) * (v[i] - mean[i]) / reports.size();
  }
  for (double& v : var) v = std::sqrt(v);
  s.mean = MetricReport::from_values(mean);
  s.stddev = MetricReport::from_values(var);
  for (const auto& r : reports) s.mean.excluded_classes += r.excluded_classes;
  return s;
}

nlohmann::ordered_json to_json(const MetricReport& report) {
  nlohmann::ordered_json j;
  const auto v = report.values();
  for (std::size_t i = 0; i < v.size(); ++i) j[MetricReport::keys()[i]] = v[i];
  j["excluded_classes"] = report.excluded_classes;
  return j;
}

MetricReport metric_report_from_json(const nlohmann::json& j) {
  std::array<double, MetricReport::kColumns> v{};
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto& key = MetricReport::keys()[i];
    PROTOSEG_REQUIRE(j.contains(key) && j[key].is_number(), "metric report lacks numeric field " + key);
    v[i] = j[key].get<double>();
  }
  MetricReport r = MetricReport::from_values(v);
  r.excluded_classes = j.value("excluded_classes", 0);
  return r;
}

std::string csv_header() {
  std::string out;
  for (const auto& k : MetricReport::keys()) out += (out.empty() ? "" : ",") + k;
  return out;
}

std::string csv_row(const MetricReport& report) {
  std::ostringstream out;
  out.precision(17);
  bool first = true;
  for (double v : report.values()) {
    out << (first ? "" : ",") << v;
    first = false;
  }
  return out.str();
}

}  // namespace protoseg
