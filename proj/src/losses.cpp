// SPDX-License-Identifier: Apache-2.0
#include "protoseg/losses.hpp"

#include <cmath>

#include "protoseg/error.hpp"
#include "protoseg/ops.hpp"

namespace protoseg {

void LossConfig::validate() const {
  PROTOSEG_REQUIRE(ce_weight >= 0 && dice_weight >= 0 && focal_weight >= 0 && reg_weight >= 0,
                   "loss weights must be >= 0");
  PROTOSEG_REQUIRE(ce_weight + dice_weight + focal_weight > 0, "pretraining loss weights must not all be 0");
  PROTOSEG_REQUIRE(focal_gamma >= 0, "focal gamma must be >= 0");
  PROTOSEG_REQUIRE(dice_smooth >= 0, "dice smoothing must be >= 0");
}

namespace {

using detail::Node;

// Flat index of the true-class probability for every pixel.
std::vector<std::size_t> true_class_offsets(const Shape& s, const std::vector<SegMask>& labels) {
  PROTOSEG_REQUIRE(static_cast<int>(labels.size()) == s.n, "loss: " + std::to_string(labels.size()) +
                                                               " masks for " + std::to_string(s.n) +
                                                               " probability maps");
  std::vector<std::size_t> out;
  out.reserve(s.rows());
  for (int n = 0; n < s.n; ++n) {
    const SegMask& m = labels[n];
    PROTOSEG_REQUIRE(m.height == s.h && m.width == s.w, "loss: mask is " + std::to_string(m.height) + "x" +
                                                            std::to_string(m.width) + ", probabilities " +
                                                            std::to_string(s.h) + "x" + std::to_string(s.w));
    for (int label : m.labels) {
      PROTOSEG_REQUIRE(label >= 0 && label < s.c, "loss: label " + std::to_string(label) +
                                                      " outside the " + std::to_string(s.c) + " predicted classes");
      out.push_back(out.size() * s.c + label);
    }
  }
  return out;
}

Var pixel_term(const Var& probabilities, const std::vector<SegMask>& labels, double gamma) {
  const Shape& s = probabilities.shape();
  auto offsets = true_class_offsets(s, labels);
  const Tensor& p = probabilities.value();
  Tensor out(Shape{s.n, s.h, s.w, 1});
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    const double pt = p[offsets[i]];
    const double nll = -std::log(std::max(pt, kLogClamp));
    out[i] = gamma == 0.0 ? nll : std::pow(1.0 - pt, gamma) * nll;
  }
  return Var::make(std::move(out), {probabilities}, [offsets = std::move(offsets), gamma](Node& self) {
    Node& parent = *self.parents[0];
    const Tensor& p = parent.value;
    Tensor& g = parent.ensure_grad();
    for (std::size_t i = 0; i < offsets.size(); ++i) {
      const double pt = p[offsets[i]];
      const bool clamped = pt <= kLogClamp;
      const double nll = -std::log(std::max(pt, kLogClamp));
      const double dnll = clamped ? 0.0 : -1.0 / pt;
      double d = dnll;
      if (gamma != 0.0) {
        const double w = std::pow(1.0 - pt, gamma);
        const double dw = -gamma * std::pow(1.0 - pt, gamma - 1.0);
        d = dw * nll + w * dnll;
      }
      g[offsets[i]] += self.grad[i] * d;
    }
  });
}

}  // namespace

Var pixel_nll(const Var& probabilities, const std::vector<SegMask>& labels) {
  return pixel_term(probabilities, labels, 0.0);
}

Var pixel_focal(const Var& probabilities, const std::vector<SegMask>& labels, double gamma) {
  PROTOSEG_REQUIRE(gamma >= 0.0, "focal gamma must be >= 0");
  return pixel_term(probabilities, labels, gamma);
}

Var query_loss(const Var& probabilities, const std::vector<SegMask>& labels) {
  return ops::mean(pixel_nll(probabilities, labels));
}

Var support_loss(const Var& probabilities, const std::vector<SegMask>& labels, int n, int k) {
  PROTOSEG_REQUIRE(probabilities.shape().n == n * k, "support_loss expects n * k = " + std::to_string(n * k) +
                                                         " images, got " + std::to_string(probabilities.shape().n));
  return ops::mean(pixel_nll(probabilities, labels));
}

double proto_loss(double query, double support, const LossConfig& config) {
  return config.bidirectional ? query + support : query;
}

Var dice_loss(const Var& probabilities, const std::vector<SegMask>& labels, double smooth) {
  PROTOSEG_REQUIRE(smooth >= 0.0, "dice smoothing must be >= 0");
  const Shape& s = probabilities.shape();
  auto offsets = true_class_offsets(s, labels);
  const Tensor& p = probabilities.value();
  const int classes = s.c;
  std::vector<double> inter(classes, 0.0), psum(classes, 0.0), gsum(classes, 0.0);
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    for (int c = 0; c < classes; ++c) psum[c] += p[i * classes + c];
    const int label = static_cast<int>(offsets[i] - i * classes);
    inter[label] += p[offsets[i]];
    gsum[label] += 1.0;
  }
  double mean_score = 0.0;
  for (int c = 0; c < classes; ++c) {
    const double den = psum[c] + gsum[c] + smooth;
    PROTOSEG_REQUIRE(den > 0.0, "dice_loss: class " + std::to_string(c) + " is empty with zero smoothing");
    mean_score += (2.0 * inter[c] + smooth) / den / classes;
  }
  return Var::make(Tensor(Shape{1, 1, 1, 1}, 1.0 - mean_score), {probabilities},
                   [offsets = std::move(offsets), inter, psum, gsum, smooth, classes](Node& self) {
                     Tensor& g = self.parents[0]->ensure_grad();
                     const double up = self.grad[0];
                     for (std::size_t i = 0; i < offsets.size(); ++i) {
                       const int label = static_cast<int>(offsets[i] - i * classes);
                       for (int c = 0; c < classes; ++c) {
                         const double den = psum[c] + gsum[c] + smooth;
                         const double num = 2.0 * inter[c] + smooth;
                         const double gi = c == label ? 1.0 : 0.0;
                         g[i * classes + c] -= up * (2.0 * gi * den - num) / (den * den) / classes;
                       }
                     }
                   });
}

Var focal_loss(const Var& probabilities, const std::vector<SegMask>& labels, double gamma) {
  return ops::mean(pixel_focal(probabilities, labels, gamma));
}

LossResult pretrain_loss(const Var& probabilities, const std::vector<SegMask>& labels, const LossConfig& config) {
  config.validate();
  Var ce = query_loss(probabilities, labels);
  Var dice = dice_loss(probabilities, labels, config.dice_smooth);
  Var focal = focal_loss(probabilities, labels, config.focal_gamma);
  LossResult r;
  r.total = ops::add(ops::add(ops::scale(ce, config.ce_weight), ops::scale(dice, config.dice_weight)),
                     ops::scale(focal, config.focal_weight));
  r.breakdown.ce = ce.value()[0];
  r.breakdown.dice = dice.value()[0];
  r.breakdown.focal = focal.value()[0];
  r.breakdown.total = r.total.value()[0];
  return r;
}

LossResult finetune_loss(const Var& query, const Var& support, const ParameterList& head_parameters,
                         const LossConfig& config) {
  config.validate();
  LossResult r;
  r.breakdown.query = query.value()[0];
  Var proto = query;
  if (config.bidirectional) {
    PROTOSEG_REQUIRE(support.defined(), "bidirectional fine-tuning needs the support loss");
    r.breakdown.support = support.value()[0];
    proto = ops::add(query, support);
  }
  r.breakdown.proto = proto.value()[0];
  r.total = proto;
  if (!head_parameters.empty()) {
    std::vector<Var> leaves;
    for (const auto& p : head_parameters) leaves.push_back(p.var);
    Var reg = ops::sum_squares(leaves);
    r.breakdown.reg = reg.value()[0];
    if (config.reg_weight != 0.0) r.total = ops::add(proto, ops::scale(reg, config.reg_weight));
  }
  r.breakdown.total = r.total.value()[0];
  return r;
}

}  // namespace protoseg
