// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "protoseg/autograd.hpp"
#include "protoseg/data.hpp"

namespace protoseg {

struct LossConfig {
  double ce_weight = 0.5;
  double dice_weight = 0.3;
  double focal_weight = 0.2;
  double focal_gamma = 2.0;
  double dice_smooth = 1.0;
  double reg_weight = 0.01;
  bool bidirectional = true;

  void validate() const;
};

struct LossBreakdown {
  double query = 0.0;
  double support = 0.0;
  double proto = 0.0;
  double ce = 0.0;
  double dice = 0.0;
  double focal = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

/// Differentiable total plus the scalar value of every term.
struct LossResult {
  Var total;
  LossBreakdown breakdown;
};

/// Probabilities below this are clamped inside the logarithm.
inline constexpr double kLogClamp = 1e-12;

/// Per-pixel -log(max(p_true, 1e-12)) as (n, h, w, 1). Probabilities are
/// (n, h, w, classes); one mask per image with labels < classes.
Var pixel_nll(const Var& probabilities, const std::vector<SegMask>& labels);
/// Per-pixel (1 - p_true)^gamma * -log(max(p_true, 1e-12)) as (n, h, w, 1).
Var pixel_focal(const Var& probabilities, const std::vector<SegMask>& labels, double gamma);

/// Mean cross-entropy over every query image and pixel.
Var query_loss(const Var& probabilities, const std::vector<SegMask>& labels);
/// Mean cross-entropy over the n * k support images and their pixels.
Var support_loss(const Var& probabilities, const std::vector<SegMask>& labels, int n, int k);
/// query + support when bidirectional, query otherwise.
double proto_loss(double query, double support, const LossConfig& config);
/// 1 - mean over classes of (2 sum p g + s) / (sum p + sum g + s).
Var dice_loss(const Var& probabilities, const std::vector<SegMask>& labels, double smooth);
Var focal_loss(const Var& probabilities, const std::vector<SegMask>& labels, double gamma);

/// ce_weight * CE + dice_weight * Dice + focal_weight * focal.
LossResult pretrain_loss(const Var& probabilities, const std::vector<SegMask>& labels, const LossConfig& config);

/// proto + reg_weight * ||head||^2. `support` may be undefined when the
/// reversed direction was not computed.
LossResult finetune_loss(const Var& query, const Var& support, const ParameterList& head_parameters,
                         const LossConfig& config);

}  // namespace protoseg
