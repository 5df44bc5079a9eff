// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "protoseg/error.hpp"
#include "protoseg/gradcheck.hpp"
#include "protoseg/losses.hpp"
#include "protoseg/ops.hpp"
#include "test_util.hpp"

namespace protoseg {
namespace {

using testing::random_tensor;

// Random simplex maps via softmax of random logits.
Tensor random_probs(Shape s, std::uint64_t seed, double spread = 2.0) {
  NoGradGuard g;
  return ops::softmax(Var(random_tensor(s, seed, -spread, spread)), 3).value();
}

std::vector<SegMask> random_labels(int n, int h, int w, int classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SegMask> out;
  for (int i = 0; i < n; ++i) {
    SegMask m(h, w);
    for (auto& v : m.labels) v = static_cast<int>(rng() % classes);
    out.push_back(m);
  }
  return out;
}

Tensor one_hot(const std::vector<SegMask>& labels, int classes) {
  const auto& m0 = labels.front();
  Tensor t(Shape{static_cast<int>(labels.size()), m0.height, m0.width, classes});
  for (std::size_t n = 0; n < labels.size(); ++n)
    for (int y = 0; y < m0.height; ++y)
      for (int x = 0; x < m0.width; ++x) t.at(static_cast<int>(n), y, x, labels[n].at(y, x)) = 1.0;
  return t;
}

double ce_oracle(const Tensor& p, const std::vector<SegMask>& labels) {
  double total = 0.0;
  int count = 0;
  for (int n = 0; n < p.shape().n; ++n)
    for (int y = 0; y < p.shape().h; ++y)
      for (int x = 0; x < p.shape().w; ++x) {
        total -= std::log(std::max(p.at(n, y, x, labels[n].at(y, x)), 1e-12));
        ++count;
      }
  return total / count;
}

double value(const Var& v) { return v.value()[0]; }

TEST(QueryLoss, PerfectPredictionIsZero) {
  auto labels = random_labels(2, 3, 3, 3, 1);
  EXPECT_LE(value(query_loss(Var(one_hot(labels, 3)), labels)), 1e-11);
}

TEST(QueryLoss, UniformTwoClassIsLn2) {
  auto labels = random_labels(1, 4, 4, 2, 2);
  EXPECT_NEAR(value(query_loss(Var(Tensor(Shape{1, 4, 4, 2}, 0.5)), labels)), std::log(2.0), 1e-15);
}

TEST(QueryLoss, MatchesTripleLoopOracle) {
  for (int trial = 0; trial < 20; ++trial) {
    Tensor p = random_probs({2, 3, 3, 4}, 10 + trial);
    auto labels = random_labels(2, 3, 3, 4, 40 + trial);
    EXPECT_NEAR(value(query_loss(Var(p), labels)), ce_oracle(p, labels), 1e-9);
  }
}

TEST(QueryLoss, HardZeroStaysFinite) {
  auto labels = random_labels(1, 2, 2, 2, 3);
  Tensor p = one_hot(labels, 2);
  for (auto& v : p.storage()) v = 1.0 - v;
  const double l = value(query_loss(Var(p), labels));
  EXPECT_NEAR(l, -std::log(1e-12), 1e-9);
}

TEST(QueryLoss, LabelBeyondClassesIsContractError) {
  std::vector<SegMask> labels{SegMask(2, 2, 3)};
  EXPECT_THROW(query_loss(Var(Tensor(Shape{1, 2, 2, 3}, 1.0 / 3)), labels), ContractError);
}

TEST(SupportLoss, UniformThreeClassIsLn3) {
  auto labels = random_labels(4, 3, 3, 3, 4);
  EXPECT_NEAR(value(support_loss(Var(Tensor(Shape{4, 3, 3, 3}, 1.0 / 3)), labels, 2, 2)), std::log(3.0), 1e-15);
}

TEST(SupportLoss, EqualsQueryLossWhenCountsCoincide) {
  Tensor p = random_probs({2, 3, 3, 3}, 5);
  auto labels = random_labels(2, 3, 3, 3, 6);
  EXPECT_EQ(value(support_loss(Var(p), labels, 2, 1)), value(query_loss(Var(p), labels)));
  EXPECT_NEAR(value(support_loss(Var(p), labels, 2, 1)), ce_oracle(p, labels), 1e-9);
  EXPECT_THROW(support_loss(Var(p), labels, 2, 2), ContractError);
}

TEST(ProtoLoss, SumsOrPassesQueryThrough) {
  LossConfig bi, uni;
  uni.bidirectional = false;
  EXPECT_DOUBLE_EQ(proto_loss(0.3, 0.4, bi), 0.7);
  EXPECT_EQ(proto_loss(0.3, 123.0, uni), 0.3);
  EXPECT_EQ(proto_loss(0.0, 0.0, bi), 0.0);
}

TEST(DiceLoss, PerfectPredictionIsExactlyZero) {
  auto labels = random_labels(2, 4, 4, 3, 7);
  EXPECT_EQ(value(dice_loss(Var(one_hot(labels, 3)), labels, 1.0)), 0.0);
}

TEST(DiceLoss, HalfAgreementOnBalancedMask) {
  // 8 pixels, 4 of each class; the prediction swaps two of each.
  SegMask gt(2, 4);
  gt.labels = {0, 0, 0, 0, 1, 1, 1, 1};
  SegMask pred(2, 4);
  pred.labels = {0, 0, 1, 1, 1, 1, 0, 0};
  EXPECT_NEAR(value(dice_loss(Var(one_hot({pred}, 2)), {gt}, 0.0)), 0.5, 1e-15);
  SegMask flip = gt;
  for (auto& v : flip.labels) v = 1 - v;
  EXPECT_NEAR(value(dice_loss(Var(one_hot({flip}, 2)), {gt}, 0.0)), 1.0, 1e-15);
}

TEST(DiceLoss, MatchesLoopOracle) {
  Tensor p = random_probs({2, 3, 3, 3}, 8);
  auto labels = random_labels(2, 3, 3, 3, 9);
  double score = 0.0;
  for (int c = 0; c < 3; ++c) {
    double inter = 0.0, ps = 0.0, gs = 0.0;
    for (int n = 0; n < 2; ++n)
      for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) {
          const double g = labels[n].at(y, x) == c ? 1.0 : 0.0;
          inter += p.at(n, y, x, c) * g;
          ps += p.at(n, y, x, c);
          gs += g;
        }
    score += (2.0 * inter + 1.0) / (ps + gs + 1.0);
  }
  EXPECT_NEAR(value(dice_loss(Var(p), labels, 1.0)), 1.0 - score / 3.0, 1e-12);
}

TEST(FocalLoss, ScalarCases) {
  auto labels = random_labels(1, 3, 3, 2, 11);
  EXPECT_EQ(value(focal_loss(Var(one_hot(labels, 2)), labels, 2.0)), 0.0);
  EXPECT_NEAR(value(focal_loss(Var(Tensor(Shape{1, 3, 3, 2}, 0.5)), labels, 2.0)), 0.25 * std::log(2.0), 1e-15);
  Tensor p = random_probs({1, 3, 3, 2}, 12);
  EXPECT_EQ(value(focal_loss(Var(p), labels, 0.0)), value(query_loss(Var(p), labels)));
}

TEST(PretrainLoss, WeightedSumOfComponents) {
  Tensor p = random_probs({2, 3, 3, 3}, 13);
  auto labels = random_labels(2, 3, 3, 3, 14);
  LossConfig cfg;
  LossResult r = pretrain_loss(Var(p), labels, cfg);
  EXPECT_NEAR(r.breakdown.total, 0.5 * r.breakdown.ce + 0.3 * r.breakdown.dice + 0.2 * r.breakdown.focal, 1e-15);
  EXPECT_EQ(r.breakdown.ce, value(query_loss(Var(p), labels)));
  LossConfig ce_only;
  ce_only.dice_weight = ce_only.focal_weight = 0.0;
  ce_only.ce_weight = 1.0;
  EXPECT_EQ(pretrain_loss(Var(p), labels, ce_only).breakdown.total, r.breakdown.ce);
  EXPECT_LE(pretrain_loss(Var(one_hot(labels, 3)), labels, cfg).breakdown.total, 1e-10);
}

TEST(PretrainLoss, WeightArithmetic) {
  // (1.0, 0.5, 0.2) under (0.5, 0.3, 0.2) weights.
  EXPECT_NEAR(0.5 * 1.0 + 0.3 * 0.5 + 0.2 * 0.2, 0.69, 1e-15);
  LossConfig bad;
  bad.ce_weight = bad.dice_weight = bad.focal_weight = 0.0;
  EXPECT_THROW(bad.validate(), ContractError);
}

TEST(FinetuneLoss, AddsScaledRegulariser) {
  Var q(Tensor(Shape{1, 1, 1, 1}, 0.6)), s(Tensor(Shape{1, 1, 1, 1}, 0.4));
  Var w(Tensor(Shape{1, 1, 1, 2}, std::vector<double>{1.0, 1.0}), true);  // ||w||^2 = 2
  LossConfig cfg;
  LossResult r = finetune_loss(q, s, {{"w", w}}, cfg);
  EXPECT_NEAR(r.breakdown.total, 1.02, 1e-15);
  EXPECT_EQ(r.breakdown.reg, 2.0);
  EXPECT_EQ(r.breakdown.proto, 1.0);

  Var zero(Tensor(Shape{1, 1, 1, 2}), true);
  EXPECT_EQ(finetune_loss(q, s, {{"w", zero}}, cfg).breakdown.total, 1.0);
  cfg.reg_weight = 0.0;
  EXPECT_EQ(finetune_loss(q, s, {{"w", w}}, cfg).breakdown.total, 1.0);
  cfg.bidirectional = false;
  LossResult uni = finetune_loss(q, Var(), {}, cfg);
  EXPECT_EQ(uni.breakdown.support, 0.0);
  EXPECT_EQ(uni.breakdown.proto, uni.breakdown.query);
}

TEST(Losses, NonNegativeOnRandomInputs) {
  for (int trial = 0; trial < 20; ++trial) {
    Tensor p = random_probs({1, 3, 3, 4}, 60 + trial, 6.0);
    auto labels = random_labels(1, 3, 3, 4, 90 + trial);
    EXPECT_GE(value(query_loss(Var(p), labels)), 0.0);
    EXPECT_GE(value(dice_loss(Var(p), labels, 1.0)), 0.0);
    EXPECT_GE(value(focal_loss(Var(p), labels, 2.0)), 0.0);
  }
}

TEST(Losses, PerPixelMeanMatchesSingleCallReference) {
  // Per-pixel terms reduced by an explicit mean against one fused sum.
  Tensor p = random_probs({3, 5, 5, 4}, 15);
  auto labels = random_labels(3, 5, 5, 4, 16);
  Var per_pixel = pixel_nll(Var(p), labels);
  double manual = 0.0;
  for (double v : per_pixel.value().storage()) manual += v;
  manual /= static_cast<double>(per_pixel.value().numel());
  EXPECT_NEAR(manual, ce_oracle(p, labels), 1e-9);
  EXPECT_NEAR(value(ops::mean(per_pixel)), ce_oracle(p, labels), 1e-9);
}

TEST(Losses, GradientChecks) {
  const Tensor p = random_probs({1, 3, 3, 3}, 17, 1.0);
  auto labels = random_labels(1, 3, 3, 3, 18);
  LossConfig cfg;
  struct Case {
    const char* name;
    ScalarFunction fn;
  };
  std::vector<Case> cases{
      {"query", [&](const std::vector<Var>& in) { return query_loss(in[0], labels); }},
      {"support", [&](const std::vector<Var>& in) { return support_loss(in[0], labels, 1, 1); }},
      {"dice", [&](const std::vector<Var>& in) { return dice_loss(in[0], labels, 1.0); }},
      {"focal", [&](const std::vector<Var>& in) { return focal_loss(in[0], labels, 2.0); }},
      {"focal-1.5", [&](const std::vector<Var>& in) { return focal_loss(in[0], labels, 1.5); }},
      {"pretrain", [&](const std::vector<Var>& in) { return pretrain_loss(in[0], labels, cfg).total; }},
      {"finetune",
       [&](const std::vector<Var>& in) {
         return finetune_loss(query_loss(in[0], labels), support_loss(in[0], labels, 1, 1), {{"w", in[1]}}, cfg)
             .total;
       }},
  };
  for (auto& c : cases) {
    auto report = gradient_check(c.fn, {p, random_tensor({1, 1, 2, 2}, 19)}, {.step = 1e-5, .tolerance = 1e-3});
    EXPECT_TRUE(report.pass) << c.name << ": " << report.diagnostic;
    EXPECT_LE(report.max_rel_error, 1e-3) << c.name;
  }
}

}  // namespace
}  // namespace protoseg
