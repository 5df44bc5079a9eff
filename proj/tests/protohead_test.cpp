// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "protoseg/error.hpp"
#include "protoseg/gradcheck.hpp"
#include "protoseg/ops.hpp"
#include "protoseg/protohead.hpp"
#include "test_util.hpp"

namespace protoseg {
namespace {

using testing::random_tensor;

SegMask random_mask(int h, int w, int classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  SegMask m(h, w);
  for (auto& v : m.labels) v = static_cast<int>(rng() % classes);
  return m;
}

// sum_{hw} f * [y == c] / (sum_{hw} [y == c] + eps), straight loops.
std::vector<double> pool_oracle(const Tensor& f, const SegMask& m, int cls, double eps) {
  std::vector<double> num(f.shape().c, 0.0);
  double count = 0.0;
  for (int y = 0; y < f.shape().h; ++y)
    for (int x = 0; x < f.shape().w; ++x)
      if (m.at(y, x) == cls) {
        count += 1.0;
        for (int c = 0; c < f.shape().c; ++c) num[c] += f.at(0, y, x, c);
      }
  for (double& v : num) v /= count + eps;
  return num;
}

Var temperature(double t) { return Var(Tensor(Shape{1, 1, 1, 1}, t)); }

PrototypeSet make_set(const std::vector<std::vector<double>>& rows) {
  PrototypeSet p;
  const int c = static_cast<int>(rows.front().size());
  Tensor t(Shape{1, 1, static_cast<int>(rows.size()), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    p.classes.push_back(static_cast<int>(i));
    for (int j = 0; j < c; ++j) t.at(0, 0, static_cast<int>(i), j) = rows[i][j];
  }
  p.prototypes = Var(t);
  return p;
}

TEST(MaskedAveragePool, FullMaskIsSpatialMean) {
  Tensor f = random_tensor({1, 3, 4, 5}, 1);
  Var p = masked_average_pool(Var(f), SegMask(3, 4, 2), 2, 1e-6);
  for (int c = 0; c < 5; ++c) {
    double mean = 0.0;
    for (int i = 0; i < 12; ++i) mean += f[i * 5 + c] / 12.0;
    EXPECT_NEAR(p.value()[c], mean, 1e-6);
  }
}

TEST(MaskedAveragePool, SinglePixelRecoversFeature) {
  Tensor f = random_tensor({1, 4, 4, 3}, 2);
  SegMask m(4, 4);
  m.at(2, 1) = 5;
  Var p = masked_average_pool(Var(f), m, 5, 1e-6);
  for (int c = 0; c < 3; ++c) {
    const double want = f.at(0, 2, 1, c);
    EXPECT_LE(std::abs(p.value()[c] - want), 2e-6 * std::abs(want));
  }
}

TEST(MaskedAveragePool, MatchesLoopOracleOnRandomInstances) {
  for (int trial = 0; trial < 50; ++trial) {
    Tensor f = random_tensor({1, 4, 4, 3}, 100 + trial);
    SegMask m = random_mask(4, 4, 3, 200 + trial);
    for (int cls = 0; cls < 3; ++cls) {
      if (m.count(cls) == 0) continue;
      Var p = masked_average_pool(Var(f), m, cls, 1e-6);
      auto want = pool_oracle(f, m, cls, 1e-6);
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(p.value()[c], want[c], 1e-12);
    }
  }
}

TEST(MaskedAveragePool, ImageResolutionMaskIsDownsampledByNearest) {
  Tensor f = random_tensor({1, 4, 4, 2}, 3);
  SegMask full = random_mask(16, 16, 3, 4);
  SegMask coarse = resize_nearest(full, 4, 4);
  for (int cls = 0; cls < 3; ++cls) {
    if (coarse.count(cls) == 0) continue;
    Var p = masked_average_pool(Var(f), full, cls, 1e-6);
    auto want = pool_oracle(f, coarse, cls, 1e-6);
    for (int c = 0; c < 2; ++c) EXPECT_EQ(p.value()[c], want[c]);
  }
}

TEST(MaskedAveragePool, AbsentClassIsEmptyClassError) {
  try {
    masked_average_pool(Var(Tensor(Shape{1, 2, 2, 1})), SegMask(2, 2, 0), 1, 1e-6);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(e.kind(), DataError::Kind::kEmptyClass);
    EXPECT_NE(std::string(e.what()).find("empty-class"), std::string::npos);
  }
}

struct SupportSet {
  Tensor features;
  std::vector<SegMask> masks;
};

// n classes, k images each; image i contains background and class i / k + 1.
SupportSet support_set(int n, int k, std::uint64_t seed) {
  SupportSet s{random_tensor({n * k, 4, 4, 3}, seed), {}};
  for (int i = 0; i < n * k; ++i) {
    SegMask m(4, 4);
    for (int p = 0; p < 6; ++p) m.labels[(p * 3 + i) % 16] = i / k + 1;
    s.masks.push_back(m);
  }
  return s;
}

TEST(BuildPrototypes, OneEntryPerEpisodeClass) {
  auto s = support_set(2, 5, 10);
  PrototypeSet p = build_prototypes(Var(s.features), s.masks, {0, 1, 2}, {});
  EXPECT_EQ(p.size(), 3u);
  EXPECT_EQ(p.prototypes.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_TRUE(p.prototypes.value().all_finite());
}

TEST(BuildPrototypes, AveragesPerImagePoolsOverImagesContainingClass) {
  auto s = support_set(2, 3, 11);
  PrototypeSet p = build_prototypes(Var(s.features), s.masks, {0, 1, 2}, {});
  for (int cls = 0; cls <= 2; ++cls) {
    std::vector<double> want(3, 0.0);
    int members = 0;
    for (int i = 0; i < 6; ++i) {
      if (s.masks[i].count(cls) == 0) continue;
      Tensor one(Shape{1, 4, 4, 3});
      std::copy_n(s.features.storage().begin() + i * 48, 48, one.storage().begin());
      auto v = pool_oracle(one, s.masks[i], cls, 1e-6);
      for (int c = 0; c < 3; ++c) want[c] += v[c];
      ++members;
    }
    auto got = p.vector(cls);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(got[c], want[c] / members, 1e-12);
  }
}

TEST(BuildPrototypes, SingleShotEqualsPooling) {
  auto s = support_set(1, 1, 12);
  PrototypeSet p = build_prototypes(Var(s.features), s.masks, {0, 1}, {});
  for (int cls : {0, 1}) {
    Var direct = masked_average_pool(Var(s.features), s.masks[0], cls, 1e-6);
    auto got = p.vector(cls);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(got[c], direct.value()[c]);
  }
}

TEST(BuildPrototypes, DuplicatedImagesGiveSamePrototype) {
  auto s = support_set(1, 1, 13);
  Tensor twice(Shape{2, 4, 4, 3});
  std::copy(s.features.storage().begin(), s.features.storage().end(), twice.storage().begin());
  std::copy(s.features.storage().begin(), s.features.storage().end(), twice.storage().begin() + 48);
  PrototypeSet one = build_prototypes(Var(s.features), s.masks, {0, 1}, {});
  PrototypeSet two = build_prototypes(Var(twice), {s.masks[0], s.masks[0]}, {0, 1}, {});
  EXPECT_LE(max_abs_diff(one.prototypes.value(), two.prototypes.value()), 1e-15);
}

TEST(BuildPrototypes, MissingClassErrorsUnlessAllowed) {
  auto s = support_set(1, 2, 14);
  EXPECT_THROW(build_prototypes(Var(s.features), s.masks, {0, 1, 2}, {}), DataError);
  PrototypeSet p = build_prototypes(Var(s.features), s.masks, {0, 1, 2}, {}, true);
  for (double v : p.vector(2)) EXPECT_EQ(v, 0.0);
}

TEST(MatchPrototypes, AlignedFeatureScalarValue) {
  PrototypeSet p = make_set({{0, 1, 0}, {1, 0, 0}, {0, 0, 1}});
  Tensor f(Shape{1, 1, 1, 3}, std::vector<double>{2.0, 0.0, 0.0});
  Var probs = match_prototypes(Var(f), p, temperature(20.0));
  const double want = std::exp(20.0) / (std::exp(20.0) + 2.0);
  EXPECT_NEAR(probs.value()[1], want, 1e-15);
  EXPECT_NEAR(1.0 - probs.value()[1], 4.1e-9, 0.05e-9);
}

TEST(MatchPrototypes, EqualCosinesGiveUniform) {
  PrototypeSet p = make_set({{1, 0}, {0, 1}, {-1, 0}, {0, -1}});
  Tensor f(Shape{1, 1, 1, 2}, 0.0);
  Var probs = match_prototypes(Var(f), p, temperature(20.0));
  for (int c = 0; c < 4; ++c) EXPECT_NEAR(probs.value()[c], 0.25, 1e-15);
}

TEST(MatchPrototypes, InvariantToPositiveFeatureScale) {
  PrototypeSet p = make_set({{0.3, -1.0, 0.2}, {1.0, 0.5, -0.1}, {-0.4, 0.1, 0.9}});
  Tensor f = random_tensor({1, 3, 3, 3}, 15);
  Tensor g = f;
  for (auto& v : g.storage()) v *= 37.5;
  Tensor a = match_prototypes(Var(f), p, temperature(20.0)).value();
  Tensor b = match_prototypes(Var(g), p, temperature(20.0)).value();
  EXPECT_LE(max_abs_diff(a, b), 1e-12);
}

TEST(MatchPrototypes, ZeroNormInputsStayFinite) {
  PrototypeSet p = make_set({{0, 0, 0}, {1, 0, 0}});
  Var probs = match_prototypes(Var(Tensor(Shape{1, 2, 2, 3})), p, temperature(20.0));
  EXPECT_TRUE(probs.value().all_finite());
  EXPECT_NEAR(probs.value()[0], 0.5, 1e-15);
}

TEST(MatchPrototypes, TemperatureSharpensMaximum) {
  PrototypeSet p = make_set({{0.3, -1.0, 0.2}, {1.0, 0.5, -0.1}, {-0.4, 0.1, 0.9}});
  Tensor f = random_tensor({1, 4, 4, 3}, 16);
  Tensor lo = match_prototypes(Var(f), p, temperature(5.0)).value();
  Tensor hi = match_prototypes(Var(f), p, temperature(20.0)).value();
  for (int px = 0; px < 16; ++px) {
    double a = 0.0, b = 0.0;
    for (int c = 0; c < 3; ++c) {
      a = std::max(a, lo[px * 3 + c]);
      b = std::max(b, hi[px * 3 + c]);
    }
    EXPECT_GT(b, a);
  }
}

TEST(MatchPrototypes, ClassPermutationPermutesChannels) {
  auto s = support_set(3, 2, 17);
  Tensor q = random_tensor({1, 4, 4, 3}, 18);
  PrototypeSet p = build_prototypes(Var(s.features), s.masks, {0, 1, 2, 3}, {});
  // Relabel 1 -> 3, 2 -> 1, 3 -> 2.
  const int relabel[4] = {0, 3, 1, 2};
  std::vector<SegMask> masks = s.masks;
  for (auto& m : masks)
    for (auto& v : m.labels) v = relabel[v];
  PrototypeSet pp = build_prototypes(Var(s.features), masks, {0, 1, 2, 3}, {});
  Tensor a = match_prototypes(Var(q), p, temperature(20.0)).value();
  Tensor b = match_prototypes(Var(q), pp, temperature(20.0)).value();
  for (int px = 0; px < 16; ++px)
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(b[px * 4 + relabel[c]], a[px * 4 + c], 1e-14);
  auto ma = argmax_masks(a), mb = argmax_masks(b);
  for (std::size_t i = 0; i < ma[0].size(); ++i) EXPECT_EQ(mb[0].labels[i], relabel[ma[0].labels[i]]);
}

TEST(MatchPrototypes, SimplexOnRandomDraws) {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 100; ++trial) {
    const int classes = 2 + static_cast<int>(rng() % 8);
    Tensor f = random_tensor({1, 3, 3, 6}, rng, -5.0, 5.0);
    PrototypeSet p;
    for (int c = 0; c < classes; ++c) p.classes.push_back(c);
    p.prototypes = Var(random_tensor({1, 1, classes, 6}, rng, -5.0, 5.0));
    Tensor probs = match_prototypes(Var(f), p, temperature(20.0)).value();
    for (int px = 0; px < 9; ++px) {
      double total = 0.0;
      for (int c = 0; c < classes; ++c) {
        EXPECT_GE(probs[px * classes + c], 0.0);
        total += probs[px * classes + c];
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(MatchPrototypes, GradientCheck) {
  const Tensor probe = random_tensor({1, 3, 3, 3}, 20);
  auto report = gradient_check(
      [&](const std::vector<Var>& in) {
        PrototypeSet p;
        p.classes = {0, 1, 2};
        p.prototypes = in[1];
        return ops::weighted_sum(match_prototypes(in[0], p, in[2]), probe);
      },
      {random_tensor({1, 3, 3, 4}, 21), random_tensor({1, 1, 3, 4}, 22), Tensor(Shape{1, 1, 1, 1}, 3.0)});
  EXPECT_TRUE(report.pass) << report.diagnostic;
}

Episode toy_episode(int n, int k, int size, std::uint64_t seed) {
  Episode ep;
  ep.n_ways = n;
  ep.k_shots = k;
  std::mt19937_64 rng(seed);
  for (int c = 1; c <= n; ++c) ep.classes.push_back(c);
  auto sample = [&](int cls) {
    EpisodeSample s;
    s.image = random_tensor({1, size, size, 1}, rng);
    s.mask = SegMask(size, size);
    const int y0 = static_cast<int>(rng() % (size / 2)), x0 = static_cast<int>(rng() % (size / 2));
    for (int y = y0; y < y0 + size / 3; ++y)
      for (int x = x0; x < x0 + size / 3; ++x) {
        s.mask.at(y, x) = cls;
        s.image.at(0, y, x, 0) += 0.5 * cls;
      }
    s.source_class = cls;
    return s;
  };
  for (int c = 1; c <= n; ++c)
    for (int i = 0; i < k; ++i) ep.support.push_back(sample(c));
  ep.query.push_back(sample(1));
  return ep;
}

Model small_model(AttentionVariant v, std::uint64_t seed = 42) {
  return Model::make(EncoderConfig::desk(), v, {}, {}, seed);
}

TEST(PredictEpisode, ShapesAndSimplex) {
  Episode ep = toy_episode(2, 5, 32, 30);
  Model m = small_model(AttentionVariant::kNone);
  EpisodePrediction pred = predict_episode(ep, m, {});
  EXPECT_EQ(pred.query_probabilities.shape(), (Shape{1, 32, 32, 3}));
  EXPECT_EQ(pred.query_probabilities_features.shape(), (Shape{1, 16, 16, 3}));
  EXPECT_EQ(pred.prototypes.size(), 3u);
  const Tensor& p = pred.query_probabilities.value();
  for (std::size_t px = 0; px < p.shape().rows(); ++px) {
    const double total = p[px * 3] + p[px * 3 + 1] + p[px * 3 + 2];
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
  Var reversed = predict_support_reversed(pred, ep, m);
  EXPECT_EQ(reversed.shape(), (Shape{10, 32, 32, 3}));
  EXPECT_TRUE(reversed.value().all_finite());
}

TEST(PredictEpisode, ZeroInitialisedAttentionMatchesBaselineBitwise) {
  Episode ep = toy_episode(2, 2, 32, 31);
  Model base = small_model(AttentionVariant::kNone);
  const Tensor want = predict_episode(ep, base, {}).query_probabilities.value();
  for (auto v : {AttentionVariant::kSelf, AttentionVariant::kLocal, AttentionVariant::kCross}) {
    Model m = small_model(v);
    EXPECT_EQ(predict_episode(ep, m, {}).query_probabilities.value().storage(), want.storage()) << to_string(v);
  }
}

TEST(PredictEpisode, Deterministic) {
  Episode ep = toy_episode(2, 1, 32, 32);
  Model a = small_model(AttentionVariant::kSelf), b = small_model(AttentionVariant::kSelf);
  EXPECT_EQ(predict_episode(ep, a, {}).query_probabilities.value().storage(),
            predict_episode(ep, b, {}).query_probabilities.value().storage());
}

TEST(Model, HeadParametersFollowVariantAndTemperatureFlag) {
  EXPECT_TRUE(small_model(AttentionVariant::kNone).head_parameters().empty());
  EXPECT_EQ(small_model(AttentionVariant::kSelf).head_parameters().size(), 4u);
  ProtoHeadConfig learnable;
  learnable.temperature_learnable = true;
  Model m = Model::make(EncoderConfig::desk(), AttentionVariant::kNone, {}, learnable, 1);
  ASSERT_EQ(m.head_parameters().size(), 1u);
  EXPECT_EQ(m.head_parameters()[0].name, "head.temperature");
  EXPECT_EQ(m.parameters().size(), m.encoder.parameters().size() + 1);
}

}  // namespace
}  // namespace protoseg
