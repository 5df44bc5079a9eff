// SPDX-License-Identifier: Apache-2.0
#include "protoseg/protohead.hpp"

#include "protoseg/error.hpp"
#include "protoseg/ops.hpp"

namespace protoseg {

void ProtoHeadConfig::validate() const {
  PROTOSEG_REQUIRE(epsilon > 0.0, "prototype epsilon must be > 0");
  PROTOSEG_REQUIRE(temperature > 0.0, "temperature must be > 0");
  PROTOSEG_REQUIRE(feature_level >= 2 && feature_level <= 5, "feature level must be in 2..5");
}

std::vector<double> PrototypeSet::vector(int class_id) const {
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] != class_id) continue;
    const Tensor& p = prototypes.value();
    const int c = p.shape().c;
    return {p.storage().begin() + static_cast<std::ptrdiff_t>(i * c),
            p.storage().begin() + static_cast<std::ptrdiff_t>((i + 1) * c)};
  }
  throw ContractError("prototype set has no class " + std::to_string(class_id));
}

namespace {

// Indicator weights at feature resolution; returns the active pixel count.
std::size_t class_weights(const SegMask& mask, int class_id, int h, int w, Tensor& weight) {
  const SegMask m = resize_nearest(mask, h, w);
  weight = Tensor(Shape{1, h, w, 1});
  std::size_t count = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m.labels[i] == class_id) {
      weight[i] = 1.0;
      ++count;
    }
  }
  return count;
}

}  // namespace

Var masked_average_pool(const Var& features, const SegMask& mask, int class_id, double epsilon) {
  const Shape& s = features.shape();
  PROTOSEG_REQUIRE(s.n == 1, "masked_average_pool expects a single feature map, got batch " + std::to_string(s.n));
  PROTOSEG_REQUIRE(epsilon > 0.0, "masked_average_pool: epsilon must be > 0");
  Tensor weight;
  if (class_weights(mask, class_id, s.h, s.w, weight) == 0)
    throw DataError(DataError::Kind::kEmptyClass,
                    "empty-class: class " + std::to_string(class_id) + " has no pixels in the mask");
  return ops::masked_mean(features, weight, epsilon);
}

PrototypeSet build_prototypes(const Var& support_features, const std::vector<SegMask>& support_masks,
                              const std::vector<int>& classes, const ProtoHeadConfig& config, bool allow_missing) {
  config.validate();
  const Shape& s = support_features.shape();
  PROTOSEG_REQUIRE(static_cast<int>(support_masks.size()) == s.n,
                   "build_prototypes: " + std::to_string(support_masks.size()) + " masks for " +
                       std::to_string(s.n) + " feature maps");
  PROTOSEG_REQUIRE(!classes.empty(), "build_prototypes: no classes requested");
  std::vector<Var> images;
  images.reserve(s.n);
  for (int i = 0; i < s.n; ++i) images.push_back(s.n == 1 ? support_features : ops::slice_batch(support_features, i, 1));

  PrototypeSet out;
  out.classes = classes;
  std::vector<Var> rows;
  for (int cls : classes) {
    Var total;
    int members = 0;
    for (int i = 0; i < s.n; ++i) {
      Tensor weight;
      if (class_weights(support_masks[i], cls, s.h, s.w, weight) == 0) continue;
      Var pooled = ops::masked_mean(images[i], weight, config.epsilon);
      total = members == 0 ? pooled : ops::add(total, pooled);
      ++members;
    }
    if (members == 0) {
      if (!allow_missing)
        throw DataError(DataError::Kind::kEmptyClass,
                        "empty-class: no support image contains class " + std::to_string(cls));
      rows.push_back(Var(Tensor(Shape{1, 1, 1, s.c})));
      continue;
    }
    rows.push_back(members == 1 ? total : ops::scale(total, 1.0 / members));
  }
  out.prototypes = ops::stack_rows(rows);
  return out;
}

Var match_prototypes(const Var& query_features, const PrototypeSet& prototypes, const Var& temperature) {
  const Shape& s = query_features.shape();
  PROTOSEG_REQUIRE(s.c == prototypes.dim(), "match_prototypes: features have " + std::to_string(s.c) +
                                                " channels, prototypes " + std::to_string(prototypes.dim()));
  PROTOSEG_REQUIRE(temperature.value().numel() == 1, "temperature must be a single value");
  PROTOSEG_REQUIRE(temperature.value()[0] > 0.0, "temperature must be > 0");
  Var f = ops::l2_normalize(query_features, 1e-8);
  Var p = ops::l2_normalize(prototypes.prototypes, 1e-8);
  const int classes = static_cast<int>(prototypes.size());
  Var cosine = ops::reshape(ops::matmul_nt(f, p), Shape{s.n, s.h, s.w, classes});
  return ops::softmax(ops::mul_scalar(cosine, temperature), 3);
}

Var upsample_to(const Var& maps, int height, int width) {
  Var out = maps;
  while (out.shape().h < height || out.shape().w < width) out = ops::upsample_bilinear_x2(out);
  PROTOSEG_REQUIRE(out.shape().h == height && out.shape().w == width,
                   "upsample_to: " + maps.shape().str() + " does not reach " + std::to_string(height) + "x" +
                       std::to_string(width) + " by doubling");
  return out;
}

std::vector<SegMask> argmax_masks(const Tensor& probabilities) {
  const Shape& s = probabilities.shape();
  std::vector<SegMask> out;
  out.reserve(s.n);
  for (int n = 0; n < s.n; ++n) {
    SegMask m(s.h, s.w);
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        int best = 0;
        for (int c = 1; c < s.c; ++c)
          if (probabilities.at(n, y, x, c) > probabilities.at(n, y, x, best)) best = c;
        m.at(y, x) = best;
      }
    out.push_back(std::move(m));
  }
  return out;
}

Model Model::make(const EncoderConfig& encoder_config, AttentionVariant variant,
                  const AttentionConfig& attention_config, const ProtoHeadConfig& head_config, std::uint64_t seed) {
  head_config.validate();
  attention_config.validate();
  Model m;
  m.encoder = Encoder(encoder_config, seed);
  m.attention_config = attention_config;
  m.attention = AttentionParams::make(variant, encoder_config.pyramid_channels, attention_config, seed);
  m.head_config = head_config;
  m.temperature = Var(Tensor(Shape{1, 1, 1, 1}, head_config.temperature), head_config.temperature_learnable);
  return m;
}

ParameterList Model::head_parameters() const {
  ParameterList out = attention.parameters(attention_config);
  if (head_config.temperature_learnable) out.push_back({"head.temperature", temperature});
  return out;
}

ParameterList Model::parameters() const {
  ParameterList out = encoder.parameters();
  for (auto& p : head_parameters()) out.push_back(p);
  return out;
}

namespace {

std::vector<int> episode_classes(const Episode& episode) {
  std::vector<int> classes;
  for (int c = 0; c <= episode.n_ways; ++c) classes.push_back(c);
  return classes;
}

}  // namespace

EpisodePrediction predict_episode(const Episode& episode, Model& model, const ForwardContext& ctx) {
  PROTOSEG_REQUIRE(!episode.support.empty() && !episode.query.empty(), "episode needs support and query images");
  const Tensor support = episode.support_images();
  const Tensor query = episode.query_images();
  const int ns = support.shape().n, nq = query.shape().n;
  PROTOSEG_REQUIRE(support.shape().h == query.shape().h && support.shape().w == query.shape().w,
                   "support and query images differ in size");
  Tensor images(Shape{ns + nq, support.shape().h, support.shape().w, support.shape().c});
  std::copy(support.storage().begin(), support.storage().end(), images.storage().begin());
  std::copy(query.storage().begin(), query.storage().end(),
            images.storage().begin() + static_cast<std::ptrdiff_t>(support.numel()));

  Var features = extract_features(Var(std::move(images)), model.encoder, model.head_config.feature_level, ctx);
  auto [support_f, query_f] = apply_attention(ops::slice_batch(features, 0, ns), ops::slice_batch(features, ns, nq),
                                              model.attention, model.attention_config);
  EpisodePrediction out;
  out.support_features = support_f;
  out.query_features = query_f;
  out.prototypes = build_prototypes(support_f, episode.support_masks(), episode_classes(episode), model.head_config);
  out.query_probabilities_features = match_prototypes(query_f, out.prototypes, model.temperature);
  out.query_probabilities = upsample_to(out.query_probabilities_features, query.shape().h, query.shape().w);
  return out;
}

Var predict_support_reversed(const EpisodePrediction& prediction, const Episode& episode, const Model& model) {
  const auto predicted = argmax_masks(prediction.query_probabilities_features.value());
  PrototypeSet from_query =
      build_prototypes(prediction.query_features, predicted, episode_classes(episode), model.head_config, true);
  Var probs = match_prototypes(prediction.support_features, from_query, model.temperature);
  const Shape& image = episode.support.front().image.shape();
  return upsample_to(probs, image.h, image.w);
}

}  // namespace protoseg
