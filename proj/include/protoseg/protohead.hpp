// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "protoseg/attention.hpp"
#include "protoseg/autograd.hpp"
#include "protoseg/data.hpp"
#include "protoseg/encoder.hpp"

namespace protoseg {

struct ProtoHeadConfig {
  double epsilon = 1e-6;
  double temperature = 20.0;
  bool temperature_learnable = false;
  int feature_level = 2;

  void validate() const;
};

/// One prototype per episode class, stacked as rows of a (1, 1, P, C) Var in
/// the order of `classes` (background id 0 first).
struct PrototypeSet {
  std::vector<int> classes;
  Var prototypes;

  std::size_t size() const { return classes.size(); }
  int dim() const { return prototypes.shape().c; }
  /// Embedding of one class id.
  std::vector<double> vector(int class_id) const;
};

/// Per-channel masked mean of `features` (1, h, w, C) over pixels labelled
/// `class_id`; the mask is resized to (h, w) by nearest neighbour first.
/// Throws DataError(kEmptyClass) when the class has no pixel.
Var masked_average_pool(const Var& features, const SegMask& mask, int class_id, double epsilon);

/// p_c = mean over support images containing c of their masked average. With
/// `allow_missing`, classes absent from every image get a zero prototype
/// instead of an empty-class error.
PrototypeSet build_prototypes(const Var& support_features, const std::vector<SegMask>& support_masks,
                              const std::vector<int>& classes, const ProtoHeadConfig& config,
                              bool allow_missing = false);

/// Softmax over classes of temperature * cos(f_hw, p_c). `temperature` is a
/// single-element Var. Output is (n, h, w, P).
Var match_prototypes(const Var& query_features, const PrototypeSet& prototypes, const Var& temperature);

/// Bilinear x2 steps from feature to image resolution.
Var upsample_to(const Var& maps, int height, int width);

/// Label of the most probable class per pixel (lowest index wins ties).
std::vector<SegMask> argmax_masks(const Tensor& probabilities);

/// Encoder, attention head and temperature that make up the full model.
struct Model {
  Encoder encoder;
  AttentionConfig attention_config;
  AttentionParams attention;
  ProtoHeadConfig head_config;
  Var temperature;

  static Model make(const EncoderConfig& encoder_config, AttentionVariant variant,
                    const AttentionConfig& attention_config, const ProtoHeadConfig& head_config,
                    std::uint64_t seed);

  /// Trainable head leaves: attention projections and, when learnable, the
  /// temperature.
  ParameterList head_parameters() const;
  /// Encoder leaves followed by head leaves.
  ParameterList parameters() const;
};

struct EpisodePrediction {
  /// Query probabilities at image resolution, (n_q, H, W, n + 1).
  Var query_probabilities;
  /// Same at feature resolution.
  Var query_probabilities_features;
  PrototypeSet prototypes;
  /// Post-attention feature maps.
  Var support_features;
  Var query_features;
};

/// Features for support and query images (one encoder pass over both),
/// attention, prototypes from the support set and matching on the query set.
EpisodePrediction predict_episode(const Episode& episode, Model& model, const ForwardContext& ctx);

/// Reversed direction: prototypes pooled from query features under the
/// query's predicted labels segment the support images. Classes missing from
/// the prediction get zero prototypes. Returns (n*k, H, W, n + 1).
Var predict_support_reversed(const EpisodePrediction& prediction, const Episode& episode, const Model& model);

}  // namespace protoseg
