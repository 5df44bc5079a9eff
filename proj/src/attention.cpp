// SPDX-License-Identifier: Apache-2.0
#include "protoseg/attention.hpp"

#include <cmath>

#include "protoseg/error.hpp"
#include "protoseg/ops.hpp"
#include "protoseg/rng.hpp"

namespace protoseg {

namespace {

Var random_matrix(int rows, int cols, double stddev, Rng& rng) {
  Tensor t(Shape{1, 1, rows, cols});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
  return Var(std::move(t), true);
}

void require_channels(const Var& features, const AttentionParams& params, const char* what) {
  PROTOSEG_REQUIRE(features.shape().c == params.channels(),
                   std::string(what) + ": features have " + std::to_string(features.shape().c) +
                       " channels but projections expect " + std::to_string(params.channels()));
}

Var finish(const Var& features, const Var& attended, const AttentionParams& params, const AttentionConfig& config) {
  Var out = ops::matmul(attended, params.w_o);
  return config.residual ? ops::add(features, out) : out;
}

// Row-stochastic weights of one image's global attention.
Var global_weights(const Var& tokens, const AttentionParams& params) {
  Var q = ops::matmul(tokens, params.w_q);
  Var k = ops::matmul(tokens, params.w_k);
  return ops::softmax(ops::scale(ops::matmul_nt(q, k), 1.0 / std::sqrt(params.d_k())), 3);
}

struct CrossOperands {
  Var q, k, v;
  double scale;
};

CrossOperands cross_operands(const Var& query_features, const Var& support_features, const AttentionParams& params,
                             const AttentionConfig& config) {
  PROTOSEG_REQUIRE(query_features.shape().c == support_features.shape().c,
                   "cross_attention: query has " + std::to_string(query_features.shape().c) +
                       " channels, support has " + std::to_string(support_features.shape().c));
  require_channels(query_features, params, "cross_attention");
  const Shape& qs = query_features.shape();
  const Shape& ss = support_features.shape();
  Var q = ops::reshape(query_features, Shape{1, 1, static_cast<int>(qs.rows()), qs.c});
  Var s = ops::reshape(support_features, Shape{1, 1, static_cast<int>(ss.rows()), ss.c});
  if (config.learned_cross_projections) {
    return {ops::matmul(q, params.w_q), ops::matmul(s, params.w_k), ops::matmul(s, params.w_v),
            1.0 / std::sqrt(params.d_k())};
  }
  PROTOSEG_REQUIRE(params.d_k() == qs.c,
                   "cross_attention without learned projections needs d_k equal to the channel count");
  return {q, s, s, 1.0 / std::sqrt(qs.c)};
}

}  // namespace

AttentionVariant parse_attention_variant(std::string_view name) {
  if (name == "none") return AttentionVariant::kNone;
  if (name == "sa") return AttentionVariant::kSelf;
  if (name == "lsa") return AttentionVariant::kLocal;
  if (name == "ca") return AttentionVariant::kCross;
  throw ContractError("unknown attention variant '" + std::string(name) + "' (expected none|sa|lsa|ca)");
}

std::string to_string(AttentionVariant variant) {
  switch (variant) {
    case AttentionVariant::kNone: return "none";
    case AttentionVariant::kSelf: return "sa";
    case AttentionVariant::kLocal: return "lsa";
    case AttentionVariant::kCross: return "ca";
  }
  return "none";
}

void AttentionConfig::validate() const {
  PROTOSEG_REQUIRE(d_k >= 0, "attention d_k must be >= 1 (or 0 for the channel count)");
  PROTOSEG_REQUIRE(window >= 1 && window % 2 == 1, "attention window must be odd and >= 1, got " +
                                                       std::to_string(window));
}

AttentionParams AttentionParams::make(AttentionVariant variant, int channels, const AttentionConfig& config,
                                      std::uint64_t seed) {
  config.validate();
  PROTOSEG_REQUIRE(channels >= 1, "attention channels must be >= 1");
  const int dk = config.d_k == 0 ? channels : config.d_k;
  Rng rng = Rng::stream(seed, "attention-init");
  const double stddev = 1.0 / std::sqrt(channels);
  AttentionParams p;
  p.variant = variant;
  p.w_q = random_matrix(channels, dk, stddev, rng);
  p.w_k = random_matrix(channels, dk, stddev, rng);
  p.w_v = random_matrix(channels, dk, stddev, rng);
  p.w_o = Var(Tensor(Shape{1, 1, dk, channels}), true);
  return p;
}

int AttentionParams::channels() const { return w_q.shape().w; }
int AttentionParams::d_k() const { return w_q.shape().c; }

ParameterList AttentionParams::parameters(const AttentionConfig& config) const {
  if (variant == AttentionVariant::kNone) return {};
  if (variant == AttentionVariant::kCross && !config.learned_cross_projections)
    return {{"head.attention.w_o", w_o}};
  return {{"head.attention.w_q", w_q},
          {"head.attention.w_k", w_k},
          {"head.attention.w_v", w_v},
          {"head.attention.w_o", w_o}};
}

void AttentionParams::validate() const {
  PROTOSEG_REQUIRE(w_q.defined() && w_k.defined() && w_v.defined() && w_o.defined(),
                   "attention projections are not initialised");
  const int c = channels(), dk = d_k();
  PROTOSEG_REQUIRE(dk >= 1, "attention d_k must be >= 1");
  PROTOSEG_REQUIRE(w_k.shape() == w_q.shape() && w_v.shape() == w_q.shape(),
                   "W_Q, W_K and W_V must share shape C x d_k");
  PROTOSEG_REQUIRE(w_o.shape() == (Shape{1, 1, dk, c}), "W_O must be d_k x C (" + std::to_string(dk) + " x " +
                                                            std::to_string(c) + "), got " + w_o.shape().str());
  for (const Var* v : {&w_q, &w_k, &w_v, &w_o})
    PROTOSEG_REQUIRE(v->value().all_finite(), "attention projections must be finite");
}

Var self_attention(const Var& features, const AttentionParams& params, const AttentionConfig& config) {
  params.validate();
  require_channels(features, params, "self_attention");
  const Shape& s = features.shape();
  std::vector<Var> images;
  images.reserve(s.n);
  for (int i = 0; i < s.n; ++i) {
    Var tokens = ops::reshape(ops::slice_batch(features, i, 1), Shape{1, 1, s.h * s.w, s.c});
    Var attended = ops::matmul(global_weights(tokens, params), ops::matmul(tokens, params.w_v));
    images.push_back(ops::reshape(ops::matmul(attended, params.w_o), Shape{1, s.h, s.w, s.c}));
  }
  Var out = s.n == 1 ? images.front() : ops::concat_batch(images);
  return config.residual ? ops::add(features, out) : out;
}

Var local_self_attention(const Var& features, const AttentionParams& params, const AttentionConfig& config) {
  config.validate();
  params.validate();
  require_channels(features, params, "local_self_attention");
  Var q = ops::matmul(features, params.w_q);
  Var k = ops::matmul(features, params.w_k);
  Var v = ops::matmul(features, params.w_v);
  return finish(features, ops::local_attention(q, k, v, config.window, 1.0 / std::sqrt(params.d_k())), params,
                config);
}

Var cross_attention(const Var& query_features, const Var& support_features, const AttentionParams& params,
                    const AttentionConfig& config) {
  params.validate();
  auto [q, k, v, scale] = cross_operands(query_features, support_features, params, config);
  Var weights = ops::softmax(ops::scale(ops::matmul_nt(q, k), scale), 3);
  Var out = ops::reshape(ops::matmul(ops::matmul(weights, v), params.w_o), query_features.shape());
  return config.residual ? ops::add(query_features, out) : out;
}

std::pair<Var, Var> apply_attention(const Var& support_features, const Var& query_features,
                                    const AttentionParams& params, const AttentionConfig& config) {
  switch (params.variant) {
    case AttentionVariant::kNone:
      return {support_features, query_features};
    case AttentionVariant::kSelf:
      return {self_attention(support_features, params, config), self_attention(query_features, params, config)};
    case AttentionVariant::kLocal:
      return {local_self_attention(support_features, params, config),
              local_self_attention(query_features, params, config)};
    case AttentionVariant::kCross:
      return {support_features, cross_attention(query_features, support_features, params, config)};
  }
  return {support_features, query_features};
}

Tensor attention_weights(const Var& query_features, const Var& support_features, const AttentionParams& params,
                         const AttentionConfig& config) {
  NoGradGuard guard;
  params.validate();
  switch (params.variant) {
    case AttentionVariant::kSelf: {
      require_channels(query_features, params, "self_attention");
      const Shape& s = query_features.shape();
      return global_weights(ops::reshape(ops::slice_batch(query_features, 0, 1), Shape{1, 1, s.h * s.w, s.c}),
                            params)
          .value();
    }
    case AttentionVariant::kLocal: {
      config.validate();
      require_channels(query_features, params, "local_self_attention");
      return ops::local_attention_weights(ops::matmul(query_features, params.w_q).value(),
                                          ops::matmul(query_features, params.w_k).value(), config.window,
                                          1.0 / std::sqrt(params.d_k()));
    }
    case AttentionVariant::kCross: {
      auto [q, k, v, scale] = cross_operands(query_features, support_features, params, config);
      return ops::softmax(ops::scale(ops::matmul_nt(q, k), scale), 3).value();
    }
    case AttentionVariant::kNone:
      break;
  }
  throw ContractError("attention_weights: variant 'none' has no weights");
}

}  // namespace protoseg
