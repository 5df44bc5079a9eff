// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>

#include "protoseg/autograd.hpp"

namespace protoseg {

enum class AttentionVariant { kNone, kSelf, kLocal, kCross };

/// "none" | "sa" | "lsa" | "ca"
AttentionVariant parse_attention_variant(std::string_view name);
std::string to_string(AttentionVariant variant);

struct AttentionConfig {
  /// Projection width; 0 means "same as the feature channels".
  int d_k = 0;
  /// Odd neighbourhood side for local attention.
  int window = 5;
  bool residual = true;
  /// Cross attention uses raw features for Q, K and V unless this is set.
  bool learned_cross_projections = false;

  void validate() const;
};

/// Single-head projections. Matrices are stored as (1, 1, rows, cols):
/// W_Q, W_K, W_V are C x d_k and W_O is d_k x C.
struct AttentionParams {
  AttentionVariant variant = AttentionVariant::kNone;
  Var w_q;
  Var w_k;
  Var w_v;
  Var w_o;

  /// W_Q, W_K, W_V ~ N(0, 1/C); W_O = 0 so the residual path starts as the
  /// identity.
  static AttentionParams make(AttentionVariant variant, int channels, const AttentionConfig& config,
                              std::uint64_t seed);

  int channels() const;
  int d_k() const;
  /// Trainable leaves for the variant, named "head.attention.*". Cross
  /// attention exposes only W_O unless learned projections are enabled.
  ParameterList parameters(const AttentionConfig& config) const;
  void validate() const;
};

/// Global attention over the H*W tokens of each image independently.
Var self_attention(const Var& features, const AttentionParams& params, const AttentionConfig& config);

/// Attention restricted to the window x window neighbourhood of each pixel;
/// out-of-image positions are excluded from the softmax.
Var local_self_attention(const Var& features, const AttentionParams& params, const AttentionConfig& config);

/// Query tokens attend over every support token of the episode. Only the
/// query map is transformed.
Var cross_attention(const Var& query_features, const Var& support_features, const AttentionParams& params,
                    const AttentionConfig& config);

/// Applies the configured variant: SA and LSA transform both maps, CA only
/// the query map, "none" returns both unchanged. Returns (support, query).
std::pair<Var, Var> apply_attention(const Var& support_features, const Var& query_features,
                                    const AttentionParams& params, const AttentionConfig& config);

/// Attention weights as a row-stochastic (1, 1, queries, keys) tensor for
/// the first image of `features` (SA), its local windows laid out as
/// (n, h, w, window^2) (LSA), or every query token against the pooled
/// support tokens (CA).
Tensor attention_weights(const Var& query_features, const Var& support_features, const AttentionParams& params,
                         const AttentionConfig& config);

}  // namespace protoseg
