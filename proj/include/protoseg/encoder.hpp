// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "protoseg/autograd.hpp"
#include "protoseg/ops.hpp"
#include "protoseg/rng.hpp"

namespace protoseg {

/// Channel layout of one InceptionSepConv block.
struct BlockConfig {
  int in_channels = 1;
  int out_channels = 3;
  std::array<int, 3> branch_split{1, 1, 1};
  double norm_epsilon = 1e-5;
  double norm_momentum = 0.1;

  /// b1 = b2 = floor(out / 3), b3 = out - 2 * floor(out / 3).
  static BlockConfig make(int in_channels, int out_channels, double eps = 1e-5, double momentum = 0.1);
  void validate() const;
};

/// Affine batch normalisation with its running statistics.
struct NormLayer {
  Var gamma;
  Var beta;
  ops::BatchNormState stats;

  static NormLayer make(int channels, double eps, double momentum);
};

struct InceptionBlock {
  BlockConfig config;
  // 3x3 branch: conv -> BN -> ReLU -> sepconv -> BN -> ReLU
  Var conv3;
  NormLayer norm3a;
  Var depthwise3;
  Var pointwise3;
  NormLayer norm3b;
  // 5x5 branch
  Var conv5;
  NormLayer norm5a;
  Var depthwise5;
  Var pointwise5;
  NormLayer norm5b;
  // pool branch: maxpool3x3 -> conv1x1 -> BN -> ReLU
  Var proj1;
  NormLayer norm1;
};

/// How batch normalisation behaves during a forward pass.
struct ForwardContext {
  /// Training passes update running statistics.
  bool training = false;
  /// Statistics used to normalise while training. Evaluation passes always
  /// use running statistics.
  ops::BatchNormMode train_norm = ops::BatchNormMode::kRunningStatistics;
};

struct EncoderConfig {
  int in_channels = 1;
  std::array<int, 5> stage_channels{16, 32, 64, 128, 128};
  int pyramid_channels = 64;
  double norm_epsilon = 1e-5;
  double norm_momentum = 0.1;

  static EncoderConfig desk();
  static EncoderConfig full();
};

/// Weights of the pyramid encoder: five bottom-up blocks and four lateral
/// 1x1 projections (levels 2..5). Support and query images read the same
/// store.
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  const InceptionBlock& block(int stage) const { return blocks_.at(stage - 1); }
  InceptionBlock& block(int stage) { return blocks_.at(stage - 1); }
  const Var& lateral_kernel(int level) const { return lateral_kernels_.at(level - 2); }
  const Var& lateral_bias(int level) const { return lateral_biases_.at(level - 2); }
  Var& lateral_kernel(int level) { return lateral_kernels_.at(level - 2); }
  Var& lateral_bias(int level) { return lateral_biases_.at(level - 2); }

  /// Trainable leaves with stable names.
  ParameterList parameters() const;
  /// Running statistics, in the same stable order as their names.
  std::vector<std::pair<std::string, ops::BatchNormState*>> norm_states();

 private:
  EncoderConfig config_;
  std::array<InceptionBlock, 5> blocks_;
  std::array<Var, 4> lateral_kernels_;
  std::array<Var, 4> lateral_biases_;
};

/// Bottom-up maps C1..C5 and top-down maps P2..P5.
struct PyramidFeatures {
  std::array<Var, 5> bottom_up;
  std::array<Var, 4> top_down;

  const Var& c(int level) const { return bottom_up.at(level - 1); }
  const Var& p(int level) const { return top_down.at(level - 2); }
};

InceptionBlock make_inception_block(const BlockConfig& config, Rng& rng);

Var inception_sep_conv(const Var& input, InceptionBlock& block, const ForwardContext& ctx);

/// C1 = block1(image); C_i = block_i(maxpool2x2(C_{i-1})). Height and width
/// must be divisible by 16.
std::array<Var, 5> bottom_up(const Var& image, Encoder& encoder, const ForwardContext& ctx);

/// P5 = lateral5(C5); P_i = lateral_i(C_i) + upsample(P_{i+1}).
std::array<Var, 4> top_down(const std::array<Var, 5>& bottom, const Encoder& encoder);

PyramidFeatures pyramid(const Var& image, Encoder& encoder, const ForwardContext& ctx);

/// Runs both pathways and returns P_level (level in 2..5).
Var extract_features(const Var& image, Encoder& encoder, int level, const ForwardContext& ctx);

}  // namespace protoseg
