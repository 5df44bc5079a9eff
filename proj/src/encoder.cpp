// SPDX-License-Identifier: Apache-2.0
#include "protoseg/encoder.hpp"

#include <cmath>

#include "protoseg/error.hpp"
#include "protoseg/rng.hpp"

namespace protoseg {

namespace {

Var kaiming(Shape shape, int fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / fan_in);
  Tensor t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
  return Var(std::move(t), true);
}

Var norm_relu(const Var& x, NormLayer& norm, const ForwardContext& ctx) {
  const auto mode = ctx.training ? ctx.train_norm : ops::BatchNormMode::kRunningStatistics;
  return ops::relu(ops::batch_norm(x, norm.gamma, norm.beta, norm.stats, mode, ctx.training));
}

void add_norm(ParameterList& out, const std::string& prefix, const NormLayer& n) {
  out.push_back({prefix + ".gamma", n.gamma});
  out.push_back({prefix + ".beta", n.beta});
}

}  // namespace

BlockConfig BlockConfig::make(int in_channels, int out_channels, double eps, double momentum) {
  BlockConfig c;
  c.in_channels = in_channels;
  c.out_channels = out_channels;
  const int third = out_channels / 3;
  c.branch_split = {third, third, out_channels - 2 * third};
  c.norm_epsilon = eps;
  c.norm_momentum = momentum;
  c.validate();
  return c;
}

void BlockConfig::validate() const {
  PROTOSEG_REQUIRE(in_channels >= 1 && out_channels >= 1, "block channel counts must be >= 1");
  for (int b : branch_split) PROTOSEG_REQUIRE(b >= 1, "every branch needs at least one channel");
  PROTOSEG_REQUIRE(branch_split[0] + branch_split[1] + branch_split[2] == out_channels,
                   "branch split must sum to out_channels");
}

NormLayer NormLayer::make(int channels, double eps, double momentum) {
  NormLayer n;
  n.gamma = Var(Tensor(Shape{1, 1, 1, channels}, 1.0), true);
  n.beta = Var(Tensor(Shape{1, 1, 1, channels}, 0.0), true);
  n.stats = ops::BatchNormState::fresh(channels, momentum, eps);
  return n;
}

EncoderConfig EncoderConfig::desk() { return EncoderConfig{}; }

EncoderConfig EncoderConfig::full() {
  EncoderConfig c;
  c.stage_channels = {32, 64, 128, 256, 256};
  c.pyramid_channels = 256;
  return c;
}

InceptionBlock make_inception_block(const BlockConfig& config, Rng& rng) {
  config.validate();
  const int in = config.in_channels;
  const auto [b1, b2, b3] = config.branch_split;
  const double eps = config.norm_epsilon, mom = config.norm_momentum;
  InceptionBlock b;
  b.config = config;
  b.conv3 = kaiming({3, 3, in, b1}, 9 * in, rng);
  b.norm3a = NormLayer::make(b1, eps, mom);
  b.depthwise3 = kaiming({3, 3, 1, b1}, 9, rng);
  b.pointwise3 = kaiming({1, 1, b1, b1}, b1, rng);
  b.norm3b = NormLayer::make(b1, eps, mom);
  b.conv5 = kaiming({5, 5, in, b2}, 25 * in, rng);
  b.norm5a = NormLayer::make(b2, eps, mom);
  b.depthwise5 = kaiming({5, 5, 1, b2}, 25, rng);
  b.pointwise5 = kaiming({1, 1, b2, b2}, b2, rng);
  b.norm5b = NormLayer::make(b2, eps, mom);
  b.proj1 = kaiming({1, 1, in, b3}, in, rng);
  b.norm1 = NormLayer::make(b3, eps, mom);
  return b;
}

Encoder::Encoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  PROTOSEG_REQUIRE(config.in_channels >= 1 && config.pyramid_channels >= 1,
                   "encoder channel counts must be >= 1");
  Rng rng = Rng::stream(seed, "encoder-init");
  int in = config.in_channels;
  for (int s = 0; s < 5; ++s) {
    blocks_[s] = make_inception_block(
        BlockConfig::make(in, config.stage_channels[s], config.norm_epsilon, config.norm_momentum), rng);
    in = config.stage_channels[s];
  }
  for (int level = 2; level <= 5; ++level) {
    const int cin = config.stage_channels[level - 1];
    const double stddev = std::sqrt(1.0 / cin);
    Tensor k(Shape{1, 1, cin, config.pyramid_channels});
    for (std::size_t i = 0; i < k.numel(); ++i) k[i] = rng.normal(0.0, stddev);
    lateral_kernels_[level - 2] = Var(std::move(k), true);
    lateral_biases_[level - 2] = Var(Tensor(Shape{1, 1, 1, config.pyramid_channels}, 0.0), true);
  }
}

ParameterList Encoder::parameters() const {
  ParameterList out;
  for (int s = 0; s < 5; ++s) {
    const auto& b = blocks_[s];
    const std::string p = "encoder.stage" + std::to_string(s + 1);
    out.push_back({p + ".b3x3.conv", b.conv3});
    add_norm(out, p + ".b3x3.norm_a", b.norm3a);
    out.push_back({p + ".b3x3.depthwise", b.depthwise3});
    out.push_back({p + ".b3x3.pointwise", b.pointwise3});
    add_norm(out, p + ".b3x3.norm_b", b.norm3b);
    out.push_back({p + ".b5x5.conv", b.conv5});
    add_norm(out, p + ".b5x5.norm_a", b.norm5a);
    out.push_back({p + ".b5x5.depthwise", b.depthwise5});
    out.push_back({p + ".b5x5.pointwise", b.pointwise5});
    add_norm(out, p + ".b5x5.norm_b", b.norm5b);
    out.push_back({p + ".pool.proj", b.proj1});
    add_norm(out, p + ".pool.norm", b.norm1);
  }
  for (int level = 2; level <= 5; ++level) {
    const std::string p = "encoder.lateral" + std::to_string(level);
    out.push_back({p + ".kernel", lateral_kernels_[level - 2]});
    out.push_back({p + ".bias", lateral_biases_[level - 2]});
  }
  return out;
}

std::vector<std::pair<std::string, ops::BatchNormState*>> Encoder::norm_states() {
  std::vector<std::pair<std::string, ops::BatchNormState*>> out;
  for (int s = 0; s < 5; ++s) {
    auto& b = blocks_[s];
    const std::string p = "encoder.stage" + std::to_string(s + 1);
    out.emplace_back(p + ".b3x3.norm_a", &b.norm3a.stats);
    out.emplace_back(p + ".b3x3.norm_b", &b.norm3b.stats);
    out.emplace_back(p + ".b5x5.norm_a", &b.norm5a.stats);
    out.emplace_back(p + ".b5x5.norm_b", &b.norm5b.stats);
    out.emplace_back(p + ".pool.norm", &b.norm1.stats);
  }
  return out;
}

Var inception_sep_conv(const Var& input, InceptionBlock& block, const ForwardContext& ctx) {
  PROTOSEG_REQUIRE(input.shape().c == block.config.in_channels,
                   "inception block expects " + std::to_string(block.config.in_channels) +
                       " input channels, got " + std::to_string(input.shape().c));
  Var b1 = norm_relu(ops::conv2d(input, block.conv3), block.norm3a, ctx);
  b1 = norm_relu(ops::sepconv2d(b1, block.depthwise3, block.pointwise3), block.norm3b, ctx);
  Var b2 = norm_relu(ops::conv2d(input, block.conv5), block.norm5a, ctx);
  b2 = norm_relu(ops::sepconv2d(b2, block.depthwise5, block.pointwise5), block.norm5b, ctx);
  Var b3 = norm_relu(ops::conv2d(ops::max_pool(input, 3, 1, true), block.proj1), block.norm1, ctx);
  return ops::concat_channels({b1, b2, b3});
}

std::array<Var, 5> bottom_up(const Var& image, Encoder& encoder, const ForwardContext& ctx) {
  const Shape& s = image.shape();
  PROTOSEG_REQUIRE(s.h % 16 == 0 && s.w % 16 == 0 && s.h > 0 && s.w > 0,
                   "encoder input height and width must be divisible by 16, got " + std::to_string(s.h) +
                       "x" + std::to_string(s.w));
  std::array<Var, 5> c;
  c[0] = inception_sep_conv(image, encoder.block(1), ctx);
  for (int i = 1; i < 5; ++i) c[i] = inception_sep_conv(ops::max_pool(c[i - 1], 2, 2, false), encoder.block(i + 1), ctx);
  return c;
}

std::array<Var, 4> top_down(const std::array<Var, 5>& bottom, const Encoder& encoder) {
  std::array<Var, 4> p;
  auto lateral = [&](int level) {
    const Var& ci = bottom[level - 1];
    PROTOSEG_REQUIRE(ci.defined(), "top_down needs complete bottom-up features");
    PROTOSEG_REQUIRE(ci.shape().c == encoder.lateral_kernel(level).shape().w,
                     "lateral projection at level " + std::to_string(level) + " expects " +
                         std::to_string(encoder.lateral_kernel(level).shape().w) + " channels, got " +
                         std::to_string(ci.shape().c));
    return ops::add_bias(ops::conv2d(ci, encoder.lateral_kernel(level)), encoder.lateral_bias(level));
  };
  p[3] = lateral(5);
  for (int level = 4; level >= 2; --level) {
    Var up = ops::upsample_bilinear_x2(p[level - 1]);
    Var lat = lateral(level);
    PROTOSEG_REQUIRE(up.shape() == lat.shape(), "top_down: fusion shape mismatch at level " +
                                                    std::to_string(level) + " (" + up.shape().str() +
                                                    " vs " + lat.shape().str() + ")");
    p[level - 2] = ops::add(lat, up);
  }
  return p;
}

PyramidFeatures pyramid(const Var& image, Encoder& encoder, const ForwardContext& ctx) {
  PyramidFeatures f;
  f.bottom_up = bottom_up(image, encoder, ctx);
  f.top_down = top_down(f.bottom_up, encoder);
  return f;
}

Var extract_features(const Var& image, Encoder& encoder, int level, const ForwardContext& ctx) {
  PROTOSEG_REQUIRE(level >= 2 && level <= 5, "pyramid level must be in 2..5, got " + std::to_string(level));
  return pyramid(image, encoder, ctx).p(level);
}

}  // namespace protoseg
