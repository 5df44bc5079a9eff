// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "protoseg/autograd.hpp"
#include "protoseg/tensor.hpp"

/// Differentiable tensor operations over NHWC tensors.
///
/// Convolution kernels are stored as (kh, kw, c_in, c_out) in the Shape
/// fields (n, h, w, c); depthwise kernels as (kh, kw, 1, c). All spatial
/// convolutions use stride 1 and "same" zero padding with odd kernel sizes.
///
/// Bilinear resampling uses the half-pixel convention
/// (src = (dst + 0.5) / scale - 0.5, clamped at the borders), and nearest
/// resampling picks src = floor(dst * in / out).
namespace protoseg::ops {

enum class Padding { kSame };

Var conv2d(const Var& x, const Var& kernel);
Var depthwise_conv2d(const Var& x, const Var& kernel);
/// Depthwise followed by pointwise convolution. `pointwise` is (1, 1, c_in, c_out).
Var sepconv2d(const Var& x, const Var& depthwise, const Var& pointwise,
              Padding padding = Padding::kSame);

/// Adds a per-channel bias of shape (1, 1, 1, c).
Var add_bias(const Var& x, const Var& bias);
Var add(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
/// Multiplies every element by a single-element Var.
Var mul_scalar(const Var& x, const Var& s);
Var relu(const Var& x);

/// Max pooling with window `k` and `stride`. `same` pads so output extent is
/// ceil(in / stride) and ignores out-of-image positions.
Var max_pool(const Var& x, int k, int stride, bool same);
Var upsample_bilinear_x2(const Var& x);

Var concat_channels(const std::vector<Var>& xs);
Var slice_batch(const Var& x, int begin, int count);
Var concat_batch(const std::vector<Var>& xs);
Var reshape(const Var& x, Shape shape);
/// Stacks single-row vectors (any shape with numel == c) into (1, 1, rows, c).
Var stack_rows(const std::vector<Var>& rows);

/// (rows(a) x a.c) * (rows(b) x b.c) with a.c == rows(b). Output keeps a's
/// leading extents with channel count b.c.
Var matmul(const Var& a, const Var& b);
/// (rows(a) x d) * (rows(b) x d)^T -> (1, 1, rows(a), rows(b)).
Var matmul_nt(const Var& a, const Var& b);

/// Numerically stabilised softmax along `axis` (0..3).
Var softmax(const Var& x, int axis = 3);
/// Divides each channel vector by max(||v||_2, min_norm).
Var l2_normalize(const Var& x, double min_norm = 1e-8);

/// Sum over (n, h, w) of x * weight divided by (sum(weight) + eps); output
/// is (1, 1, 1, c). `weight` is (n, h, w, 1) and not differentiated.
Var masked_mean(const Var& x, const Tensor& weight, double eps);

Var sum(const Var& x);
Var mean(const Var& x);
/// Scalar sum(x * w) with constant weights of the same shape.
Var weighted_sum(const Var& x, const Tensor& w);
/// Sum of squared entries over every Var in the list (scalar).
Var sum_squares(const std::vector<Var>& xs);

enum class BatchNormMode { kBatchStatistics, kRunningStatistics };

struct BatchNormState {
  Tensor running_mean;  // (1, 1, 1, c)
  Tensor running_var;   // (1, 1, 1, c)
  double momentum = 0.1;
  double epsilon = 1e-5;

  static BatchNormState fresh(int channels, double momentum, double epsilon);
};

/// Per-channel normalisation over (n, h, w). In batch mode the current batch
/// statistics normalise the input; in running mode the stored statistics do
/// and the result is affine in x. With `update_running` the running
/// statistics absorb the batch statistics (unbiased variance) after use.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
               BatchNormMode mode, bool update_running);

/// Local windowed attention: position (i, j) attends to the in-image
/// positions of the window x window neighbourhood centred on it, with
/// softmax over scale * <q_ij, k_pq>. Q and K share channel count; V may
/// differ. All three share (n, h, w).
Var local_attention(const Var& q, const Var& k, const Var& v, int window, double scale);
/// Attention weights used by local_attention, laid out as
/// (n, h, w, window * window); out-of-image entries are 0.
Tensor local_attention_weights(const Tensor& q, const Tensor& k, int window, double scale);

/// Centered full-convolution kernel equivalent to depthwise -> pointwise.
Tensor compose_separable_kernel(const Tensor& depthwise, const Tensor& pointwise);

/// Non-differentiable nearest-neighbour resize of an (n, h, w, c) tensor.
Tensor resize_nearest(const Tensor& x, int out_h, int out_w);

}  // namespace protoseg::ops
