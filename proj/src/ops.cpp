// SPDX-License-Identifier: Apache-2.0
#include "protoseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "protoseg/error.hpp"

namespace protoseg::ops {

using detail::Node;

namespace {

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

void accumulate(Node& target, const Tensor& delta) {
  Tensor& g = target.ensure_grad();
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] += delta[i];
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  PROTOSEG_REQUIRE(a == b, std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

struct ResampleTap {
  int i0;
  int i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<ResampleTap> bilinear_taps(int in, int out) {
  std::vector<ResampleTap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    int i1 = i0 < in - 1 ? i0 + 1 : i0;
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

// ---------------------------------------------------------------------------
// Convolutions

Var conv2d(const Var& x, const Var& kernel) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  const int kh = ks.n, kw = ks.h, cin = ks.w, cout = ks.c;
  PROTOSEG_REQUIRE(cin == xs.c, "conv2d: kernel expects " + std::to_string(cin) +
                                    " input channels, input has " + std::to_string(xs.c));
  PROTOSEG_REQUIRE(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd");
  const int ph = kh / 2, pw = kw / 2;
  const Shape os{xs.n, xs.h, xs.w, cout};
  Tensor out(os);
  const Tensor& in = x.value();
  const Tensor& k = kernel.value();
  for (int n = 0; n < xs.n; ++n)
    for (int y = 0; y < xs.h; ++y)
      for (int xx = 0; xx < xs.w; ++xx) {
        double* o = &out[out.index(n, y, xx, 0)];
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = y + ky - ph;
          if (iy < 0 || iy >= xs.h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = xx + kx - pw;
            if (ix < 0 || ix >= xs.w) continue;
            const double* ip = &in[in.index(n, iy, ix, 0)];
            const double* kp = &k[static_cast<std::size_t>(ky * kw + kx) * cin * cout];
            for (int ci = 0; ci < cin; ++ci) {
              const double v = ip[ci];
              const double* krow = kp + static_cast<std::size_t>(ci) * cout;
              for (int co = 0; co < cout; ++co) o[co] += v * krow[co];
            }
          }
        }
      }
  return Var::make(std::move(out), {x, kernel}, [xs, kh, kw, cin, cout, ph, pw](Node& self) {
    Node& xn = parent(self, 0);
    Node& kn = parent(self, 1);
    const Tensor& go = self.grad;
    const Tensor& in = xn.value;
    const Tensor& k = kn.value;
    Tensor* gin = xn.requires_grad ? &xn.ensure_grad() : nullptr;
    Tensor* gk = kn.requires_grad ? &kn.ensure_grad() : nullptr;
    for (int n = 0; n < xs.n; ++n)
      for (int y = 0; y < xs.h; ++y)
        for (int xx = 0; xx < xs.w; ++xx) {
          const double* g = &go[go.index(n, y, xx, 0)];
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = y + ky - ph;
            if (iy < 0 || iy >= xs.h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = xx + kx - pw;
              if (ix < 0 || ix >= xs.w) continue;
              const std::size_t ioff = in.index(n, iy, ix, 0);
              const std::size_t koff = static_cast<std::size_t>(ky * kw + kx) * cin * cout;
              for (int ci = 0; ci < cin; ++ci) {
                const double* krow = &k[koff + static_cast<std::size_t>(ci) * cout];
                if (gin) {
                  double acc = 0.0;
                  for (int co = 0; co < cout; ++co) acc += g[co] * krow[co];
                  (*gin)[ioff + ci] += acc;
                }
                if (gk) {
                  const double v = in[ioff + ci];
                  double* gkrow = &(*gk)[koff + static_cast<std::size_t>(ci) * cout];
                  for (int co = 0; co < cout; ++co) gkrow[co] += v * g[co];
                }
              }
            }
          }
        }
  });
}

Var depthwise_conv2d(const Var& x, const Var& kernel) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  const int kh = ks.n, kw = ks.h, c = xs.c;
  PROTOSEG_REQUIRE(ks.w == 1 && ks.c == c,
                   "depthwise_conv2d: kernel " + ks.str() + " needs one filter per input channel (" +
                       std::to_string(c) + ")");
  PROTOSEG_REQUIRE(kh % 2 == 1 && kw % 2 == 1, "depthwise_conv2d: kernel extents must be odd");
  const int ph = kh / 2, pw = kw / 2;
  Tensor out(xs);
  const Tensor& in = x.value();
  const Tensor& k = kernel.value();
  for (int n = 0; n < xs.n; ++n)
    for (int y = 0; y < xs.h; ++y)
      for (int xx = 0; xx < xs.w; ++xx) {
        double* o = &out[out.index(n, y, xx, 0)];
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = y + ky - ph;
          if (iy < 0 || iy >= xs.h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = xx + kx - pw;
            if (ix < 0 || ix >= xs.w) continue;
            const double* ip = &in[in.index(n, iy, ix, 0)];
            const double* kp = &k[static_cast<std::size_t>(ky * kw + kx) * c];
            for (int ch = 0; ch < c; ++ch) o[ch] += ip[ch] * kp[ch];
          }
        }
      }
  return Var::make(std::move(out), {x, kernel}, [xs, kh, kw, c, ph, pw](Node& self) {
    Node& xn = parent(self, 0);
    Node& kn = parent(self, 1);
    const Tensor& go = self.grad;
    const Tensor& in = xn.value;
    const Tensor& k = kn.value;
    Tensor* gin = xn.requires_grad ? &xn.ensure_grad() : nullptr;
    Tensor* gk = kn.requires_grad ? &kn.ensure_grad() : nullptr;
    for (int n = 0; n < xs.n; ++n)
      for (int y = 0; y < xs.h; ++y)
        for (int xx = 0; xx < xs.w; ++xx) {
          const double* g = &go[go.index(n, y, xx, 0)];
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = y + ky - ph;
            if (iy < 0 || iy >= xs.h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = xx + kx - pw;
              if (ix < 0 || ix >= xs.w) continue;
              const std::size_t ioff = in.index(n, iy, ix, 0);
              const std::size_t koff = static_cast<std::size_t>(ky * kw + kx) * c;
              for (int ch = 0; ch < c; ++ch) {
                if (gin) (*gin)[ioff + ch] += g[ch] * k[koff + ch];
                if (gk) (*gk)[koff + ch] += g[ch] * in[ioff + ch];
              }
            }
          }
        }
  });
}

Var sepconv2d(const Var& x, const Var& depthwise, const Var& pointwise, Padding) {
  PROTOSEG_REQUIRE(pointwise.shape().n == 1 && pointwise.shape().h == 1,
                   "sepconv2d: pointwise kernel must be 1x1, got " + pointwise.shape().str());
  PROTOSEG_REQUIRE(pointwise.shape().w == x.shape().c,
                   "sepconv2d: pointwise kernel expects " + std::to_string(pointwise.shape().w) +
                       " channels, input has " + std::to_string(x.shape().c));
  return conv2d(depthwise_conv2d(x, depthwise), pointwise);
}

Tensor compose_separable_kernel(const Tensor& depthwise, const Tensor& pointwise) {
  const Shape& ds = depthwise.shape();
  const Shape& ps = pointwise.shape();
  PROTOSEG_REQUIRE(ds.w == 1 && ps.n == 1 && ps.h == 1 && ps.w == ds.c,
                   "compose_separable_kernel: incompatible factors");
  Tensor k(Shape{ds.n, ds.h, ds.c, ps.c});
  for (int ky = 0; ky < ds.n; ++ky)
    for (int kx = 0; kx < ds.h; ++kx)
      for (int ci = 0; ci < ds.c; ++ci)
        for (int co = 0; co < ps.c; ++co)
          k.at(ky, kx, ci, co) = depthwise.at(ky, kx, 0, ci) * pointwise.at(0, 0, ci, co);
  return k;
}

// ---------------------------------------------------------------------------
// Element-wise

Var add_bias(const Var& x, const Var& bias) {
  const int c = x.shape().c;
  PROTOSEG_REQUIRE(bias.value().numel() == static_cast<std::size_t>(c),
                   "add_bias: bias has " + std::to_string(bias.value().numel()) +
                       " entries, input has " + std::to_string(c) + " channels");
  Tensor out = x.value();
  const Tensor& b = bias.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i % c];
  return Var::make(std::move(out), {x, bias}, [c](Node& self) {
    Node& xn = parent(self, 0);
    Node& bn = parent(self, 1);
    if (xn.requires_grad) accumulate(xn, self.grad);
    if (bn.requires_grad) {
      Tensor& gb = bn.ensure_grad();
      for (std::size_t i = 0; i < self.grad.numel(); ++i) gb[i % c] += self.grad[i];
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return Var::make(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      Node& n = parent(self, p);
      if (n.requires_grad) accumulate(n, self.grad);
    }
  });
}

Var scale(const Var& x, double factor) {
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= factor;
  return Var::make(std::move(out), {x}, [factor](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += factor * self.grad[i];
  });
}

Var mul_scalar(const Var& x, const Var& s) {
  PROTOSEG_REQUIRE(s.value().numel() == 1, "mul_scalar: scale must hold one element");
  const double sv = s.value()[0];
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= sv;
  return Var::make(std::move(out), {x, s}, [](Node& self) {
    Node& xn = parent(self, 0);
    Node& sn = parent(self, 1);
    const double sv = sn.value[0];
    if (xn.requires_grad) {
      Tensor& g = xn.ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += sv * self.grad[i];
    }
    if (sn.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.numel(); ++i) acc += self.grad[i] * xn.value[i];
      sn.ensure_grad()[0] += acc;
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  return Var::make(std::move(out), {x}, [](Node& self) {
    Node& xn = parent(self, 0);
    Tensor& g = xn.ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (xn.value[i] > 0.0) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Pooling and resampling

Var max_pool(const Var& x, int k, int stride, bool same) {
  const Shape& xs = x.shape();
  PROTOSEG_REQUIRE(k >= 1 && stride >= 1, "max_pool: window and stride must be positive");
  int oh, ow, pad;
  if (same) {
    oh = (xs.h + stride - 1) / stride;
    ow = (xs.w + stride - 1) / stride;
    pad = (k - 1) / 2;
  } else {
    PROTOSEG_REQUIRE(xs.h >= k && xs.w >= k, "max_pool: input smaller than window");
    oh = (xs.h - k) / stride + 1;
    ow = (xs.w - k) / stride + 1;
    pad = 0;
  }
  const Shape os{xs.n, oh, ow, xs.c};
  Tensor out(os);
  std::vector<std::size_t> argmax(os.numel());
  const Tensor& in = x.value();
  for (int n = 0; n < xs.n; ++n)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx)
        for (int ch = 0; ch < xs.c; ++ch) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_i = 0;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = y * stride + ky - pad;
            if (iy < 0 || iy >= xs.h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = xx * stride + kx - pad;
              if (ix < 0 || ix >= xs.w) continue;
              const std::size_t idx = in.index(n, iy, ix, ch);
              if (in[idx] > best) {
                best = in[idx];
                best_i = idx;
              }
            }
          }
          const std::size_t o = out.index(n, y, xx, ch);
          out[o] = best;
          argmax[o] = best_i;
        }
  return Var::make(std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
  });
}

Var upsample_bilinear_x2(const Var& x) {
  const Shape& xs = x.shape();
  PROTOSEG_REQUIRE(xs.h >= 1 && xs.w >= 1, "upsample_bilinear_x2: empty spatial extent");
  const Shape os{xs.n, xs.h * 2, xs.w * 2, xs.c};
  auto ty = bilinear_taps(xs.h, os.h);
  auto tx = bilinear_taps(xs.w, os.w);
  Tensor out(os);
  const Tensor& in = x.value();
  for (int n = 0; n < xs.n; ++n)
    for (int y = 0; y < os.h; ++y) {
      const auto& a = ty[y];
      for (int xx = 0; xx < os.w; ++xx) {
        const auto& b = tx[xx];
        const double w00 = (1 - a.w1) * (1 - b.w1), w01 = (1 - a.w1) * b.w1;
        const double w10 = a.w1 * (1 - b.w1), w11 = a.w1 * b.w1;
        const double* p00 = &in[in.index(n, a.i0, b.i0, 0)];
        const double* p01 = &in[in.index(n, a.i0, b.i1, 0)];
        const double* p10 = &in[in.index(n, a.i1, b.i0, 0)];
        const double* p11 = &in[in.index(n, a.i1, b.i1, 0)];
        double* o = &out[out.index(n, y, xx, 0)];
        for (int ch = 0; ch < xs.c; ++ch)
          o[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
      }
    }
  return Var::make(std::move(out), {x}, [xs, os, ty = std::move(ty), tx = std::move(tx)](Node& self) {
    Node& xn = parent(self, 0);
    Tensor& g = xn.ensure_grad();
    const Tensor& go = self.grad;
    for (int n = 0; n < xs.n; ++n)
      for (int y = 0; y < os.h; ++y) {
        const auto& a = ty[y];
        for (int xx = 0; xx < os.w; ++xx) {
          const auto& b = tx[xx];
          const double w00 = (1 - a.w1) * (1 - b.w1), w01 = (1 - a.w1) * b.w1;
          const double w10 = a.w1 * (1 - b.w1), w11 = a.w1 * b.w1;
          const double* gp = &go[go.index(n, y, xx, 0)];
          double* g00 = &g[g.index(n, a.i0, b.i0, 0)];
          double* g01 = &g[g.index(n, a.i0, b.i1, 0)];
          double* g10 = &g[g.index(n, a.i1, b.i0, 0)];
          double* g11 = &g[g.index(n, a.i1, b.i1, 0)];
          for (int ch = 0; ch < xs.c; ++ch) {
            g00[ch] += w00 * gp[ch];
            g01[ch] += w01 * gp[ch];
            g10[ch] += w10 * gp[ch];
            g11[ch] += w11 * gp[ch];
          }
        }
      }
  });
}

Tensor resize_nearest(const Tensor& x, int out_h, int out_w) {
  const Shape& xs = x.shape();
  Tensor out(Shape{xs.n, out_h, out_w, xs.c});
  for (int n = 0; n < xs.n; ++n)
    for (int y = 0; y < out_h; ++y) {
      const int sy = std::min(xs.h - 1, static_cast<int>(static_cast<long>(y) * xs.h / out_h));
      for (int xx = 0; xx < out_w; ++xx) {
        const int sx = std::min(xs.w - 1, static_cast<int>(static_cast<long>(xx) * xs.w / out_w));
        for (int ch = 0; ch < xs.c; ++ch) out.at(n, y, xx, ch) = x.at(n, sy, sx, ch);
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Structural

Var concat_channels(const std::vector<Var>& xs) {
  PROTOSEG_REQUIRE(!xs.empty(), "concat_channels: no inputs");
  Shape os = xs.front().shape();
  os.c = 0;
  for (const auto& v : xs) {
    const Shape& s = v.shape();
    PROTOSEG_REQUIRE(s.n == os.n && s.h == os.h && s.w == os.w,
                     "concat_channels: spatial mismatch " + s.str() + " vs " + xs.front().shape().str());
    os.c += s.c;
  }
  Tensor out(os);
  const std::size_t pixels = os.rows();
  std::vector<int> offsets;
  int off = 0;
  for (const auto& v : xs) {
    offsets.push_back(off);
    const int c = v.shape().c;
    const Tensor& in = v.value();
    for (std::size_t p = 0; p < pixels; ++p)
      std::copy_n(&in[p * c], c, &out[p * os.c + off]);
    off += c;
  }
  return Var::make(std::move(out), xs, [offsets, pixels, total = os.c](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& pn = parent(self, i);
      if (!pn.requires_grad) continue;
      const int c = pn.value.shape().c;
      Tensor& g = pn.ensure_grad();
      for (std::size_t p = 0; p < pixels; ++p)
        for (int ch = 0; ch < c; ++ch) g[p * c + ch] += self.grad[p * total + offsets[i] + ch];
    }
  });
}

Var slice_batch(const Var& x, int begin, int count) {
  const Shape& xs = x.shape();
  PROTOSEG_REQUIRE(begin >= 0 && count >= 1 && begin + count <= xs.n,
                   "slice_batch: range out of bounds for " + xs.str());
  const Shape os{count, xs.h, xs.w, xs.c};
  const std::size_t per = static_cast<std::size_t>(xs.h) * xs.w * xs.c;
  const std::size_t start = per * begin;
  Tensor out(os);
  std::copy_n(&x.value()[start], os.numel(), &out[0]);
  return Var::make(std::move(out), {x}, [start](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) g[start + i] += self.grad[i];
  });
}

Var concat_batch(const std::vector<Var>& xs) {
  PROTOSEG_REQUIRE(!xs.empty(), "concat_batch: no inputs");
  Shape os = xs.front().shape();
  os.n = 0;
  for (const auto& v : xs) {
    const Shape& s = v.shape();
    PROTOSEG_REQUIRE(s.h == os.h && s.w == os.w && s.c == os.c,
                     "concat_batch: extent mismatch " + s.str());
    os.n += s.n;
  }
  Tensor out(os);
  std::size_t off = 0;
  for (const auto& v : xs) {
    std::copy(v.value().storage().begin(), v.value().storage().end(), out.storage().begin() + off);
    off += v.value().numel();
  }
  return Var::make(std::move(out), xs, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node& pn = parent(self, i);
      const std::size_t n = pn.value.numel();
      if (pn.requires_grad) {
        Tensor& g = pn.ensure_grad();
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[off + j];
      }
      off += n;
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(shape);
  return Var::make(std::move(out), {x}, [](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

Var stack_rows(const std::vector<Var>& rows) {
  PROTOSEG_REQUIRE(!rows.empty(), "stack_rows: no rows");
  const std::size_t c = rows.front().value().numel();
  std::vector<Var> reshaped;
  reshaped.reserve(rows.size());
  for (const auto& r : rows) {
    PROTOSEG_REQUIRE(r.value().numel() == c, "stack_rows: row length mismatch");
    reshaped.push_back(reshape(r, Shape{1, 1, 1, static_cast<int>(c)}));
  }
  return reshape(concat_batch(reshaped), Shape{1, 1, static_cast<int>(rows.size()), static_cast<int>(c)});
}

// ---------------------------------------------------------------------------
// Matrix products

Var matmul(const Var& a, const Var& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const std::size_t rows = as.rows();
  const int inner = as.c;
  const int cols = bs.c;
  PROTOSEG_REQUIRE(bs.rows() == static_cast<std::size_t>(inner),
                   "matmul: inner extents differ (" + as.str() + " * " + bs.str() + ")");
  Tensor out(Shape{as.n, as.h, as.w, cols});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = &out[r * cols];
    const double* ar = &av[r * inner];
    for (int i = 0; i < inner; ++i) {
      const double v = ar[i];
      const double* br = &bv[static_cast<std::size_t>(i) * cols];
      for (int j = 0; j < cols; ++j) o[j] += v * br[j];
    }
  }
  return Var::make(std::move(out), {a, b}, [rows, inner, cols](Node& self) {
    Node& an = parent(self, 0);
    Node& bn = parent(self, 1);
    const Tensor& g = self.grad;
    if (an.requires_grad) {
      Tensor& ga = an.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = &g[r * cols];
        for (int i = 0; i < inner; ++i) {
          const double* br = &bn.value[static_cast<std::size_t>(i) * cols];
          double acc = 0.0;
          for (int j = 0; j < cols; ++j) acc += gr[j] * br[j];
          ga[r * inner + i] += acc;
        }
      }
    }
    if (bn.requires_grad) {
      Tensor& gb = bn.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = &g[r * cols];
        for (int i = 0; i < inner; ++i) {
          const double v = an.value[r * inner + i];
          double* gbr = &gb[static_cast<std::size_t>(i) * cols];
          for (int j = 0; j < cols; ++j) gbr[j] += v * gr[j];
        }
      }
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  PROTOSEG_REQUIRE(as.c == bs.c, "matmul_nt: feature extents differ (" + as.str() + " vs " + bs.str() + ")");
  const std::size_t ra = as.rows(), rb = bs.rows();
  const int d = as.c;
  Tensor out(Shape{1, 1, static_cast<int>(ra), static_cast<int>(rb)});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < ra; ++i) {
    const double* ar = &av[i * d];
    for (std::size_t j = 0; j < rb; ++j) {
      const double* br = &bv[j * d];
      double acc = 0.0;
      for (int t = 0; t < d; ++t) acc += ar[t] * br[t];
      out[i * rb + j] = acc;
    }
  }
  return Var::make(std::move(out), {a, b}, [ra, rb, d](Node& self) {
    Node& an = parent(self, 0);
    Node& bn = parent(self, 1);
    const Tensor& g = self.grad;
    Tensor* ga = an.requires_grad ? &an.ensure_grad() : nullptr;
    Tensor* gb = bn.requires_grad ? &bn.ensure_grad() : nullptr;
    for (std::size_t i = 0; i < ra; ++i) {
      const double* ar = &an.value[i * d];
      for (std::size_t j = 0; j < rb; ++j) {
        const double gij = g[i * rb + j];
        if (gij == 0.0) continue;
        const double* br = &bn.value[j * d];
        if (ga) {
          double* gar = &(*ga)[i * d];
          for (int t = 0; t < d; ++t) gar[t] += gij * br[t];
        }
        if (gb) {
          double* gbr = &(*gb)[j * d];
          for (int t = 0; t < d; ++t) gbr[t] += gij * ar[t];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalisations

namespace {

struct AxisLayout {
  std::size_t outer;
  std::size_t extent;
  std::size_t inner;  // stride of the axis
};

AxisLayout axis_layout(const Shape& s, int axis) {
  PROTOSEG_REQUIRE(axis >= 0 && axis <= 3, "softmax: axis must be in 0..3");
  const int dims[4] = {s.n, s.h, s.w, s.c};
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= dims[i];
  for (int i = axis + 1; i < 4; ++i) inner *= dims[i];
  return {outer, static_cast<std::size_t>(dims[axis]), inner};
}

}  // namespace

Var softmax(const Var& x, int axis) {
  const AxisLayout L = axis_layout(x.shape(), axis);
  const Tensor& in = x.value();
  Tensor out(x.shape());
  for (std::size_t o = 0; o < L.outer; ++o)
    for (std::size_t i = 0; i < L.inner; ++i) {
      const std::size_t base = o * L.extent * L.inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < L.extent; ++k) m = std::max(m, in[base + k * L.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < L.extent; ++k) {
        const double e = std::exp(in[base + k * L.inner] - m);
        out[base + k * L.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < L.extent; ++k) out[base + k * L.inner] /= z;
    }
  return Var::make(out, {x}, [L, y = out](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    const Tensor& gy = self.grad;
    for (std::size_t o = 0; o < L.outer; ++o)
      for (std::size_t i = 0; i < L.inner; ++i) {
        const std::size_t base = o * L.extent * L.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < L.extent; ++k) {
          const std::size_t idx = base + k * L.inner;
          dot += gy[idx] * y[idx];
        }
        for (std::size_t k = 0; k < L.extent; ++k) {
          const std::size_t idx = base + k * L.inner;
          g[idx] += y[idx] * (gy[idx] - dot);
        }
      }
  });
}

Var l2_normalize(const Var& x, double min_norm) {
  const Shape& s = x.shape();
  const std::size_t rows = s.rows();
  const int c = s.c;
  Tensor out(s);
  std::vector<double> norms(rows);
  const Tensor& in = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (int k = 0; k < c; ++k) ss += in[r * c + k] * in[r * c + k];
    const double nrm = std::sqrt(ss);
    norms[r] = nrm;
    const double d = std::max(nrm, min_norm);
    for (int k = 0; k < c; ++k) out[r * c + k] = in[r * c + k] / d;
  }
  return Var::make(out, {x}, [rows, c, min_norm, norms = std::move(norms), y = out](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    const Tensor& gy = self.grad;
    for (std::size_t r = 0; r < rows; ++r) {
      if (norms[r] > min_norm) {
        double dot = 0.0;
        for (int k = 0; k < c; ++k) dot += y[r * c + k] * gy[r * c + k];
        for (int k = 0; k < c; ++k)
          g[r * c + k] += (gy[r * c + k] - y[r * c + k] * dot) / norms[r];
      } else {
        for (int k = 0; k < c; ++k) g[r * c + k] += gy[r * c + k] / min_norm;
      }
    }
  });
}

Var masked_mean(const Var& x, const Tensor& weight, double eps) {
  const Shape& s = x.shape();
  PROTOSEG_REQUIRE(weight.shape() == (Shape{s.n, s.h, s.w, 1}),
                   "masked_mean: mask " + weight.shape().str() + " not aligned with features " + s.str());
  const std::size_t rows = s.rows();
  const int c = s.c;
  double count = 0.0;
  for (std::size_t r = 0; r < rows; ++r) count += weight[r];
  const double denom = count + eps;
  Tensor out(Shape{1, 1, 1, c});
  const Tensor& in = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double wr = weight[r];
    if (wr == 0.0) continue;
    for (int k = 0; k < c; ++k) out[k] += wr * in[r * c + k];
  }
  for (int k = 0; k < c; ++k) out[k] /= denom;
  return Var::make(std::move(out), {x}, [weight, rows, c, denom](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double wr = weight[r] / denom;
      if (wr == 0.0) continue;
      for (int k = 0; k < c; ++k) g[r * c + k] += wr * self.grad[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& x) {
  Tensor out(Shape{1, 1, 1, 1}, x.value().sum());
  return Var::make(std::move(out), {x}, [](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    const double s = self.grad[0];
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s;
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().numel());
  PROTOSEG_REQUIRE(n > 0, "mean: empty tensor");
  return scale(sum(x), 1.0 / n);
}

Var weighted_sum(const Var& x, const Tensor& w) {
  require_same_shape(x.shape(), w.shape(), "weighted_sum");
  double acc = 0.0;
  for (std::size_t i = 0; i < w.numel(); ++i) acc += x.value()[i] * w[i];
  return Var::make(Tensor(Shape{1, 1, 1, 1}, acc), {x}, [w](Node& self) {
    Tensor& g = parent(self, 0).ensure_grad();
    const double s = self.grad[0];
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s * w[i];
  });
}

Var sum_squares(const std::vector<Var>& xs) {
  double acc = 0.0;
  for (const auto& v : xs)
    for (double e : v.value().storage()) acc += e * e;
  return Var::make(Tensor(Shape{1, 1, 1, 1}, acc), xs, [](Node& self) {
    const double s = self.grad[0];
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      Tensor& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += 2.0 * s * p->value[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalisation

BatchNormState BatchNormState::fresh(int channels, double momentum, double epsilon) {
  BatchNormState s;
  s.running_mean = Tensor::zeros(Shape{1, 1, 1, channels});
  s.running_var = Tensor::filled(Shape{1, 1, 1, channels}, 1.0);
  s.momentum = momentum;
  s.epsilon = epsilon;
  return s;
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
               BatchNormMode mode, bool update_running) {
  const Shape& s = x.shape();
  const int c = s.c;
  PROTOSEG_REQUIRE(gamma.value().numel() == static_cast<std::size_t>(c) &&
                       beta.value().numel() == static_cast<std::size_t>(c) &&
                       state.running_mean.numel() == static_cast<std::size_t>(c),
                   "batch_norm: parameter extents do not match " + std::to_string(c) + " channels");
  const std::size_t m = s.rows();
  PROTOSEG_REQUIRE(m >= 1, "batch_norm: empty input");
  const Tensor& in = x.value();

  std::vector<double> bmean(c, 0.0), bvar(c, 0.0);
  const bool need_batch = mode == BatchNormMode::kBatchStatistics || update_running;
  if (need_batch) {
    for (std::size_t r = 0; r < m; ++r)
      for (int k = 0; k < c; ++k) bmean[k] += in[r * c + k];
    for (int k = 0; k < c; ++k) bmean[k] /= static_cast<double>(m);
    for (std::size_t r = 0; r < m; ++r)
      for (int k = 0; k < c; ++k) {
        const double d = in[r * c + k] - bmean[k];
        bvar[k] += d * d;
      }
    for (int k = 0; k < c; ++k) bvar[k] /= static_cast<double>(m);
  }

  std::vector<double> mu(c), inv_std(c);
  for (int k = 0; k < c; ++k) {
    if (mode == BatchNormMode::kBatchStatistics) {
      mu[k] = bmean[k];
      inv_std[k] = 1.0 / std::sqrt(bvar[k] + state.epsilon);
    } else {
      mu[k] = state.running_mean[k];
      inv_std[k] = 1.0 / std::sqrt(state.running_var[k] + state.epsilon);
    }
  }

  Tensor xhat(s);
  Tensor out(s);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < m; ++r)
    for (int k = 0; k < c; ++k) {
      const double h = (in[r * c + k] - mu[k]) * inv_std[k];
      xhat[r * c + k] = h;
      out[r * c + k] = gv[k] * h + bv[k];
    }

  if (update_running) {
    const double unbias = m > 1 ? static_cast<double>(m) / (m - 1) : 1.0;
    for (int k = 0; k < c; ++k) {
      state.running_mean[k] = (1 - state.momentum) * state.running_mean[k] + state.momentum * bmean[k];
      state.running_var[k] = (1 - state.momentum) * state.running_var[k] + state.momentum * bvar[k] * unbias;
    }
  }

  const bool batch_mode = mode == BatchNormMode::kBatchStatistics;
  return Var::make(std::move(out), {x, gamma, beta},
                   [m, c, batch_mode, inv_std = std::move(inv_std), xhat = std::move(xhat)](Node& self) {
                     Node& xn = parent(self, 0);
                     Node& gn = parent(self, 1);
                     Node& bn = parent(self, 2);
                     const Tensor& gy = self.grad;
                     std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                     for (std::size_t r = 0; r < m; ++r)
                       for (int k = 0; k < c; ++k) {
                         sum_g[k] += gy[r * c + k];
                         sum_gx[k] += gy[r * c + k] * xhat[r * c + k];
                       }
                     if (gn.requires_grad) {
                       Tensor& g = gn.ensure_grad();
                       for (int k = 0; k < c; ++k) g[k] += sum_gx[k];
                     }
                     if (bn.requires_grad) {
                       Tensor& g = bn.ensure_grad();
                       for (int k = 0; k < c; ++k) g[k] += sum_g[k];
                     }
                     if (!xn.requires_grad) return;
                     Tensor& gx = xn.ensure_grad();
                     const Tensor& gamma_v = gn.value;
                     const double inv_m = 1.0 / static_cast<double>(m);
                     for (std::size_t r = 0; r < m; ++r)
                       for (int k = 0; k < c; ++k) {
                         const double scale = gamma_v[k] * inv_std[k];
                         double d = gy[r * c + k];
                         if (batch_mode) d -= inv_m * (sum_g[k] + xhat[r * c + k] * sum_gx[k]);
                         gx[r * c + k] += scale * d;
                       }
                   });
}

// ---------------------------------------------------------------------------
// Local attention

Tensor local_attention_weights(const Tensor& q, const Tensor& k, int window, double scale) {
  const Shape& s = q.shape();
  PROTOSEG_REQUIRE(window >= 1 && window % 2 == 1,
                   "local attention window must be odd and >= 1, got " + std::to_string(window));
  PROTOSEG_REQUIRE(k.shape() == s, "local attention: query/key shape mismatch");
  const int r = window / 2;
  const int ww = window * window;
  const int d = s.c;
  Tensor weights(Shape{s.n, s.h, s.w, ww});
  std::vector<double> logits(ww);
  for (int n = 0; n < s.n; ++n)
    for (int i = 0; i < s.h; ++i)
      for (int j = 0; j < s.w; ++j) {
        const double* qp = &q[q.index(n, i, j, 0)];
        double m = -std::numeric_limits<double>::infinity();
        for (int a = 0; a < window; ++a)
          for (int b = 0; b < window; ++b) {
            const int p = i + a - r, t = j + b - r;
            double& l = logits[a * window + b];
            if (p < 0 || p >= s.h || t < 0 || t >= s.w) {
              l = -std::numeric_limits<double>::infinity();
              continue;
            }
            const double* kp = &k[k.index(n, p, t, 0)];
            double acc = 0.0;
            for (int e = 0; e < d; ++e) acc += qp[e] * kp[e];
            l = scale * acc;
            m = std::max(m, l);
          }
        double z = 0.0;
        double* wp = &weights[weights.index(n, i, j, 0)];
        for (int u = 0; u < ww; ++u) {
          wp[u] = std::isinf(logits[u]) ? 0.0 : std::exp(logits[u] - m);
          z += wp[u];
        }
        for (int u = 0; u < ww; ++u) wp[u] /= z;
      }
  return weights;
}

Var local_attention(const Var& q, const Var& k, const Var& v, int window, double scale) {
  const Shape& s = q.shape();
  const Shape& vs = v.shape();
  PROTOSEG_REQUIRE(vs.n == s.n && vs.h == s.h && vs.w == s.w,
                   "local attention: value map extent mismatch");
  Tensor attn = local_attention_weights(q.value(), k.value(), window, scale);
  const int r = window / 2;
  const int dv = vs.c;
  Tensor out(vs);
  const Tensor& vv = v.value();
  for (int n = 0; n < s.n; ++n)
    for (int i = 0; i < s.h; ++i)
      for (int j = 0; j < s.w; ++j) {
        const double* wp = &attn[attn.index(n, i, j, 0)];
        double* o = &out[out.index(n, i, j, 0)];
        for (int a = 0; a < window; ++a)
          for (int b = 0; b < window; ++b) {
            const double wgt = wp[a * window + b];
            if (wgt == 0.0) continue;
            const double* vp = &vv[vv.index(n, i + a - r, j + b - r, 0)];
            for (int e = 0; e < dv; ++e) o[e] += wgt * vp[e];
          }
      }
  return Var::make(std::move(out), {q, k, v}, [s, dv, window, r, scale, attn = std::move(attn)](Node& self) {
    Node& qn = parent(self, 0);
    Node& kn = parent(self, 1);
    Node& vn = parent(self, 2);
    const int d = s.c;
    const int ww = window * window;
    Tensor* gq = qn.requires_grad ? &qn.ensure_grad() : nullptr;
    Tensor* gk = kn.requires_grad ? &kn.ensure_grad() : nullptr;
    Tensor* gv = vn.requires_grad ? &vn.ensure_grad() : nullptr;
    const Tensor& go = self.grad;
    std::vector<double> dw(ww);
    for (int n = 0; n < s.n; ++n)
      for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j) {
          const double* wp = &attn[attn.index(n, i, j, 0)];
          const double* g = &go[go.index(n, i, j, 0)];
          // dL/dw_u = <g, v_u>; dL/dv_u += w_u g
          double dot = 0.0;
          for (int a = 0; a < window; ++a)
            for (int b = 0; b < window; ++b) {
              const int u = a * window + b;
              dw[u] = 0.0;
              if (wp[u] == 0.0) continue;
              const std::size_t voff = vn.value.index(n, i + a - r, j + b - r, 0);
              double acc = 0.0;
              for (int e = 0; e < dv; ++e) acc += g[e] * vn.value[voff + e];
              dw[u] = acc;
              dot += wp[u] * acc;
              if (gv)
                for (int e = 0; e < dv; ++e) (*gv)[voff + e] += wp[u] * g[e];
            }
          if (!gq && !gk) continue;
          const std::size_t qoff = qn.value.index(n, i, j, 0);
          for (int a = 0; a < window; ++a)
            for (int b = 0; b < window; ++b) {
              const int u = a * window + b;
              if (wp[u] == 0.0) continue;
              const double dlogit = scale * wp[u] * (dw[u] - dot);
              const std::size_t koff = kn.value.index(n, i + a - r, j + b - r, 0);
              for (int e = 0; e < d; ++e) {
                if (gq) (*gq)[qoff + e] += dlogit * kn.value[koff + e];
                if (gk) (*gk)[koff + e] += dlogit * qn.value[qoff + e];
              }
            }
        }
  });
}

}  // namespace protoseg::ops
