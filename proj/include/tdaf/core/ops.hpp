#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "tdaf/core/tape.hpp"
#include "tdaf/core/tensor.hpp"

namespace tdaf {

// Dense NCHW ops with reverse-mode gradients. Every op returns a fresh
// tensor; when a tape is supplied and any input requires a gradient, the op
// appends a backward rule that accumulates (+=) into its inputs' grad slots,
// so shared parameters collect contributions from every use site.

namespace detail {

template <typename Scalar>
bool wants_tape(Tape<Scalar>* tape, std::initializer_list<const Tensor<Scalar>*> ins) {
  if (!tape) return false;
  for (const auto* t : ins)
    if (t->requires_grad) return true;
  return false;
}

template <typename Scalar>
using RowMajorMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename Scalar>
using ConstRowMajorMap =
    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

/// Gathers conv receptive fields into a (C_in*k*k) x (N*OH*OW) matrix.
/// Column m = (n*OH + oy)*OW + ox holds the field of output position m.
template <typename Scalar>
void im2col(const Tensor<Scalar>& x, int k, int stride, int pad, int oh, int ow,
            MatrixX<Scalar>& col) {
  const Shape& s = x.shape;
  const std::int64_t m_total = std::int64_t(s.n) * oh * ow;
  col.resize(std::int64_t(s.c) * k * k, m_total);
  const Scalar* xv = x.values.data();
  std::int64_t m = 0;
  for (int n = 0; n < s.n; ++n) {
    const Scalar* xn = xv + std::int64_t(n) * s.c * s.h * s.w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++m) {
        Scalar* cm = col.data() + m * col.rows();
        std::int64_t r = 0;
        for (int ci = 0; ci < s.c; ++ci) {
          const Scalar* xc = xn + std::int64_t(ci) * s.h * s.w;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            const bool row_ok = iy >= 0 && iy < s.h;
            for (int kx = 0; kx < k; ++kx, ++r) {
              const int ix = ox * stride - pad + kx;
              cm[r] = (row_ok && ix >= 0 && ix < s.w) ? xc[std::int64_t(iy) * s.w + ix] : Scalar(0);
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds columns back into the input layout.
template <typename Scalar>
void col2im_accumulate(const MatrixX<Scalar>& col, int k, int stride, int pad, int oh, int ow,
                       const Shape& s, ArrayX<Scalar>& into) {
  Scalar* xv = into.data();
  std::int64_t m = 0;
  for (int n = 0; n < s.n; ++n) {
    Scalar* xn = xv + std::int64_t(n) * s.c * s.h * s.w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++m) {
        const Scalar* cm = col.data() + m * col.rows();
        std::int64_t r = 0;
        for (int ci = 0; ci < s.c; ++ci) {
          Scalar* xc = xn + std::int64_t(ci) * s.h * s.w;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            const bool row_ok = iy >= 0 && iy < s.h;
            for (int kx = 0; kx < k; ++kx, ++r) {
              const int ix = ox * stride - pad + kx;
              if (row_ok && ix >= 0 && ix < s.w) xc[std::int64_t(iy) * s.w + ix] += cm[r];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution, weight (C_out, C_in, k, k), zero padding, floor output
/// size. Differentiable w.r.t. input, weight and bias.
template <typename Scalar>
TensorPtr<Scalar> conv2d(Tape<Scalar>* tape, const TensorPtr<Scalar>& x,
                         const TensorPtr<Scalar>& w, const TensorPtr<Scalar>& b, int stride,
                         int pad) {
  const Shape& xs = x->shape;
  const Shape& ws = w->shape;
  require(ws.h == ws.w, "conv2d: kernel must be square, got weight ", ws.str());
  const int k = ws.h;
  const int co = ws.n;
  require(xs.c == ws.c, "conv2d: input channels ", xs.c, " != weight C_in ", ws.c, " (input ",
          xs.str(), ", weight ", ws.str(), ")");
  require(b->shape == Shape(1, co, 1, 1), "conv2d: bias shape ", b->shape.str(),
          " != 1x", co, "x1x1");
  require(stride >= 1 && pad >= 0, "conv2d: invalid stride/pad ", stride, "/", pad);
  require(xs.h + 2 * pad - k >= 0 && xs.w + 2 * pad - k >= 0,
          "conv2d: kernel does not fit: input ", xs.str(), ", k=", k, ", pad=", pad);
  const int oh = detail::conv_out_dim(xs.h, k, stride, pad);
  const int ow = detail::conv_out_dim(xs.w, k, stride, pad);
  require(oh >= 1 && ow >= 1, "conv2d: zero-size output for input ", xs.str(), ", k=", k,
          ", stride=", stride, ", pad=", pad);

  auto out = make_tensor<Scalar>(Shape(xs.n, co, oh, ow));
  const std::int64_t kk = std::int64_t(xs.c) * k * k;
  const std::int64_t m_total = std::int64_t(xs.n) * oh * ow;

  MatrixX<Scalar> col;
  detail::im2col(*x, k, stride, pad, oh, ow, col);
  detail::ConstRowMajorMap<Scalar> wm(w->values.data(), co, kk);
  MatrixX<Scalar> y(co, m_total);
  y.noalias() = wm * col;

  const Scalar* bv = b->values.data();
  Scalar* ov = out->values.data();
  const std::int64_t ohw = std::int64_t(oh) * ow;
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < co; ++c) {
      const std::int64_t m0 = std::int64_t(n) * ohw;
      Scalar* dst = ov + (std::int64_t(n) * co + c) * ohw;
      for (std::int64_t j = 0; j < ohw; ++j) dst[j] = y(c, m0 + j) + bv[c];
    }

  if (detail::wants_tape(tape, {x.get(), w.get(), b.get()})) {
    out->requires_grad = true;
    tape->record([x, w, b, out, k, stride, pad, oh, ow]() {
      if (!out->has_grad()) return;
      const Shape& xs = x->shape;
      const int co = w->shape.n;
      const std::int64_t kk = std::int64_t(xs.c) * k * k;
      const std::int64_t ohw = std::int64_t(oh) * ow;
      const std::int64_t m_total = std::int64_t(xs.n) * ohw;
      MatrixX<Scalar> dy(co, m_total);
      const Scalar* gv = out->grad.data();
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < co; ++c) {
          const Scalar* src = gv + (std::int64_t(n) * co + c) * ohw;
          const std::int64_t m0 = std::int64_t(n) * ohw;
          for (std::int64_t j = 0; j < ohw; ++j) dy(c, m0 + j) = src[j];
        }
      MatrixX<Scalar> col;
      detail::im2col(*x, k, stride, pad, oh, ow, col);
      w->ensure_grad();
      detail::RowMajorMap<Scalar> gw(w->grad.data(), co, kk);
      gw.noalias() += dy * col.transpose();
      b->ensure_grad();
      for (int c = 0; c < co; ++c) b->grad[c] += dy.row(c).sum();
      x->ensure_grad();
      detail::ConstRowMajorMap<Scalar> wm(w->values.data(), co, kk);
      MatrixX<Scalar> dcol(kk, m_total);
      dcol.noalias() = wm.transpose() * dy;
      detail::col2im_accumulate(dcol, k, stride, pad, oh, ow, xs, x->grad);
    });
  }
  return out;
}

/// Transposed convolution fixed at kernel 4x4, stride 2, pad 1: the one
/// configuration whose output is exactly (2H, 2W). Weight layout is
/// (C_in, C_out, 4, 4). Adjoint of the matching stride-2 convolution.
template <typename Scalar>
TensorPtr<Scalar> deconv2d(Tape<Scalar>* tape, const TensorPtr<Scalar>& x,
                           const TensorPtr<Scalar>& w, const TensorPtr<Scalar>& b) {
  const Shape& xs = x->shape;
  const Shape& ws = w->shape;
  require(ws.h == 4 && ws.w == 4, "deconv2d: kernel must be 4x4, got weight ", ws.str());
  require(xs.c == ws.n, "deconv2d: input channels ", xs.c, " != weight C_in ", ws.n, " (input ",
          xs.str(), ", weight ", ws.str(), ")");
  const int co = ws.c;
  require(b->shape == Shape(1, co, 1, 1), "deconv2d: bias shape ", b->shape.str(), " != 1x", co,
          "x1x1");
  const int oh = 2 * xs.h;
  const int ow = 2 * xs.w;

  auto out = make_tensor<Scalar>(Shape(xs.n, co, oh, ow));
  const std::int64_t m_total = std::int64_t(xs.n) * xs.h * xs.w;
  const std::int64_t taps = std::int64_t(co) * 16;

  MatrixX<Scalar> xr(xs.c, m_total);
  {
    const Scalar* xv = x->values.data();
    std::int64_t m = 0;
    for (int n = 0; n < xs.n; ++n)
      for (int iy = 0; iy < xs.h; ++iy)
        for (int ix = 0; ix < xs.w; ++ix, ++m)
          for (int ci = 0; ci < xs.c; ++ci)
            xr(ci, m) = xv[((std::int64_t(n) * xs.c + ci) * xs.h + iy) * xs.w + ix];
  }
  detail::ConstRowMajorMap<Scalar> wr(w->values.data(), xs.c, taps);
  MatrixX<Scalar> out_col(taps, m_total);
  out_col.noalias() = wr.transpose() * xr;

  Scalar* ov = out->values.data();
  {
    std::int64_t m = 0;
    for (int n = 0; n < xs.n; ++n)
      for (int iy = 0; iy < xs.h; ++iy)
        for (int ix = 0; ix < xs.w; ++ix, ++m) {
          const Scalar* cm = out_col.data() + m * taps;
          for (int c = 0; c < co; ++c)
            for (int ky = 0; ky < 4; ++ky) {
              const int oy = 2 * iy - 1 + ky;
              if (oy < 0 || oy >= oh) continue;
              for (int kx = 0; kx < 4; ++kx) {
                const int ox = 2 * ix - 1 + kx;
                if (ox < 0 || ox >= ow) continue;
                ov[((std::int64_t(n) * co + c) * oh + oy) * ow + ox] += cm[(c * 4 + ky) * 4 + kx];
              }
            }
        }
  }
  const Scalar* bv = b->values.data();
  const std::int64_t ohw = std::int64_t(oh) * ow;
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < co; ++c) {
      Scalar* dst = ov + (std::int64_t(n) * co + c) * ohw;
      for (std::int64_t j = 0; j < ohw; ++j) dst[j] += bv[c];
    }

  if (detail::wants_tape(tape, {x.get(), w.get(), b.get()})) {
    out->requires_grad = true;
    tape->record([x, w, b, out]() {
      if (!out->has_grad()) return;
      const Shape& xs = x->shape;
      const int co = w->shape.c;
      const int oh = out->shape.h;
      const int ow = out->shape.w;
      const std::int64_t m_total = std::int64_t(xs.n) * xs.h * xs.w;
      const std::int64_t taps = std::int64_t(co) * 16;
      const Scalar* gv = out->grad.data();
      MatrixX<Scalar> dout_col(taps, m_total);
      std::int64_t m = 0;
      for (int n = 0; n < xs.n; ++n)
        for (int iy = 0; iy < xs.h; ++iy)
          for (int ix = 0; ix < xs.w; ++ix, ++m) {
            Scalar* cm = dout_col.data() + m * taps;
            for (int c = 0; c < co; ++c)
              for (int ky = 0; ky < 4; ++ky) {
                const int oy = 2 * iy - 1 + ky;
                const bool row_ok = oy >= 0 && oy < oh;
                for (int kx = 0; kx < 4; ++kx) {
                  const int ox = 2 * ix - 1 + kx;
                  cm[(c * 4 + ky) * 4 + kx] =
                      (row_ok && ox >= 0 && ox < ow)
                          ? gv[((std::int64_t(n) * co + c) * oh + oy) * ow + ox]
                          : Scalar(0);
                }
              }
          }
      MatrixX<Scalar> xr(xs.c, m_total);
      {
        const Scalar* xv = x->values.data();
        std::int64_t mm = 0;
        for (int n = 0; n < xs.n; ++n)
          for (int iy = 0; iy < xs.h; ++iy)
            for (int ix = 0; ix < xs.w; ++ix, ++mm)
              for (int ci = 0; ci < xs.c; ++ci)
                xr(ci, mm) = xv[((std::int64_t(n) * xs.c + ci) * xs.h + iy) * xs.w + ix];
      }
      w->ensure_grad();
      detail::RowMajorMap<Scalar> gw(w->grad.data(), xs.c, taps);
      gw.noalias() += xr * dout_col.transpose();
      b->ensure_grad();
      const std::int64_t ohw = std::int64_t(oh) * ow;
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < co; ++c) {
          const Scalar* src = gv + (std::int64_t(n) * co + c) * ohw;
          Scalar acc(0);
          for (std::int64_t j = 0; j < ohw; ++j) acc += src[j];
          b->grad[c] += acc;
        }
      x->ensure_grad();
      detail::ConstRowMajorMap<Scalar> wr(w->values.data(), xs.c, taps);
      MatrixX<Scalar> dx(xs.c, m_total);
      dx.noalias() = wr * dout_col;
      Scalar* xg = x->grad.data();
      std::int64_t mm = 0;
      for (int n = 0; n < xs.n; ++n)
        for (int iy = 0; iy < xs.h; ++iy)
          for (int ix = 0; ix < xs.w; ++ix, ++mm)
            for (int ci = 0; ci < xs.c; ++ci)
              xg[((std::int64_t(n) * xs.c + ci) * xs.h + iy) * xs.w + ix] += dx(ci, mm);
    });
  }
  return out;
}

enum class Activation { relu, sigmoid };

template <typename Scalar>
TensorPtr<Scalar> activation(Tape<Scalar>* tape, const TensorPtr<Scalar>& x, Activation kind) {
  auto out = make_tensor<Scalar>(x->shape);
  if (kind == Activation::relu) {
    out->values = x->values.max(Scalar(0));
    if (tape && tape->track_kink_margin && x->values.size() > 0)
      tape->note_kink_margin(double(x->values.abs().minCoeff()));
  } else {
    // Stable sigmoid, clamped one ulp inside (0, 1) so the open-range
    // contract holds even where Scalar would round to exactly 0 or 1.
    const Scalar lo = std::numeric_limits<Scalar>::min();
    const Scalar hi = Scalar(1) - std::numeric_limits<Scalar>::epsilon() / Scalar(2);
    const std::int64_t total = x->values.size();
    for (std::int64_t i = 0; i < total; ++i) {
      const Scalar v = x->values[i];
      Scalar s;
      if (v >= Scalar(0)) {
        s = Scalar(1) / (Scalar(1) + std::exp(-v));
      } else {
        const Scalar e = std::exp(v);
        s = e / (Scalar(1) + e);
      }
      out->values[i] = std::min(hi, std::max(lo, s));
    }
  }
  if (detail::wants_tape(tape, {x.get()})) {
    out->requires_grad = true;
    tape->record([x, out, kind]() {
      if (!out->has_grad()) return;
      x->ensure_grad();
      if (kind == Activation::relu)
        x->grad += (x->values > Scalar(0)).template cast<Scalar>() * out->grad;
      else
        x->grad += out->grad * out->values * (Scalar(1) - out->values);
    });
  }
  return out;
}

template <typename Scalar>
TensorPtr<Scalar> relu(Tape<Scalar>* tape, const TensorPtr<Scalar>& x) {
  return activation(tape, x, Activation::relu);
}

template <typename Scalar>
TensorPtr<Scalar> sigmoid(Tape<Scalar>* tape, const TensorPtr<Scalar>& x) {
  return activation(tape, x, Activation::sigmoid);
}

/// Junction op: a * (b + eta). b may be single-channel, in which case it is
/// broadcast over a's channels. Spatial and batch dims must match exactly.
template <typename Scalar>
TensorPtr<Scalar> eltwise_mul_add(Tape<Scalar>* tape, const TensorPtr<Scalar>& a,
                                  const TensorPtr<Scalar>& b, Scalar eta) {
  const Shape& as = a->shape;
  const Shape& bs = b->shape;
  require(as.n == bs.n, "eltwise_mul_add: batch mismatch ", as.str(), " vs ", bs.str());
  require(as.h == bs.h && as.w == bs.w, "eltwise_mul_add: spatial mismatch ", as.str(), " vs ",
          bs.str());
  require(bs.c == 1 || bs.c == as.c, "eltwise_mul_add: channels ", bs.c,
          " not broadcastable to ", as.c);
  const bool bcast = bs.c == 1 && as.c != 1;

  auto out = make_tensor<Scalar>(as);
  const std::int64_t hw = as.spatial();
  for (int n = 0; n < as.n; ++n)
    for (int c = 0; c < as.c; ++c) {
      const std::int64_t ao = (std::int64_t(n) * as.c + c) * hw;
      const std::int64_t bo = (std::int64_t(n) * bs.c + (bcast ? 0 : c)) * hw;
      out->values.segment(ao, hw) =
          a->values.segment(ao, hw) * (b->values.segment(bo, hw) + eta);
    }

  if (detail::wants_tape(tape, {a.get(), b.get()})) {
    out->requires_grad = true;
    tape->record([a, b, out, eta, bcast]() {
      if (!out->has_grad()) return;
      const Shape& as = a->shape;
      const Shape& bs = b->shape;
      const std::int64_t hw = as.spatial();
      a->ensure_grad();
      b->ensure_grad();
      for (int n = 0; n < as.n; ++n)
        for (int c = 0; c < as.c; ++c) {
          const std::int64_t ao = (std::int64_t(n) * as.c + c) * hw;
          const std::int64_t bo = (std::int64_t(n) * bs.c + (bcast ? 0 : c)) * hw;
          a->grad.segment(ao, hw) +=
              out->grad.segment(ao, hw) * (b->values.segment(bo, hw) + eta);
          b->grad.segment(bo, hw) += out->grad.segment(ao, hw) * a->values.segment(ao, hw);
        }
    });
  }
  return out;
}

template <typename Scalar>
TensorPtr<Scalar> avg_pool_2x2(Tape<Scalar>* tape, const TensorPtr<Scalar>& x) {
  const Shape& xs = x->shape;
  require(xs.h % 2 == 0 && xs.w % 2 == 0, "avg_pool_2x2: spatial dims must be even, got ",
          xs.str());
  auto out = make_tensor<Scalar>(Shape(xs.n, xs.c, xs.h / 2, xs.w / 2));
  const Scalar* xv = x->values.data();
  Scalar* ov = out->values.data();
  const int oh = xs.h / 2, ow = xs.w / 2;
  std::int64_t o = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const Scalar* plane = xv + (std::int64_t(n) * xs.c + c) * xs.h * xs.w;
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx, ++o) {
          const Scalar* p = plane + std::int64_t(2 * y) * xs.w + 2 * xx;
          ov[o] = (p[0] + p[1] + p[xs.w] + p[xs.w + 1]) * Scalar(0.25);
        }
    }
  if (detail::wants_tape(tape, {x.get()})) {
    out->requires_grad = true;
    tape->record([x, out]() {
      if (!out->has_grad()) return;
      x->ensure_grad();
      const Shape& xs = x->shape;
      const int oh = xs.h / 2, ow = xs.w / 2;
      Scalar* xg = x->grad.data();
      const Scalar* og = out->grad.data();
      std::int64_t o = 0;
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
          Scalar* plane = xg + (std::int64_t(n) * xs.c + c) * xs.h * xs.w;
          for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx, ++o) {
              const Scalar g = og[o] * Scalar(0.25);
              Scalar* p = plane + std::int64_t(2 * y) * xs.w + 2 * xx;
              p[0] += g;
              p[1] += g;
              p[xs.w] += g;
              p[xs.w + 1] += g;
            }
        }
    });
  }
  return out;
}

/// Window-wise max; the gradient routes to the argmax, ties broken by the
/// first element in row-major window order.
template <typename Scalar>
TensorPtr<Scalar> max_pool_2x2(Tape<Scalar>* tape, const TensorPtr<Scalar>& x) {
  const Shape& xs = x->shape;
  require(xs.h % 2 == 0 && xs.w % 2 == 0, "max_pool_2x2: spatial dims must be even, got ",
          xs.str());
  auto out = make_tensor<Scalar>(Shape(xs.n, xs.c, xs.h / 2, xs.w / 2));
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out->shape.numel());
  const Scalar* xv = x->values.data();
  Scalar* ov = out->values.data();
  const int oh = xs.h / 2, ow = xs.w / 2;
  double margin = std::numeric_limits<double>::infinity();
  std::int64_t o = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const std::int64_t base = (std::int64_t(n) * xs.c + c) * xs.h * xs.w;
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx, ++o) {
          const std::int64_t i0 = base + std::int64_t(2 * y) * xs.w + 2 * xx;
          const std::int64_t idx[4] = {i0, i0 + 1, i0 + xs.w, i0 + xs.w + 1};
          std::int64_t best = idx[0];
          Scalar bv = xv[best];
          Scalar second = -std::numeric_limits<Scalar>::infinity();
          for (int t = 1; t < 4; ++t) {
            const Scalar v = xv[idx[t]];
            if (v > bv) {
              second = bv;
              bv = v;
              best = idx[t];
            } else if (v > second) {
              second = v;
            }
          }
          ov[o] = bv;
          (*argmax)[o] = best;
          margin = std::min(margin, double(bv - second));
        }
    }
  if (tape && tape->track_kink_margin) tape->note_kink_margin(margin);
  if (detail::wants_tape(tape, {x.get()})) {
    out->requires_grad = true;
    tape->record([x, out, argmax]() {
      if (!out->has_grad()) return;
      x->ensure_grad();
      for (std::int64_t o = 0; o < out->grad.size(); ++o) x->grad[(*argmax)[o]] += out->grad[o];
    });
  }
  return out;
}

template <typename Scalar>
TensorPtr<Scalar> global_avg_pool(Tape<Scalar>* tape, const TensorPtr<Scalar>& x) {
  const Shape& xs = x->shape;
  auto out = make_tensor<Scalar>(Shape(xs.n, xs.c, 1, 1));
  const std::int64_t hw = xs.spatial();
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c)
      out->values[std::int64_t(n) * xs.c + c] =
          x->values.segment((std::int64_t(n) * xs.c + c) * hw, hw).mean();
  if (detail::wants_tape(tape, {x.get()})) {
    out->requires_grad = true;
    tape->record([x, out]() {
      if (!out->has_grad()) return;
      x->ensure_grad();
      const Shape& xs = x->shape;
      const std::int64_t hw = xs.spatial();
      const Scalar inv = Scalar(1) / Scalar(hw);
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c)
          x->grad.segment((std::int64_t(n) * xs.c + c) * hw, hw) +=
              out->grad[std::int64_t(n) * xs.c + c] * inv;
    });
  }
  return out;
}

/// Fully connected head: input (N, C, 1, 1), weight (K, C, 1, 1), bias
/// (1, K, 1, 1) -> (N, K, 1, 1).
template <typename Scalar>
TensorPtr<Scalar> linear(Tape<Scalar>* tape, const TensorPtr<Scalar>& x,
                         const TensorPtr<Scalar>& w, const TensorPtr<Scalar>& b) {
  const Shape& xs = x->shape;
  const Shape& ws = w->shape;
  require(xs.h == 1 && xs.w == 1, "linear: input spatial dims must be 1x1, got ", xs.str());
  require(ws.h == 1 && ws.w == 1, "linear: weight must be KxCx1x1, got ", ws.str());
  require(xs.c == ws.c, "linear: input channels ", xs.c, " != weight columns ", ws.c);
  const int kk = ws.n;
  require(b->shape == Shape(1, kk, 1, 1), "linear: bias shape ", b->shape.str(), " != 1x", kk,
          "x1x1");

  auto out = make_tensor<Scalar>(Shape(xs.n, kk, 1, 1));
  detail::ConstRowMajorMap<Scalar> xm(x->values.data(), xs.n, xs.c);
  detail::ConstRowMajorMap<Scalar> wm(w->values.data(), kk, xs.c);
  detail::RowMajorMap<Scalar> om(out->values.data(), xs.n, kk);
  om.noalias() = xm * wm.transpose();
  for (int n = 0; n < xs.n; ++n)
    for (int j = 0; j < kk; ++j) out->values[std::int64_t(n) * kk + j] += b->values[j];

  if (detail::wants_tape(tape, {x.get(), w.get(), b.get()})) {
    out->requires_grad = true;
    tape->record([x, w, b, out]() {
      if (!out->has_grad()) return;
      const Shape& xs = x->shape;
      const int kk = w->shape.n;
      detail::ConstRowMajorMap<Scalar> dy(out->grad.data(), xs.n, kk);
      detail::ConstRowMajorMap<Scalar> xm(x->values.data(), xs.n, xs.c);
      detail::ConstRowMajorMap<Scalar> wm(w->values.data(), kk, xs.c);
      w->ensure_grad();
      detail::RowMajorMap<Scalar> gw(w->grad.data(), kk, xs.c);
      gw.noalias() += dy.transpose() * xm;
      x->ensure_grad();
      detail::RowMajorMap<Scalar> gx(x->grad.data(), xs.n, xs.c);
      gx.noalias() += dy * wm;
      b->ensure_grad();
      for (int n = 0; n < xs.n; ++n)
        for (int j = 0; j < kk; ++j) b->grad[j] += out->grad[std::int64_t(n) * kk + j];
    });
  }
  return out;
}

/// Mean over the batch of -log softmax(logits)[label], stabilized by
/// max-subtraction. Returns a 1x1x1x1 scalar tensor.
template <typename Scalar>
TensorPtr<Scalar> softmax_cross_entropy(Tape<Scalar>* tape, const TensorPtr<Scalar>& logits,
                                        const std::vector<int>& labels) {
  const Shape& ls = logits->shape;
  require(ls.h == 1 && ls.w == 1, "softmax_cross_entropy: logits must be NxKx1x1, got ",
          ls.str());
  require(int(labels.size()) == ls.n, "softmax_cross_entropy: ", labels.size(), " labels for ",
          ls.n, " rows");
  const int kk = ls.c;
  for (int n = 0; n < ls.n; ++n)
    require(labels[n] >= 0 && labels[n] < kk, "softmax_cross_entropy: label ", labels[n],
            " out of range [0,", kk, ") at row ", n);

  auto probs = std::make_shared<MatrixX<Scalar>>(ls.n, kk);
  Scalar loss_acc(0);
  for (int n = 0; n < ls.n; ++n) {
    const Scalar* row = logits->values.data() + std::int64_t(n) * kk;
    Scalar mx = row[0];
    for (int j = 1; j < kk; ++j) mx = std::max(mx, row[j]);
    Scalar z(0);
    for (int j = 0; j < kk; ++j) {
      const Scalar e = std::exp(row[j] - mx);
      (*probs)(n, j) = e;
      z += e;
    }
    for (int j = 0; j < kk; ++j) (*probs)(n, j) /= z;
    loss_acc -= (row[labels[n]] - mx) - std::log(z);
  }
  auto out = make_tensor<Scalar>(Shape(1, 1, 1, 1));
  out->values[0] = loss_acc / Scalar(ls.n);

  if (detail::wants_tape(tape, {logits.get()})) {
    out->requires_grad = true;
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    tape->record([logits, out, probs, labels_copy]() {
      if (!out->has_grad()) return;
      logits->ensure_grad();
      const Shape& ls = logits->shape;
      const int kk = ls.c;
      const Scalar g = out->grad[0] / Scalar(ls.n);
      for (int n = 0; n < ls.n; ++n) {
        Scalar* dst = logits->grad.data() + std::int64_t(n) * kk;
        for (int j = 0; j < kk; ++j)
          dst[j] += g * ((*probs)(n, j) - Scalar(j == (*labels_copy)[n] ? 1 : 0));
      }
    });
  }
  return out;
}

template <typename Scalar>
TensorPtr<Scalar> add(Tape<Scalar>* tape, const TensorPtr<Scalar>& a, const TensorPtr<Scalar>& b) {
  require(a->shape == b->shape, "add: shape mismatch ", a->shape.str(), " vs ", b->shape.str());
  auto out = make_tensor<Scalar>(a->shape);
  out->values = a->values + b->values;
  if (detail::wants_tape(tape, {a.get(), b.get()})) {
    out->requires_grad = true;
    tape->record([a, b, out]() {
      if (!out->has_grad()) return;
      a->ensure_grad();
      a->grad += out->grad;
      b->ensure_grad();
      b->grad += out->grad;
    });
  }
  return out;
}

template <typename Scalar>
TensorPtr<Scalar> scale(Tape<Scalar>* tape, const TensorPtr<Scalar>& x, Scalar factor) {
  auto out = make_tensor<Scalar>(x->shape);
  out->values = x->values * factor;
  if (detail::wants_tape(tape, {x.get()})) {
    out->requires_grad = true;
    tape->record([x, out, factor]() {
      if (!out->has_grad()) return;
      x->ensure_grad();
      x->grad += out->grad * factor;
    });
  }
  return out;
}

/// Nearest-neighbor 2x upsampling (parameter-free).
template <typename Scalar>
TensorPtr<Scalar> nn_upsample_2x(Tape<Scalar>* tape, const TensorPtr<Scalar>& x) {
  const Shape& xs = x->shape;
  auto out = make_tensor<Scalar>(Shape(xs.n, xs.c, 2 * xs.h, 2 * xs.w));
  const Scalar* xv = x->values.data();
  Scalar* ov = out->values.data();
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const Scalar* ip = xv + (std::int64_t(n) * xs.c + c) * xs.h * xs.w;
      Scalar* op = ov + (std::int64_t(n) * xs.c + c) * 4 * xs.h * xs.w;
      for (int y = 0; y < xs.h; ++y)
        for (int xx = 0; xx < xs.w; ++xx) {
          const Scalar v = ip[std::int64_t(y) * xs.w + xx];
          Scalar* q = op + std::int64_t(2 * y) * 2 * xs.w + 2 * xx;
          q[0] = v;
          q[1] = v;
          q[2 * xs.w] = v;
          q[2 * xs.w + 1] = v;
        }
    }
  if (detail::wants_tape(tape, {x.get()})) {
    out->requires_grad = true;
    tape->record([x, out]() {
      if (!out->has_grad()) return;
      x->ensure_grad();
      const Shape& xs = x->shape;
      const Scalar* og = out->grad.data();
      Scalar* xg = x->grad.data();
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
          Scalar* ip = xg + (std::int64_t(n) * xs.c + c) * xs.h * xs.w;
          const Scalar* op = og + (std::int64_t(n) * xs.c + c) * 4 * xs.h * xs.w;
          for (int y = 0; y < xs.h; ++y)
            for (int xx = 0; xx < xs.w; ++xx) {
              const Scalar* q = op + std::int64_t(2 * y) * 2 * xs.w + 2 * xx;
              ip[std::int64_t(y) * xs.w + xx] += q[0] + q[1] + q[2 * xs.w] + q[2 * xs.w + 1];
            }
        }
    });
  }
  return out;
}

template <typename Scalar>
TensorPtr<Scalar> concat_channels(Tape<Scalar>* tape, const std::vector<TensorPtr<Scalar>>& xs) {
  require(!xs.empty(), "concat_channels: no inputs");
  const Shape& s0 = xs.front()->shape;
  int c_total = 0;
  bool rec_any = false;
  for (const auto& t : xs) {
    require(t->shape.n == s0.n && t->shape.h == s0.h && t->shape.w == s0.w,
            "concat_channels: incompatible shapes ", s0.str(), " vs ", t->shape.str());
    c_total += t->shape.c;
    rec_any = rec_any || t->requires_grad;
  }
  auto out = make_tensor<Scalar>(Shape(s0.n, c_total, s0.h, s0.w));
  const std::int64_t hw = s0.spatial();
  for (int n = 0; n < s0.n; ++n) {
    std::int64_t off = 0;
    for (const auto& t : xs) {
      const std::int64_t len = std::int64_t(t->shape.c) * hw;
      out->values.segment((std::int64_t(n) * c_total) * hw + off, len) =
          t->values.segment(std::int64_t(n) * t->shape.c * hw, len);
      off += len;
    }
  }
  if (tape && rec_any) {
    out->requires_grad = true;
    auto inputs = std::make_shared<std::vector<TensorPtr<Scalar>>>(xs);
    tape->record([inputs, out, c_total, hw]() {
      if (!out->has_grad()) return;
      const int nb = out->shape.n;
      for (int n = 0; n < nb; ++n) {
        std::int64_t off = 0;
        for (const auto& t : *inputs) {
          t->ensure_grad();
          const std::int64_t len = std::int64_t(t->shape.c) * hw;
          t->grad.segment(std::int64_t(n) * t->shape.c * hw, len) +=
              out->grad.segment((std::int64_t(n) * c_total) * hw + off, len);
          off += len;
        }
      }
    });
  }
  return out;
}

/// dot(x, weights) as a scalar tensor; handy for reducing an op output to a
/// scalar objective.
template <typename Scalar>
TensorPtr<Scalar> weighted_sum(Tape<Scalar>* tape, const TensorPtr<Scalar>& x,
                               const ArrayX<Scalar>& weights) {
  require(weights.size() == x->values.size(), "weighted_sum: weight count ", weights.size(),
          " != element count ", x->values.size());
  auto out = make_tensor<Scalar>(Shape(1, 1, 1, 1));
  out->values[0] = (x->values * weights).sum();
  if (detail::wants_tape(tape, {x.get()})) {
    out->requires_grad = true;
    auto wcopy = std::make_shared<ArrayX<Scalar>>(weights);
    tape->record([x, out, wcopy]() {
      if (!out->has_grad()) return;
      x->ensure_grad();
      x->grad += out->grad[0] * (*wcopy);
    });
  }
  return out;
}

}  // namespace tdaf
