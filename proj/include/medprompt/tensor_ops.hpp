#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include "medprompt/tensor.hpp"

namespace medprompt {

template <typename Scalar>
using MatRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MapRM = Eigen::Map<MatRM<Scalar>>;
template <typename Scalar>
using CMapRM = Eigen::Map<const MatRM<Scalar>>;

struct Conv2dSpec {
  Index stride = 1;
  Index padding = 0;
  Index groups = 1;
};

struct ConvDims {
  Index n, cin, h, w, cout, cin_g, cout_g, kh, kw, ho, wo;
};

inline ConvDims conv_dims(const Shape& x, const Shape& w, const Conv2dSpec& spec) {
  check(x.size() == 4, "conv2d: input must be NCHW, got ", shape_str(x));
  check(w.size() == 4, "conv2d: weight must be OIkk, got ", shape_str(w));
  check(spec.stride >= 1, "conv2d: stride must be >= 1, got ", spec.stride);
  check(spec.padding >= 0, "conv2d: padding must be >= 0, got ", spec.padding);
  check(spec.groups >= 1, "conv2d: groups must be >= 1, got ", spec.groups);
  ConvDims d;
  d.n = x[0];
  d.cin = x[1];
  d.h = x[2];
  d.w = x[3];
  d.cout = w[0];
  d.kh = w[2];
  d.kw = w[3];
  check(d.cin % spec.groups == 0, "conv2d: input channels ", d.cin, " not divisible by groups ",
        spec.groups);
  check(d.cout % spec.groups == 0, "conv2d: output channels ", d.cout,
        " not divisible by groups ", spec.groups);
  d.cin_g = d.cin / spec.groups;
  d.cout_g = d.cout / spec.groups;
  check(w[1] == d.cin_g, "conv2d: weight input-channel extent ", w[1], " != input channels ",
        d.cin, " / groups ", spec.groups);
  d.ho = (d.h + 2 * spec.padding - d.kh) / spec.stride + 1;
  d.wo = (d.w + 2 * spec.padding - d.kw) / spec.stride + 1;
  check(d.h + 2 * spec.padding >= d.kh && d.w + 2 * spec.padding >= d.kw,
        "conv2d: kernel ", d.kh, "x", d.kw, " larger than padded input ",
        d.h + 2 * spec.padding, "x", d.w + 2 * spec.padding);
  return d;
}

namespace detail {

// Unpacks one (n, group) input slice into a (cin_g*kh*kw) x (ho*wo) row-major patch matrix.
template <typename Scalar>
void im2col(const Scalar* x, const ConvDims& d, const Conv2dSpec& spec, Scalar* col) {
  const Index hw = d.h * d.w;
  const Index s = d.ho * d.wo;
  for (Index ci = 0; ci < d.cin_g; ++ci) {
    const Scalar* xc = x + ci * hw;
    for (Index ky = 0; ky < d.kh; ++ky) {
      for (Index kx = 0; kx < d.kw; ++kx) {
        Scalar* row = col + ((ci * d.kh + ky) * d.kw + kx) * s;
        const Index ox0 =
            spec.stride == 1 ? std::max<Index>(0, spec.padding - kx) : Index(0);
        const Index ox1 =
            spec.stride == 1 ? std::min<Index>(d.wo, d.w + spec.padding - kx) : Index(0);
        for (Index oy = 0; oy < d.ho; ++oy) {
          const Index iy = oy * spec.stride - spec.padding + ky;
          Scalar* out = row + oy * d.wo;
          if (iy < 0 || iy >= d.h) {
            std::fill(out, out + d.wo, Scalar(0));
            continue;
          }
          const Scalar* in = xc + iy * d.w;
          if (spec.stride == 1) {
            if (ox1 <= ox0) {
              std::fill(out, out + d.wo, Scalar(0));
              continue;
            }
            std::fill(out, out + ox0, Scalar(0));
            std::copy(in + ox0 - spec.padding + kx, in + ox1 - spec.padding + kx, out + ox0);
            std::fill(out + ox1, out + d.wo, Scalar(0));
            continue;
          }
          for (Index ox = 0; ox < d.wo; ++ox) {
            const Index ix = ox * spec.stride - spec.padding + kx;
            out[ox] = (ix >= 0 && ix < d.w) ? in[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

// Scatter-add inverse of im2col.
template <typename Scalar>
void col2im_add(const Scalar* col, const ConvDims& d, const Conv2dSpec& spec, Scalar* x) {
  const Index hw = d.h * d.w;
  const Index s = d.ho * d.wo;
  for (Index ci = 0; ci < d.cin_g; ++ci) {
    Scalar* xc = x + ci * hw;
    for (Index ky = 0; ky < d.kh; ++ky) {
      for (Index kx = 0; kx < d.kw; ++kx) {
        const Scalar* row = col + ((ci * d.kh + ky) * d.kw + kx) * s;
        for (Index oy = 0; oy < d.ho; ++oy) {
          const Index iy = oy * spec.stride - spec.padding + ky;
          if (iy < 0 || iy >= d.h) continue;
          Scalar* in = xc + iy * d.w;
          const Scalar* r = row + oy * d.wo;
          for (Index ox = 0; ox < d.wo; ++ox) {
            const Index ix = ox * spec.stride - spec.padding + kx;
            if (ix >= 0 && ix < d.w) in[ix] += r[ox];
          }
        }
      }
    }
  }
}

template <typename Scalar>
using VecMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
template <typename Scalar>
using CVecMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

// Stride-1 depthwise slice: one axpy per kernel tap over each valid row segment.
// yc must be zero-initialized.
template <typename Scalar>
void depthwise_s1(const Scalar* xc, const Scalar* wc, const ConvDims& d, Index pad,
                  Scalar* yc) {
  for (Index ky = 0; ky < d.kh; ++ky) {
    const Index oy0 = std::max<Index>(0, pad - ky);
    const Index oy1 = std::min<Index>(d.ho, d.h + pad - ky);
    for (Index kx = 0; kx < d.kw; ++kx) {
      const Scalar wv = wc[ky * d.kw + kx];
      const Index ox0 = std::max<Index>(0, pad - kx);
      const Index ox1 = std::min<Index>(d.wo, d.w + pad - kx);
      if (ox1 <= ox0) continue;
      const Index len = ox1 - ox0;
      for (Index oy = oy0; oy < oy1; ++oy) {
        const Index iy = oy - pad + ky;
        VecMap<Scalar>(yc + oy * d.wo + ox0, len) +=
            wv * CVecMap<Scalar>(xc + iy * d.w + ox0 - pad + kx, len);
      }
    }
  }
}

// Transpose of depthwise_s1: scatters dy back through the taps (dx) and takes
// per-tap dot products against the input (dw).
template <typename Scalar>
void depthwise_s1_backward(const Scalar* xc, const Scalar* wc, const Scalar* dyc,
                           const ConvDims& d, Index pad, bool need_dx, bool need_dw,
                           Scalar* dxc, Scalar* dwc) {
  for (Index ky = 0; ky < d.kh; ++ky) {
    const Index oy0 = std::max<Index>(0, pad - ky);
    const Index oy1 = std::min<Index>(d.ho, d.h + pad - ky);
    for (Index kx = 0; kx < d.kw; ++kx) {
      const Index ox0 = std::max<Index>(0, pad - kx);
      const Index ox1 = std::min<Index>(d.wo, d.w + pad - kx);
      if (ox1 <= ox0) continue;
      const Index len = ox1 - ox0;
      const Scalar wv = wc[ky * d.kw + kx];
      Scalar acc = 0;
      for (Index oy = oy0; oy < oy1; ++oy) {
        const Index iy = oy - pad + ky;
        CVecMap<Scalar> dyr(dyc + oy * d.wo + ox0, len);
        CVecMap<Scalar> xr(xc + iy * d.w + ox0 - pad + kx, len);
        if (need_dx)
          VecMap<Scalar>(dxc + iy * d.w + ox0 - pad + kx, len) += wv * dyr;
        if (need_dw) acc += (dyr * xr).sum();
      }
      if (need_dw) dwc[ky * d.kw + kx] += acc;
    }
  }
}

template <typename Scalar>
bool is_depthwise(const ConvDims& d, const Conv2dSpec& spec) {
  return spec.groups == d.cin && d.cin_g == 1 && d.cout == d.cin;
}

template <typename Scalar>
bool is_pointwise(const ConvDims& d, const Conv2dSpec& spec) {
  return d.kh == 1 && d.kw == 1 && spec.stride == 1 && spec.padding == 0 && spec.groups == 1;
}

}  // namespace detail

/// Cross-correlation convolution (no kernel flip), NCHW x OIkk.
/// 1x1 convolutions run as a single GEMM on the feature map; depthwise 3x3
/// runs as direct loops; everything else goes through im2col + GEMM.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                      const Tensor<Scalar>* bias, const Conv2dSpec& spec) {
  const ConvDims d = conv_dims(x.shape(), w.shape(), spec);
  if (bias && bias->defined()) {
    check(bias->rank() == 1 && bias->dim(0) == d.cout, "conv2d: bias extent ",
          shape_str(bias->shape()), " != output channels ", d.cout);
  }
  const bool dw_s1 = detail::is_depthwise<Scalar>(d, spec) && spec.stride == 1;
  Tensor<Scalar> y = dw_s1 ? Tensor<Scalar>::zeros({d.n, d.cout, d.ho, d.wo})
                           : Tensor<Scalar>::empty({d.n, d.cout, d.ho, d.wo});
  const Index s = d.ho * d.wo;

  if (detail::is_pointwise<Scalar>(d, spec)) {
    CMapRM<Scalar> wm(w.data(), d.cout, d.cin);
    for (Index n = 0; n < d.n; ++n) {
      CMapRM<Scalar> xm(x.data() + n * d.cin * s, d.cin, s);
      MapRM<Scalar> ym(y.data() + n * d.cout * s, d.cout, s);
      ym.noalias() = wm * xm;
    }
  } else if (detail::is_depthwise<Scalar>(d, spec) && spec.stride == 1) {
    for (Index n = 0; n < d.n; ++n)
      for (Index c = 0; c < d.cin; ++c)
        detail::depthwise_s1(x.data() + (n * d.cin + c) * d.h * d.w,
                             w.data() + c * d.kh * d.kw, d, spec.padding,
                             y.data() + (n * d.cout + c) * s);
  } else if (detail::is_depthwise<Scalar>(d, spec)) {
    for (Index n = 0; n < d.n; ++n) {
      for (Index c = 0; c < d.cin; ++c) {
        const Scalar* xc = x.data() + (n * d.cin + c) * d.h * d.w;
        const Scalar* wc = w.data() + c * d.kh * d.kw;
        Scalar* yc = y.data() + (n * d.cout + c) * s;
        for (Index oy = 0; oy < d.ho; ++oy) {
          for (Index ox = 0; ox < d.wo; ++ox) {
            Scalar acc = 0;
            for (Index ky = 0; ky < d.kh; ++ky) {
              const Index iy = oy * spec.stride - spec.padding + ky;
              if (iy < 0 || iy >= d.h) continue;
              for (Index kx = 0; kx < d.kw; ++kx) {
                const Index ix = ox * spec.stride - spec.padding + kx;
                if (ix < 0 || ix >= d.w) continue;
                acc += xc[iy * d.w + ix] * wc[ky * d.kw + kx];
              }
            }
            yc[oy * d.wo + ox] = acc;
          }
        }
      }
    }
  } else {
    const Index k = d.cin_g * d.kh * d.kw;
    std::vector<Scalar> col(static_cast<size_t>(k * s));
    for (Index n = 0; n < d.n; ++n) {
      for (Index g = 0; g < spec.groups; ++g) {
        const Scalar* xg = x.data() + (n * d.cin + g * d.cin_g) * d.h * d.w;
        detail::im2col(xg, d, spec, col.data());
        CMapRM<Scalar> wm(w.data() + g * d.cout_g * k, d.cout_g, k);
        CMapRM<Scalar> cm(col.data(), k, s);
        MapRM<Scalar> ym(y.data() + (n * d.cout + g * d.cout_g) * s, d.cout_g, s);
        ym.noalias() = wm * cm;
      }
    }
  }

  if (bias && bias->defined()) {
    for (Index n = 0; n < d.n; ++n) {
      for (Index c = 0; c < d.cout; ++c) {
        MapRM<Scalar> ym(y.data() + (n * d.cout + c) * s, 1, s);
        ym.array() += bias->data()[c];
      }
    }
  }
  return y;
}

template <typename Scalar>
struct Conv2dGrads {
  Tensor<Scalar> dx, dw, db;
};

/// Gradients of conv2d w.r.t. input, weight and (when present) bias.
/// Patch matrices are rebuilt here rather than saved by the forward pass.
template <typename Scalar>
Conv2dGrads<Scalar> conv2d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                                    bool has_bias, const Conv2dSpec& spec,
                                    const Tensor<Scalar>& dy, bool need_dx = true,
                                    bool need_dw = true) {
  const ConvDims d = conv_dims(x.shape(), w.shape(), spec);
  check(dy.shape() == Shape({d.n, d.cout, d.ho, d.wo}), "conv2d_backward: dy shape ",
        shape_str(dy.shape()), " != expected ", shape_str({d.n, d.cout, d.ho, d.wo}));
  Conv2dGrads<Scalar> g;
  const bool dx_as_conv = need_dx && spec.stride == 1 && d.kh == d.kw &&
                          spec.padding <= d.kh - 1 &&
                          !detail::is_pointwise<Scalar>(d, spec) &&
                          !detail::is_depthwise<Scalar>(d, spec);
  if (!dx_as_conv) g.dx = Tensor<Scalar>::zeros(x.shape());
  g.dw = Tensor<Scalar>::zeros(w.shape());
  const Index s = d.ho * d.wo;

  if (detail::is_pointwise<Scalar>(d, spec)) {
    CMapRM<Scalar> wm(w.data(), d.cout, d.cin);
    MapRM<Scalar> dwm(g.dw.data(), d.cout, d.cin);
    for (Index n = 0; n < d.n; ++n) {
      CMapRM<Scalar> xm(x.data() + n * d.cin * s, d.cin, s);
      CMapRM<Scalar> dym(dy.data() + n * d.cout * s, d.cout, s);
      MapRM<Scalar> dxm(g.dx.data() + n * d.cin * s, d.cin, s);
      if (need_dx) dxm.noalias() += wm.transpose() * dym;
      if (need_dw) dwm.noalias() += dym * xm.transpose();
    }
  } else if (detail::is_depthwise<Scalar>(d, spec) && spec.stride == 1) {
    for (Index n = 0; n < d.n; ++n)
      for (Index c = 0; c < d.cin; ++c)
        detail::depthwise_s1_backward(x.data() + (n * d.cin + c) * d.h * d.w,
                                      w.data() + c * d.kh * d.kw,
                                      dy.data() + (n * d.cout + c) * s, d, spec.padding,
                                      need_dx, need_dw,
                                      g.dx.data() + (n * d.cin + c) * d.h * d.w,
                                      g.dw.data() + c * d.kh * d.kw);
  } else if (detail::is_depthwise<Scalar>(d, spec)) {
    for (Index n = 0; n < d.n; ++n) {
      for (Index c = 0; c < d.cin; ++c) {
        const Scalar* xc = x.data() + (n * d.cin + c) * d.h * d.w;
        const Scalar* wc = w.data() + c * d.kh * d.kw;
        const Scalar* dyc = dy.data() + (n * d.cout + c) * s;
        Scalar* dxc = g.dx.data() + (n * d.cin + c) * d.h * d.w;
        Scalar* dwc = g.dw.data() + c * d.kh * d.kw;
        for (Index oy = 0; oy < d.ho; ++oy) {
          for (Index ox = 0; ox < d.wo; ++ox) {
            const Scalar go = dyc[oy * d.wo + ox];
            for (Index ky = 0; ky < d.kh; ++ky) {
              const Index iy = oy * spec.stride - spec.padding + ky;
              if (iy < 0 || iy >= d.h) continue;
              for (Index kx = 0; kx < d.kw; ++kx) {
                const Index ix = ox * spec.stride - spec.padding + kx;
                if (ix < 0 || ix >= d.w) continue;
                if (need_dx) dxc[iy * d.w + ix] += go * wc[ky * d.kw + kx];
                if (need_dw) dwc[ky * d.kw + kx] += go * xc[iy * d.w + ix];
              }
            }
          }
        }
      }
    }
  } else {
    // For stride-1 square kernels, dx is itself a convolution of dy with the
    // spatially flipped, in/out-transposed weights; that replaces the col2im
    // scatter with a gather + GEMM.
    if (dx_as_conv) {
      Tensor<Scalar> wt = Tensor<Scalar>::empty({d.cin, d.cout_g, d.kh, d.kw});
      const Index k2 = d.kh * d.kw;
      for (Index g2 = 0; g2 < spec.groups; ++g2)
        for (Index co = 0; co < d.cout_g; ++co)
          for (Index ci = 0; ci < d.cin_g; ++ci) {
            const Scalar* src = w.data() + ((g2 * d.cout_g + co) * d.cin_g + ci) * k2;
            Scalar* dst = wt.data() + ((g2 * d.cin_g + ci) * d.cout_g + co) * k2;
            for (Index t = 0; t < k2; ++t) dst[t] = src[k2 - 1 - t];
          }
      g.dx = conv2d<Scalar>(dy, wt, nullptr,
                            Conv2dSpec{1, d.kh - 1 - spec.padding, spec.groups});
    }
    const bool dx_via_col = need_dx && !dx_as_conv;
    if (need_dw || dx_via_col) {
      const Index k = d.cin_g * d.kh * d.kw;
      std::vector<Scalar> col(static_cast<size_t>(k * s));
      std::vector<Scalar> dcol(static_cast<size_t>(dx_via_col ? k * s : 0));
      for (Index n = 0; n < d.n; ++n) {
        for (Index g2 = 0; g2 < spec.groups; ++g2) {
          const Scalar* xg = x.data() + (n * d.cin + g2 * d.cin_g) * d.h * d.w;
          detail::im2col(xg, d, spec, col.data());
          CMapRM<Scalar> wm(w.data() + g2 * d.cout_g * k, d.cout_g, k);
          CMapRM<Scalar> cm(col.data(), k, s);
          CMapRM<Scalar> dym(dy.data() + (n * d.cout + g2 * d.cout_g) * s, d.cout_g, s);
          MapRM<Scalar> dwm(g.dw.data() + g2 * d.cout_g * k, d.cout_g, k);
          if (need_dw) dwm.noalias() += dym * cm.transpose();
          if (dx_via_col) {
            MapRM<Scalar> dcm(dcol.data(), k, s);
            dcm.noalias() = wm.transpose() * dym;
            detail::col2im_add(dcol.data(), d, spec,
                               g.dx.data() + (n * d.cin + g2 * d.cin_g) * d.h * d.w);
          }
        }
      }
    }
  }

  if (has_bias) {
    g.db = Tensor<Scalar>::zeros({d.cout});
    for (Index n = 0; n < d.n; ++n)
      for (Index c = 0; c < d.cout; ++c) {
        CMapRM<Scalar> dym(dy.data() + (n * d.cout + c) * s, 1, s);
        g.db.data()[c] += dym.sum();
      }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise

enum class EwOp { add, sub, mul, div, scalar_mul, scalar_add, clamp01, gelu };

inline const char* ew_name(EwOp op) {
  switch (op) {
    case EwOp::add: return "add";
    case EwOp::sub: return "sub";
    case EwOp::mul: return "mul";
    case EwOp::div: return "div";
    case EwOp::scalar_mul: return "scalar_mul";
    case EwOp::scalar_add: return "scalar_add";
    case EwOp::clamp01: return "clamp01";
    case EwOp::gelu: return "gelu";
  }
  return "?";
}

template <typename Scalar>
void check_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  check(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()), " vs ",
        shape_str(b.shape()));
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check_same_shape(a, b, "add");
  Tensor<Scalar> y = Tensor<Scalar>::empty(a.shape());
  y.array() = a.array() + b.array();
  return y;
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check_same_shape(a, b, "sub");
  Tensor<Scalar> y = Tensor<Scalar>::empty(a.shape());
  y.array() = a.array() - b.array();
  return y;
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check_same_shape(a, b, "mul");
  Tensor<Scalar> y = Tensor<Scalar>::empty(a.shape());
  y.array() = a.array() * b.array();
  return y;
}

template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check_same_shape(a, b, "div");
  Tensor<Scalar> y = Tensor<Scalar>::empty(a.shape());
  y.array() = a.array() / b.array();
  return y;
}

template <typename Scalar>
Tensor<Scalar> scalar_mul(const Tensor<Scalar>& a, Scalar s) {
  Tensor<Scalar> y = Tensor<Scalar>::empty(a.shape());
  y.array() = a.array() * s;
  return y;
}

template <typename Scalar>
Tensor<Scalar> scalar_add(const Tensor<Scalar>& a, Scalar s) {
  Tensor<Scalar> y = Tensor<Scalar>::empty(a.shape());
  y.array() = a.array() + s;
  return y;
}

template <typename Scalar>
Tensor<Scalar> clamp01(const Tensor<Scalar>& a) {
  Tensor<Scalar> y = Tensor<Scalar>::empty(a.shape());
  y.array() = a.array().min(Scalar(1)).max(Scalar(0));
  return y;
}

/// Gaussian-error-function GELU (vectorized erf; exact libm erf for double).
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& a) {
  Tensor<Scalar> y = Tensor<Scalar>::empty(a.shape());
  auto xa = a.array();
  y.array() = Scalar(0.5) * xa * (Scalar(1) + (xa * Scalar(M_SQRT1_2)).erf());
  return y;
}

template <typename Scalar>
Tensor<Scalar> gelu_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx = Tensor<Scalar>::empty(x.shape());
  const Scalar inv_sqrt2pi = Scalar(1) / std::sqrt(Scalar(2) * Scalar(M_PI));
  auto xa = x.array();
  dx.array() = dy.array() * (Scalar(0.5) * (Scalar(1) + (xa * Scalar(M_SQRT1_2)).erf()) +
                             xa * inv_sqrt2pi * (Scalar(-0.5) * xa.square()).exp());
  return dx;
}

/// Dispatcher matching the op-set contract. Binary ops take b; scalar ops take s.
template <typename Scalar>
Tensor<Scalar> elementwise(EwOp op, const Tensor<Scalar>& a, const Tensor<Scalar>* b,
                           Scalar s = Scalar(0)) {
  switch (op) {
    case EwOp::add: check(b, "add: missing operand"); return add(a, *b);
    case EwOp::sub: check(b, "sub: missing operand"); return sub(a, *b);
    case EwOp::mul: check(b, "mul: missing operand"); return mul(a, *b);
    case EwOp::div: check(b, "div: missing operand"); return div(a, *b);
    case EwOp::scalar_mul: return scalar_mul(a, s);
    case EwOp::scalar_add: return scalar_add(a, s);
    case EwOp::clamp01: return clamp01(a);
    case EwOp::gelu: return gelu(a);
  }
  fail("elementwise: unknown op");
}

// ---------------------------------------------------------------------------
// Softmax

struct AxisDims {
  Index outer, n, inner;
};

inline AxisDims axis_dims(const Shape& shape, Index axis) {
  check(axis >= 0 && axis < static_cast<Index>(shape.size()), "softmax_axis: axis ", axis,
        " out of range for rank ", shape.size());
  AxisDims d{1, shape[static_cast<size_t>(axis)], 1};
  for (Index i = 0; i < axis; ++i) d.outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) d.inner *= shape[i];
  return d;
}

/// Max-subtracted softmax along one axis.
template <typename Scalar>
Tensor<Scalar> softmax_axis(const Tensor<Scalar>& x, Index axis) {
  const AxisDims d = axis_dims(x.shape(), axis);
  Tensor<Scalar> y = Tensor<Scalar>::empty(x.shape());
  const Scalar* in = x.data();
  Scalar* out = y.data();
  for (Index o = 0; o < d.outer; ++o) {
    for (Index i = 0; i < d.inner; ++i) {
      const Index base = o * d.n * d.inner + i;
      Scalar m = in[base];
      for (Index j = 1; j < d.n; ++j) m = std::max(m, in[base + j * d.inner]);
      Scalar sum = 0;
      for (Index j = 0; j < d.n; ++j) {
        Scalar e = std::exp(in[base + j * d.inner] - m);
        out[base + j * d.inner] = e;
        sum += e;
      }
      for (Index j = 0; j < d.n; ++j) out[base + j * d.inner] /= sum;
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> softmax_backward(const Tensor<Scalar>& y, const Tensor<Scalar>& dy, Index axis) {
  const AxisDims d = axis_dims(y.shape(), axis);
  Tensor<Scalar> dx = Tensor<Scalar>::empty(y.shape());
  const Scalar* yv = y.data();
  const Scalar* g = dy.data();
  Scalar* out = dx.data();
  for (Index o = 0; o < d.outer; ++o) {
    for (Index i = 0; i < d.inner; ++i) {
      const Index base = o * d.n * d.inner + i;
      Scalar dot = 0;
      for (Index j = 0; j < d.n; ++j) dot += g[base + j * d.inner] * yv[base + j * d.inner];
      for (Index j = 0; j < d.n; ++j) {
        const Index k = base + j * d.inner;
        out[k] = yv[k] * (g[k] - dot);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Pooling / normalization

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  check(x.rank() == 4, "global_avg_pool: input must be NCHW, got ", shape_str(x.shape()));
  const Index hw = x.h() * x.w();
  Tensor<Scalar> y = Tensor<Scalar>::empty({x.n(), x.c(), 1, 1});
  for (Index nc = 0; nc < x.n() * x.c(); ++nc) {
    CMapRM<Scalar> m(x.data() + nc * hw, 1, hw);
    y.data()[nc] = m.sum() / Scalar(hw);
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool_backward(const Shape& x_shape, const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx = Tensor<Scalar>::empty(x_shape);
  const Index hw = x_shape[2] * x_shape[3];
  for (Index nc = 0; nc < x_shape[0] * x_shape[1]; ++nc) {
    MapRM<Scalar> m(dx.data() + nc * hw, 1, hw);
    m.array() = dy.data()[nc] / Scalar(hw);
  }
  return dx;
}

inline constexpr double kLayerNormEps = 1e-6;

/// Bias-free channel layer norm: per spatial position, normalize across C
/// then scale by gamma. Saves (xhat, inv_std) for the backward rule.
template <typename Scalar>
Tensor<Scalar> layer_norm_channels(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                                   Tensor<Scalar>* xhat_out = nullptr,
                                   Tensor<Scalar>* inv_std_out = nullptr) {
  check(x.rank() == 4, "layer_norm_channels: input must be NCHW, got ", shape_str(x.shape()));
  check(gamma.rank() == 1 && gamma.dim(0) == x.c(), "layer_norm_channels: gamma extent ",
        shape_str(gamma.shape()), " != channels ", x.c());
  const Index n = x.n(), c = x.c(), hw = x.h() * x.w();
  Tensor<Scalar> y = Tensor<Scalar>::empty(x.shape());
  Tensor<Scalar> xhat = Tensor<Scalar>::empty(x.shape());
  Tensor<Scalar> inv_std = Tensor<Scalar>::empty({n, 1, x.h(), x.w()});
  const Scalar* gm = gamma.data();
  Eigen::Array<Scalar, Eigen::Dynamic, 1> mean(hw), var(hw);
  for (Index b = 0; b < n; ++b) {
    const Scalar* xb = x.data() + b * c * hw;
    mean.setZero();
    for (Index ch = 0; ch < c; ++ch) mean += detail::CVecMap<Scalar>(xb + ch * hw, hw);
    mean /= Scalar(c);
    var.setZero();
    for (Index ch = 0; ch < c; ++ch)
      var += (detail::CVecMap<Scalar>(xb + ch * hw, hw) - mean).square();
    var /= Scalar(c);
    detail::VecMap<Scalar> istd(inv_std.data() + b * hw, hw);
    istd = (var + Scalar(kLayerNormEps)).sqrt().inverse();
    for (Index ch = 0; ch < c; ++ch) {
      detail::VecMap<Scalar> xh(xhat.data() + (b * c + ch) * hw, hw);
      xh = (detail::CVecMap<Scalar>(xb + ch * hw, hw) - mean) * istd;
      detail::VecMap<Scalar>(y.data() + (b * c + ch) * hw, hw) = xh * gm[ch];
    }
  }
  if (xhat_out) *xhat_out = xhat;
  if (inv_std_out) *inv_std_out = inv_std;
  return y;
}

template <typename Scalar>
struct LayerNormGrads {
  Tensor<Scalar> dx, dgamma;
};

template <typename Scalar>
LayerNormGrads<Scalar> layer_norm_channels_backward(const Tensor<Scalar>& xhat,
                                                    const Tensor<Scalar>& inv_std,
                                                    const Tensor<Scalar>& gamma,
                                                    const Tensor<Scalar>& dy) {
  const Index n = xhat.n(), c = xhat.c(), hw = xhat.h() * xhat.w();
  LayerNormGrads<Scalar> g;
  g.dx = Tensor<Scalar>::empty(xhat.shape());
  g.dgamma = Tensor<Scalar>::zeros(gamma.shape());
  const Scalar* gm = gamma.data();
  Eigen::Array<Scalar, Eigen::Dynamic, 1> s1(hw), s2(hw);
  for (Index b = 0; b < n; ++b) {
    const Scalar* xb = xhat.data() + b * c * hw;
    const Scalar* db = dy.data() + b * c * hw;
    s1.setZero();
    s2.setZero();
    for (Index ch = 0; ch < c; ++ch) {
      detail::CVecMap<Scalar> xr(xb + ch * hw, hw);
      detail::CVecMap<Scalar> dr(db + ch * hw, hw);
      s1 += dr * gm[ch];
      s2 += dr * gm[ch] * xr;
      g.dgamma.data()[ch] += (dr * xr).sum();
    }
    detail::CVecMap<Scalar> istd(inv_std.data() + b * hw, hw);
    for (Index ch = 0; ch < c; ++ch) {
      detail::CVecMap<Scalar> xr(xb + ch * hw, hw);
      detail::CVecMap<Scalar> dr(db + ch * hw, hw);
      detail::VecMap<Scalar>(g.dx.data() + (b * c + ch) * hw, hw) =
          istd * (dr * gm[ch] - (s1 + xr * s2) / Scalar(c));
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Resize / pixel shuffle / concat

namespace detail {

struct LerpTap {
  Index lo, hi;
  double frac;
};

// align_corners=false source coordinate: (i + 0.5) * in/out - 0.5, edge-clamped.
inline LerpTap lerp_tap(Index i, Index out_extent, Index in_extent) {
  double src = (static_cast<double>(i) + 0.5) * static_cast<double>(in_extent) /
                   static_cast<double>(out_extent) -
               0.5;
  double lo = std::floor(src);
  LerpTap t;
  t.frac = src - lo;
  t.lo = std::clamp(static_cast<Index>(lo), Index(0), in_extent - 1);
  t.hi = std::clamp(static_cast<Index>(lo) + 1, Index(0), in_extent - 1);
  return t;
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> bilinear_resize(const Tensor<Scalar>& x, Index out_h, Index out_w) {
  check(x.rank() == 4, "bilinear_resize: input must be NCHW, got ", shape_str(x.shape()));
  check(out_h >= 1 && out_w >= 1, "bilinear_resize: target extent must be >= 1");
  if (out_h == x.h() && out_w == x.w()) return x.clone();
  Tensor<Scalar> y = Tensor<Scalar>::empty({x.n(), x.c(), out_h, out_w});
  std::vector<detail::LerpTap> ty(static_cast<size_t>(out_h)), tx(static_cast<size_t>(out_w));
  for (Index i = 0; i < out_h; ++i) ty[static_cast<size_t>(i)] = detail::lerp_tap(i, out_h, x.h());
  for (Index i = 0; i < out_w; ++i) tx[static_cast<size_t>(i)] = detail::lerp_tap(i, out_w, x.w());
  const Index hw_in = x.h() * x.w();
  const Index hw_out = out_h * out_w;
  for (Index nc = 0; nc < x.n() * x.c(); ++nc) {
    const Scalar* in = x.data() + nc * hw_in;
    Scalar* out = y.data() + nc * hw_out;
    for (Index oy = 0; oy < out_h; ++oy) {
      const auto& v = ty[static_cast<size_t>(oy)];
      for (Index ox = 0; ox < out_w; ++ox) {
        const auto& u = tx[static_cast<size_t>(ox)];
        double top = (1.0 - u.frac) * in[v.lo * x.w() + u.lo] + u.frac * in[v.lo * x.w() + u.hi];
        double bot = (1.0 - u.frac) * in[v.hi * x.w() + u.lo] + u.frac * in[v.hi * x.w() + u.hi];
        out[oy * out_w + ox] = static_cast<Scalar>((1.0 - v.frac) * top + v.frac * bot);
      }
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> bilinear_resize_backward(const Shape& x_shape, const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx = Tensor<Scalar>::zeros(x_shape);
  const Index in_h = x_shape[2], in_w = x_shape[3];
  const Index out_h = dy.h(), out_w = dy.w();
  if (out_h == in_h && out_w == in_w) {
    dx.array() = dy.array();
    return dx;
  }
  std::vector<detail::LerpTap> ty(static_cast<size_t>(out_h)), tx(static_cast<size_t>(out_w));
  for (Index i = 0; i < out_h; ++i) ty[static_cast<size_t>(i)] = detail::lerp_tap(i, out_h, in_h);
  for (Index i = 0; i < out_w; ++i) tx[static_cast<size_t>(i)] = detail::lerp_tap(i, out_w, in_w);
  const Index hw_in = in_h * in_w;
  const Index hw_out = out_h * out_w;
  for (Index nc = 0; nc < x_shape[0] * x_shape[1]; ++nc) {
    Scalar* out = dx.data() + nc * hw_in;
    const Scalar* g = dy.data() + nc * hw_out;
    for (Index oy = 0; oy < out_h; ++oy) {
      const auto& v = ty[static_cast<size_t>(oy)];
      for (Index ox = 0; ox < out_w; ++ox) {
        const auto& u = tx[static_cast<size_t>(ox)];
        const Scalar go = g[oy * out_w + ox];
        out[v.lo * in_w + u.lo] += static_cast<Scalar>((1.0 - v.frac) * (1.0 - u.frac)) * go;
        out[v.lo * in_w + u.hi] += static_cast<Scalar>((1.0 - v.frac) * u.frac) * go;
        out[v.hi * in_w + u.lo] += static_cast<Scalar>(v.frac * (1.0 - u.frac)) * go;
        out[v.hi * in_w + u.hi] += static_cast<Scalar>(v.frac * u.frac) * go;
      }
    }
  }
  return dx;
}

/// Space-to-channels: NxCxHxW -> Nx(C*r^2)x(H/r)x(W/r).
/// Output channel c*r^2 + dy*r + dx holds input pixel (h*r+dy, w*r+dx).
template <typename Scalar>
Tensor<Scalar> pixel_shuffle_down(const Tensor<Scalar>& x, Index r) {
  check(x.rank() == 4, "pixel_shuffle_down: input must be NCHW");
  check(r >= 1, "pixel_shuffle_down: r must be >= 1");
  check(x.h() % r == 0 && x.w() % r == 0, "pixel_shuffle_down: spatial extents ", x.h(), "x",
        x.w(), " not divisible by r=", r);
  if (r == 1) return x.clone();
  const Index n = x.n(), c = x.c(), ho = x.h() / r, wo = x.w() / r;
  Tensor<Scalar> y = Tensor<Scalar>::empty({n, c * r * r, ho, wo});
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch)
      for (Index dy = 0; dy < r; ++dy)
        for (Index dx = 0; dx < r; ++dx) {
          const Index oc = (ch * r + dy) * r + dx;
          Scalar* out = y.data() + ((b * c * r * r + oc) * ho) * wo;
          const Scalar* in = x.data() + ((b * c + ch) * x.h() + dy) * x.w() + dx;
          for (Index oy = 0; oy < ho; ++oy)
            for (Index ox = 0; ox < wo; ++ox)
              out[oy * wo + ox] = in[oy * r * x.w() + ox * r];
        }
  return y;
}

/// Channels-to-space inverse of pixel_shuffle_down; up(down(x, r), r) == x bit-exactly.
template <typename Scalar>
Tensor<Scalar> pixel_shuffle_up(const Tensor<Scalar>& x, Index r) {
  check(x.rank() == 4, "pixel_shuffle_up: input must be NCHW");
  check(r >= 1, "pixel_shuffle_up: r must be >= 1");
  check(x.c() % (r * r) == 0, "pixel_shuffle_up: channels ", x.c(), " not divisible by r^2=",
        r * r);
  if (r == 1) return x.clone();
  const Index n = x.n(), co = x.c() / (r * r), ho = x.h() * r, wo = x.w() * r;
  Tensor<Scalar> y = Tensor<Scalar>::empty({n, co, ho, wo});
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < co; ++ch)
      for (Index dy = 0; dy < r; ++dy)
        for (Index dx = 0; dx < r; ++dx) {
          const Index ic = (ch * r + dy) * r + dx;
          const Scalar* in = x.data() + ((b * x.c() + ic) * x.h()) * x.w();
          Scalar* out = y.data() + ((b * co + ch) * ho + dy) * wo + dx;
          for (Index iy = 0; iy < x.h(); ++iy)
            for (Index ix = 0; ix < x.w(); ++ix)
              out[iy * r * wo + ix * r] = in[iy * x.w() + ix];
        }
  return y;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<Tensor<Scalar>>& xs) {
  check(!xs.empty(), "concat_channels: no inputs");
  const Tensor<Scalar>& first = xs.front();
  check(first.rank() == 4, "concat_channels: inputs must be NCHW");
  Index total_c = 0;
  for (const auto& x : xs) {
    check(x.rank() == 4 && x.n() == first.n() && x.h() == first.h() && x.w() == first.w(),
          "concat_channels: spatial/batch mismatch ", shape_str(x.shape()), " vs ",
          shape_str(first.shape()));
    total_c += x.c();
  }
  Tensor<Scalar> y = Tensor<Scalar>::empty({first.n(), total_c, first.h(), first.w()});
  const Index hw = first.h() * first.w();
  for (Index b = 0; b < first.n(); ++b) {
    Index off = 0;
    for (const auto& x : xs) {
      std::memcpy(y.data() + (b * total_c + off) * hw, x.data() + b * x.c() * hw,
                  sizeof(Scalar) * static_cast<size_t>(x.c() * hw));
      off += x.c();
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& x, Index begin, Index count) {
  check(x.rank() == 4, "slice_channels: input must be NCHW");
  check(begin >= 0 && count >= 1 && begin + count <= x.c(), "slice_channels: [", begin, ", ",
        begin + count, ") out of range for ", x.c(), " channels");
  Tensor<Scalar> y = Tensor<Scalar>::empty({x.n(), count, x.h(), x.w()});
  const Index hw = x.h() * x.w();
  for (Index b = 0; b < x.n(); ++b)
    std::memcpy(y.data() + b * count * hw, x.data() + (b * x.c() + begin) * hw,
                sizeof(Scalar) * static_cast<size_t>(count * hw));
  return y;
}

// ---------------------------------------------------------------------------
// Batched matrix product

template <typename Scalar>
Tensor<Scalar> matmul_batched(const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                              bool trans_a = false, bool trans_b = false) {
  check(a.rank() == 3 && b.rank() == 3, "matmul_batched: operands must be rank 3, got ",
        shape_str(a.shape()), " and ", shape_str(b.shape()));
  check(a.dim(0) == b.dim(0), "matmul_batched: batch extents differ: ", a.dim(0), " vs ",
        b.dim(0));
  const Index batch = a.dim(0);
  const Index m = trans_a ? a.dim(2) : a.dim(1);
  const Index ka = trans_a ? a.dim(1) : a.dim(2);
  const Index kb = trans_b ? b.dim(2) : b.dim(1);
  const Index l = trans_b ? b.dim(1) : b.dim(2);
  check(ka == kb, "matmul_batched: inner extents differ: ", ka, " vs ", kb);
  Tensor<Scalar> y = Tensor<Scalar>::empty({batch, m, l});
  for (Index i = 0; i < batch; ++i) {
    CMapRM<Scalar> am(a.data() + i * a.dim(1) * a.dim(2), a.dim(1), a.dim(2));
    CMapRM<Scalar> bm(b.data() + i * b.dim(1) * b.dim(2), b.dim(1), b.dim(2));
    MapRM<Scalar> ym(y.data() + i * m * l, m, l);
    if (!trans_a && !trans_b)
      ym.noalias() = am * bm;
    else if (trans_a && !trans_b)
      ym.noalias() = am.transpose() * bm;
    else if (!trans_a && trans_b)
      ym.noalias() = am * bm.transpose();
    else
      ym.noalias() = am.transpose() * bm.transpose();
  }
  return y;
}

template <typename Scalar>
struct MatmulGrads {
  Tensor<Scalar> da, db;
};

template <typename Scalar>
MatmulGrads<Scalar> matmul_batched_backward(const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                                            bool trans_a, bool trans_b,
                                            const Tensor<Scalar>& dy) {
  MatmulGrads<Scalar> g;
  g.da = Tensor<Scalar>::empty(a.shape());
  g.db = Tensor<Scalar>::empty(b.shape());
  const Index batch = a.dim(0);
  const Index m = dy.dim(1), l = dy.dim(2);
  for (Index i = 0; i < batch; ++i) {
    CMapRM<Scalar> am(a.data() + i * a.dim(1) * a.dim(2), a.dim(1), a.dim(2));
    CMapRM<Scalar> bm(b.data() + i * b.dim(1) * b.dim(2), b.dim(1), b.dim(2));
    CMapRM<Scalar> dym(dy.data() + i * m * l, m, l);
    MapRM<Scalar> dam(g.da.data() + i * a.dim(1) * a.dim(2), a.dim(1), a.dim(2));
    MapRM<Scalar> dbm(g.db.data() + i * b.dim(1) * b.dim(2), b.dim(1), b.dim(2));
    if (!trans_a && !trans_b) {
      dam.noalias() = dym * bm.transpose();
      dbm.noalias() = am.transpose() * dym;
    } else if (trans_a && !trans_b) {
      dam.noalias() = bm * dym.transpose();
      dbm.noalias() = am * dym;
    } else if (!trans_a && trans_b) {
      dam.noalias() = dym * bm;
      dbm.noalias() = dym.transpose() * am;
    } else {
      dam.noalias() = bm.transpose() * dym.transpose();
      dbm.noalias() = dym.transpose() * am.transpose();
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Row normalization / per-head scaling (attention helpers)

inline constexpr double kL2NormEps = 1e-12;

/// Rows of a BxRxS tensor scaled to unit L2 norm; eps inside the sqrt keeps
/// the map smooth at zero rows.
template <typename Scalar>
Tensor<Scalar> l2_normalize_rows(const Tensor<Scalar>& x, Tensor<Scalar>* inv_norm_out = nullptr) {
  check(x.rank() == 3, "l2_normalize_rows: input must be rank 3");
  const Index rows = x.dim(0) * x.dim(1), s = x.dim(2);
  Tensor<Scalar> y = Tensor<Scalar>::empty(x.shape());
  Tensor<Scalar> inv = Tensor<Scalar>::empty({x.dim(0), x.dim(1)});
  for (Index r = 0; r < rows; ++r) {
    CMapRM<Scalar> xm(x.data() + r * s, 1, s);
    const Scalar n = Scalar(1) / std::sqrt(xm.squaredNorm() + Scalar(kL2NormEps));
    inv.data()[r] = n;
    MapRM<Scalar> ym(y.data() + r * s, 1, s);
    ym = xm * n;
  }
  if (inv_norm_out) *inv_norm_out = inv;
  return y;
}

template <typename Scalar>
Tensor<Scalar> l2_normalize_rows_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& inv_norm,
                                          const Tensor<Scalar>& dy) {
  const Index rows = x.dim(0) * x.dim(1), s = x.dim(2);
  Tensor<Scalar> dx = Tensor<Scalar>::empty(x.shape());
  for (Index r = 0; r < rows; ++r) {
    CMapRM<Scalar> xm(x.data() + r * s, 1, s);
    CMapRM<Scalar> gm(dy.data() + r * s, 1, s);
    MapRM<Scalar> dm(dx.data() + r * s, 1, s);
    const Scalar inv = inv_norm.data()[r];
    const Scalar dot = (xm.array() * gm.array()).sum();
    dm = gm * inv - xm * (dot * inv * inv * inv);
  }
  return dx;
}

/// Multiplies batch slice b of an (N*heads)xMxL tensor by alpha[b % heads].
template <typename Scalar>
Tensor<Scalar> scale_per_head(const Tensor<Scalar>& x, const Tensor<Scalar>& alpha) {
  check(x.rank() == 3, "scale_per_head: input must be rank 3");
  check(alpha.rank() == 1, "scale_per_head: alpha must be rank 1");
  const Index heads = alpha.dim(0);
  check(x.dim(0) % heads == 0, "scale_per_head: batch ", x.dim(0), " not divisible by heads ",
        heads);
  Tensor<Scalar> y = Tensor<Scalar>::empty(x.shape());
  const Index sz = x.dim(1) * x.dim(2);
  for (Index b = 0; b < x.dim(0); ++b) {
    CMapRM<Scalar> xm(x.data() + b * sz, 1, sz);
    MapRM<Scalar> ym(y.data() + b * sz, 1, sz);
    ym = xm * alpha.data()[b % heads];
  }
  return y;
}

template <typename Scalar>
struct ScalePerHeadGrads {
  Tensor<Scalar> dx, dalpha;
};

template <typename Scalar>
ScalePerHeadGrads<Scalar> scale_per_head_backward(const Tensor<Scalar>& x,
                                                  const Tensor<Scalar>& alpha,
                                                  const Tensor<Scalar>& dy) {
  ScalePerHeadGrads<Scalar> g;
  g.dx = Tensor<Scalar>::empty(x.shape());
  g.dalpha = Tensor<Scalar>::zeros(alpha.shape());
  const Index heads = alpha.dim(0);
  const Index sz = x.dim(1) * x.dim(2);
  for (Index b = 0; b < x.dim(0); ++b) {
    CMapRM<Scalar> xm(x.data() + b * sz, 1, sz);
    CMapRM<Scalar> gm(dy.data() + b * sz, 1, sz);
    MapRM<Scalar> dm(g.dx.data() + b * sz, 1, sz);
    dm = gm * alpha.data()[b % heads];
    g.dalpha.data()[b % heads] += (xm.array() * gm.array()).sum();
  }
  return g;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Tensor<Scalar> mean_all(const Tensor<Scalar>& x) {
  return Tensor<Scalar>::scalar(x.array().sum() / Scalar(x.numel()));
}

template <typename Scalar>
Tensor<Scalar> mean_all_backward(const Shape& x_shape, const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx = Tensor<Scalar>::empty(x_shape);
  dx.array() = dy.item() / Scalar(numel_of(x_shape));
  return dx;
}

// ---------------------------------------------------------------------------
// Plain image transforms (data pipeline; never recorded)

template <typename Scalar>
Tensor<Scalar> flip_horizontal(const Tensor<Scalar>& x) {
  check(x.rank() == 4, "flip_horizontal: input must be NCHW");
  Tensor<Scalar> y = Tensor<Scalar>::zeros(x.shape());
  const Index hw = x.h() * x.w();
  for (Index nc = 0; nc < x.n() * x.c(); ++nc)
    for (Index r = 0; r < x.h(); ++r)
      for (Index col = 0; col < x.w(); ++col)
        y.data()[nc * hw + r * x.w() + col] = x.data()[nc * hw + r * x.w() + (x.w() - 1 - col)];
  return y;
}

template <typename Scalar>
Tensor<Scalar> flip_vertical(const Tensor<Scalar>& x) {
  check(x.rank() == 4, "flip_vertical: input must be NCHW");
  Tensor<Scalar> y = Tensor<Scalar>::zeros(x.shape());
  const Index hw = x.h() * x.w();
  for (Index nc = 0; nc < x.n() * x.c(); ++nc)
    for (Index r = 0; r < x.h(); ++r)
      std::memcpy(y.data() + nc * hw + r * x.w(),
                  x.data() + nc * hw + (x.h() - 1 - r) * x.w(),
                  sizeof(Scalar) * static_cast<size_t>(x.w()));
  return y;
}

/// Counter-clockwise quarter turns; odd k swaps H and W.
template <typename Scalar>
Tensor<Scalar> rotate90(const Tensor<Scalar>& x, Index k) {
  check(x.rank() == 4, "rotate90: input must be NCHW");
  k = ((k % 4) + 4) % 4;
  if (k == 0) return x.clone();
  if (k == 2) return flip_horizontal(flip_vertical(x));
  const Index h = x.h(), w = x.w();
  Tensor<Scalar> y = Tensor<Scalar>::zeros({x.n(), x.c(), w, h});
  for (Index nc = 0; nc < x.n() * x.c(); ++nc) {
    const Scalar* in = x.data() + nc * h * w;
    Scalar* out = y.data() + nc * h * w;
    for (Index r = 0; r < h; ++r)
      for (Index col = 0; col < w; ++col) {
        if (k == 1)
          out[(w - 1 - col) * h + r] = in[r * w + col];
        else
          out[col * h + (h - 1 - r)] = in[r * w + col];
      }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> crop(const Tensor<Scalar>& x, Index top, Index left, Index h, Index w) {
  check(x.rank() == 4, "crop: input must be NCHW");
  check(top >= 0 && left >= 0 && h >= 1 && w >= 1 && top + h <= x.h() && left + w <= x.w(),
        "crop: window out of range");
  Tensor<Scalar> y = Tensor<Scalar>::zeros({x.n(), x.c(), h, w});
  for (Index nc = 0; nc < x.n() * x.c(); ++nc)
    for (Index r = 0; r < h; ++r)
      std::memcpy(y.data() + (nc * h + r) * w,
                  x.data() + (nc * x.h() + top + r) * x.w() + left,
                  sizeof(Scalar) * static_cast<size_t>(w));
  return y;
}

}  // namespace medprompt
