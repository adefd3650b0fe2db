#pragma once

#include <cmath>
#include <cstdio>
#include <string>

#include "medprompt/autodiff.hpp"

namespace medprompt {

inline constexpr Index kSsimWindowSize = 11;
inline constexpr double kSsimSigma = 1.5;

/// Normalized 11x11 Gaussian window replicated per channel as a depthwise
/// convolution weight of shape {C, 1, 11, 11}.
template <typename Scalar>
Tensor<Scalar> ssim_window(Index channels) {
  const Index k = kSsimWindowSize;
  Tensor<Scalar> w = Tensor<Scalar>::zeros({channels, 1, k, k});
  double sum = 0;
  std::vector<double> vals(static_cast<size_t>(k * k));
  for (Index y = 0; y < k; ++y)
    for (Index x = 0; x < k; ++x) {
      const double dy = static_cast<double>(y - k / 2);
      const double dx = static_cast<double>(x - k / 2);
      double v = std::exp(-(dx * dx + dy * dy) / (2.0 * kSsimSigma * kSsimSigma));
      vals[static_cast<size_t>(y * k + x)] = v;
      sum += v;
    }
  for (Index c = 0; c < channels; ++c)
    for (Index i = 0; i < k * k; ++i)
      w.data()[c * k * k + i] = static_cast<Scalar>(vals[static_cast<size_t>(i)] / sum);
  return w;
}

/// Mean SSIM between two images, valid-region windowing (no padding).
/// Differentiable in both arguments; dynamic_range sets C1/C2.
template <typename Scalar>
Value<Scalar> ssim_value(Tape<Scalar>* tape, const Value<Scalar>& a, const Value<Scalar>& b,
                         Scalar dynamic_range) {
  check(a.data.rank() == 4 && b.data.rank() == 4, "ssim: inputs must be NCHW");
  check(a.data.shape() == b.data.shape(), "ssim: shape mismatch ", shape_str(a.data.shape()),
        " vs ", shape_str(b.data.shape()));
  check(a.data.h() >= kSsimWindowSize && a.data.w() >= kSsimWindowSize,
        "ssim: image ", a.data.h(), "x", a.data.w(), " smaller than the ", kSsimWindowSize,
        "x", kSsimWindowSize, " window");
  const Index c = a.data.c();
  const Scalar c1 = static_cast<Scalar>(0.01 * dynamic_range) *
                    static_cast<Scalar>(0.01 * dynamic_range);
  const Scalar c2 = static_cast<Scalar>(0.03 * dynamic_range) *
                    static_cast<Scalar>(0.03 * dynamic_range);
  Value<Scalar> win{ssim_window<Scalar>(c), -1};
  const Conv2dSpec spec{1, 0, c};
  auto blur = [&](const Value<Scalar>& v) {
    return ad::conv2d<Scalar>(tape, v, win, nullptr, spec);
  };

  Value<Scalar> mu_a = blur(a);
  Value<Scalar> mu_b = blur(b);
  Value<Scalar> mu_aa = ad::mul(tape, mu_a, mu_a);
  Value<Scalar> mu_bb = ad::mul(tape, mu_b, mu_b);
  Value<Scalar> mu_ab = ad::mul(tape, mu_a, mu_b);
  Value<Scalar> var_a = ad::sub(tape, blur(ad::mul(tape, a, a)), mu_aa);
  Value<Scalar> var_b = ad::sub(tape, blur(ad::mul(tape, b, b)), mu_bb);
  Value<Scalar> cov = ad::sub(tape, blur(ad::mul(tape, a, b)), mu_ab);

  Value<Scalar> num =
      ad::mul(tape, ad::scalar_add(tape, ad::scalar_mul(tape, mu_ab, Scalar(2)), c1),
              ad::scalar_add(tape, ad::scalar_mul(tape, cov, Scalar(2)), c2));
  Value<Scalar> den =
      ad::mul(tape, ad::scalar_add(tape, ad::add(tape, mu_aa, mu_bb), c1),
              ad::scalar_add(tape, ad::add(tape, var_a, var_b), c2));
  return ad::mean_all(tape, ad::div(tape, num, den));
}

template <typename Scalar>
Value<Scalar> mse_loss(Tape<Scalar>* tape, const Value<Scalar>& pred,
                       const Value<Scalar>& target) {
  Value<Scalar> d = ad::sub(tape, pred, target);
  return ad::mean_all(tape, ad::mul(tape, d, d));
}

/// 1 - SSIM on the unclamped [0,1]-scale prediction.
template <typename Scalar>
Value<Scalar> ssim_loss(Tape<Scalar>* tape, const Value<Scalar>& pred,
                        const Value<Scalar>& target) {
  Value<Scalar> s = ssim_value(tape, pred, target, Scalar(1));
  return ad::scalar_add(tape, ad::scalar_mul(tape, s, Scalar(-1)), Scalar(1));
}

/// L = MSE + lambda * (1 - SSIM).
template <typename Scalar>
Value<Scalar> total_loss(Tape<Scalar>* tape, const Value<Scalar>& pred,
                         const Value<Scalar>& target, Scalar lambda) {
  return ad::add(tape, mse_loss(tape, pred, target),
                 ad::scalar_mul(tape, ssim_loss(tape, pred, target), lambda));
}

// ---------------------------------------------------------------------------
// Evaluation metrics. Images are clamped to [0,1], mapped to the 8-bit 255
// scale and compared in double precision.

inline constexpr double kPsnrCap = 100.0;

namespace detail {

template <typename Scalar>
Tensor<double> to_metric_scale(const Tensor<Scalar>& x) {
  Tensor<double> y = x.template cast<double>();
  y.array() = y.array().min(1.0).max(0.0) * 255.0;
  return y;
}

}  // namespace detail

template <typename Scalar>
double metric_psnr(const Tensor<Scalar>& pred, const Tensor<Scalar>& target) {
  check(pred.shape() == target.shape(), "psnr: shape mismatch");
  Tensor<double> a = detail::to_metric_scale(pred);
  Tensor<double> b = detail::to_metric_scale(target);
  const double mse = (a.array() - b.array()).square().sum() / static_cast<double>(a.numel());
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

template <typename Scalar>
double metric_ssim(const Tensor<Scalar>& pred, const Tensor<Scalar>& target) {
  Tensor<double> a = detail::to_metric_scale(pred);
  Tensor<double> b = detail::to_metric_scale(target);
  return ssim_value<double>(nullptr, {a, -1}, {b, -1}, 255.0).data.item();
}

template <typename Scalar>
double metric_mae(const Tensor<Scalar>& pred, const Tensor<Scalar>& target) {
  check(pred.shape() == target.shape(), "mae: shape mismatch");
  Tensor<double> a = detail::to_metric_scale(pred);
  Tensor<double> b = detail::to_metric_scale(target);
  return (a.array() - b.array()).abs().sum() / static_cast<double>(a.numel());
}

struct Metrics {
  double psnr = 0, ssim = 0, mae = 0;
};

template <typename Scalar>
Metrics compute_metrics(const Tensor<Scalar>& pred, const Tensor<Scalar>& target) {
  return {metric_psnr(pred, target), metric_ssim(pred, target), metric_mae(pred, target)};
}

inline std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

/// Shortest round-trippable decimal form; used wherever logs must be
/// byte-identical across reruns.
inline std::string format_exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Per-direction test-set metrics for one evaluation pass.
struct EvalReport {
  Metrics a2b, b2a;
  Index n_samples = 0;

  std::string to_text() const {
    std::string out;
    out += "direction  psnr_db  ssim    mae\n";
    out += str_cat("a2b        ", format_fixed(a2b.psnr, 4), "  ", format_fixed(a2b.ssim, 4),
                   "  ", format_fixed(a2b.mae, 4), "\n");
    out += str_cat("b2a        ", format_fixed(b2a.psnr, 4), "  ", format_fixed(b2a.ssim, 4),
                   "  ", format_fixed(b2a.mae, 4), "\n");
    out += str_cat("samples per direction: ", n_samples, "\n");
    return out;
  }

  std::string to_csv() const {
    std::string out = "direction,psnr,ssim,mae\n";
    out += str_cat("a2b,", format_exact(a2b.psnr), ",", format_exact(a2b.ssim), ",",
                   format_exact(a2b.mae), "\n");
    out += str_cat("b2a,", format_exact(b2a.psnr), ",", format_exact(b2a.ssim), ",",
                   format_exact(b2a.mae), "\n");
    return out;
  }
};

}  // namespace medprompt
