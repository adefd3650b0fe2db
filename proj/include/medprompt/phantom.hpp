#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "medprompt/rng.hpp"
#include "medprompt/tensor.hpp"
#include "medprompt/tensor_ops.hpp"

namespace medprompt {

// ---------------------------------------------------------------------------
// Phantom geometry

/// Controls for the synthetic ellipse phantoms. Classes are 1..num_classes;
/// 0 is background.
struct PhantomSpec {
  Index size = 64;
  Index min_ellipses = 4;
  Index max_ellipses = 10;
  Index num_classes = 5;

  void validate() const {
    check(size >= 32, "PhantomSpec: size must be >= 32, got ", size);
    check(min_ellipses >= 1 && max_ellipses >= min_ellipses,
          "PhantomSpec: bad ellipse count range [", min_ellipses, ", ", max_ellipses, "]");
    check(num_classes >= 2 && num_classes <= 5, "PhantomSpec: num_classes must be in [2,5], got ",
          num_classes);
  }
};

/// Class-index map for one phantom; values in 0..num_classes.
struct ClassMap {
  Index size = 0;
  std::vector<uint8_t> values;

  uint8_t at(Index y, Index x) const { return values[static_cast<size_t>(y * size + x)]; }
};

/// Background plus randomly placed rotated ellipses; later ellipses overwrite
/// earlier ones. Centers sit in the middle 60% of the image and semi-axes are
/// capped by the distance to the nearest border, so every ellipse stays in
/// bounds. The first two ellipses get distinct classes.
inline ClassMap generate_phantom(const PhantomSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ClassMap map;
  map.size = spec.size;
  map.values.assign(static_cast<size_t>(spec.size * spec.size), 0);
  const double sz = static_cast<double>(spec.size);
  const Index count = rng.uniform_int(spec.min_ellipses, spec.max_ellipses);
  Index first_class = 0;
  for (Index e = 0; e < count; ++e) {
    const double cx = rng.uniform(0.2, 0.8) * (sz - 1.0);
    const double cy = rng.uniform(0.2, 0.8) * (sz - 1.0);
    const double border = std::min(std::min(cx, cy), std::min(sz - 1.0 - cx, sz - 1.0 - cy));
    const double ax_hi = std::min(0.25 * sz, border);
    const double ax_lo = std::min(0.06 * sz, ax_hi);
    const double a = rng.uniform(ax_lo, ax_hi);
    const double b = rng.uniform(ax_lo, ax_hi);
    const double theta = rng.uniform(0.0, M_PI);
    Index cls = rng.uniform_int(1, spec.num_classes);
    if (e == 0) {
      first_class = cls;
    } else if (e == 1 && cls == first_class) {
      cls = 1 + (cls % spec.num_classes);
    }
    const double ct = std::cos(theta), st = std::sin(theta);
    const Index y0 = std::max<Index>(0, static_cast<Index>(std::floor(cy - std::max(a, b))));
    const Index y1 = std::min<Index>(spec.size - 1, static_cast<Index>(std::ceil(cy + std::max(a, b))));
    const Index x0 = std::max<Index>(0, static_cast<Index>(std::floor(cx - std::max(a, b))));
    const Index x1 = std::min<Index>(spec.size - 1, static_cast<Index>(std::ceil(cx + std::max(a, b))));
    for (Index y = y0; y <= y1; ++y) {
      for (Index x = x0; x <= x1; ++x) {
        const double dx = static_cast<double>(x) - cx;
        const double dy = static_cast<double>(y) - cy;
        const double u = (dx * ct + dy * st) / a;
        const double v = (-dx * st + dy * ct) / b;
        if (u * u + v * v <= 1.0)
          map.values[static_cast<size_t>(y * spec.size + x)] = static_cast<uint8_t>(cls);
      }
    }
  }
  return map;
}

// ---------------------------------------------------------------------------
// Modality rendering

/// Appearance model for one modality: per-class intensities, Gaussian
/// smoothing, a multiplicative low-frequency bias field, and sensor noise.
struct ModalityProfile {
  std::string name;
  std::array<double, 6> intensities{};  // index = class id, 0 = background
  double smooth_sigma = 0.0;
  double bias_amplitude = 0.0;
  double noise_sigma = 0.0;

  void validate() const {
    for (double v : intensities)
      check(v >= 0.0 && v <= 1.0, "ModalityProfile ", name, ": intensity ", v, " outside [0,1]");
    check(smooth_sigma >= 0.0 && bias_amplitude >= 0.0 && noise_sigma >= 0.0,
          "ModalityProfile ", name, ": negative parameter");
  }
};

/// Bright-tissue-on-dark modality; tissue intensity falls with class index.
inline ModalityProfile modality_a() {
  return {"modA", {0.05, 0.85, 0.65, 0.50, 0.35, 0.20}, 0.8, 0.08, 0.01};
}

/// Dark-tissue-on-bright modality; intensity ordering reversed vs modA so the
/// two renders are visibly distinct and direction is inferable from content.
inline ModalityProfile modality_b() {
  return {"modB", {0.90, 0.15, 0.30, 0.45, 0.60, 0.75}, 0.8, 0.08, 0.01};
}

namespace detail {

// Separable Gaussian blur with replicate-border padding; radius 3*sigma.
inline void gaussian_smooth_inplace(std::vector<double>& img, Index size, double sigma) {
  if (sigma <= 0.0) return;
  const Index radius = static_cast<Index>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double sum = 0.0;
  for (Index i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    kernel[static_cast<size_t>(i + radius)] = w;
    sum += w;
  }
  for (double& w : kernel) w /= sum;
  std::vector<double> tmp(img.size());
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x) {
      double acc = 0.0;
      for (Index i = -radius; i <= radius; ++i) {
        const Index xx = std::clamp<Index>(x + i, 0, size - 1);
        acc += kernel[static_cast<size_t>(i + radius)] * img[static_cast<size_t>(y * size + xx)];
      }
      tmp[static_cast<size_t>(y * size + x)] = acc;
    }
  for (Index x = 0; x < size; ++x)
    for (Index y = 0; y < size; ++y) {
      double acc = 0.0;
      for (Index i = -radius; i <= radius; ++i) {
        const Index yy = std::clamp<Index>(y + i, 0, size - 1);
        acc += kernel[static_cast<size_t>(i + radius)] * tmp[static_cast<size_t>(yy * size + x)];
      }
      img[static_cast<size_t>(y * size + x)] = acc;
    }
}

}  // namespace detail

/// Class map -> intensity image: lookup, Gaussian smooth, multiply by a
/// bilinearly upsampled 4x4 bias grid, add Gaussian noise, clamp to [0,1].
/// Deterministic given the seed (bias drawn first, then noise).
inline Tensor<double> render_modality(const ClassMap& map, const ModalityProfile& profile,
                                      uint64_t seed) {
  profile.validate();
  check(map.size >= 1 && static_cast<Index>(map.values.size()) == map.size * map.size,
        "render_modality: malformed class map");
  const Index size = map.size;
  Rng rng(seed);
  std::vector<double> img(map.values.size());
  for (size_t i = 0; i < map.values.size(); ++i) {
    check(map.values[i] < profile.intensities.size(), "render_modality: class ",
          static_cast<int>(map.values[i]), " out of range");
    img[i] = profile.intensities[map.values[i]];
  }
  detail::gaussian_smooth_inplace(img, size, profile.smooth_sigma);
  if (profile.bias_amplitude > 0.0) {
    Tensor<double> grid = Tensor<double>::empty({1, 1, 4, 4});
    for (Index i = 0; i < 16; ++i)
      grid.data()[i] = 1.0 + profile.bias_amplitude * rng.uniform(-1.0, 1.0);
    Tensor<double> field = bilinear_resize(grid, size, size);
    for (size_t i = 0; i < img.size(); ++i) img[i] *= field.data()[static_cast<Index>(i)];
  }
  if (profile.noise_sigma > 0.0)
    for (double& v : img) v += rng.normal(0.0, profile.noise_sigma);
  Tensor<double> out = Tensor<double>::empty({1, 1, size, size});
  for (size_t i = 0; i < img.size(); ++i)
    out.data()[static_cast<Index>(i)] = std::clamp(img[i], 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Paired samples and datasets

enum class Direction { AtoB, BtoA };

inline const char* direction_name(Direction d) { return d == Direction::AtoB ? "a2b" : "b2a"; }

/// One training/eval item: same phantom rendered in both modalities, ordered
/// by direction.
template <typename Scalar>
struct PairedSample {
  Tensor<Scalar> input;
  Tensor<Scalar> target;
  Direction direction = Direction::AtoB;
  std::string id;
};

template <typename Scalar>
struct Dataset {
  std::vector<PairedSample<Scalar>> train;
  std::vector<PairedSample<Scalar>> test;
};

namespace detail {

inline std::string sample_id(const char* split, Index phantom, Direction dir) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s/%04lld/%s", split, static_cast<long long>(phantom),
                direction_name(dir));
  return buf;
}

template <typename Scalar>
void append_pair(std::vector<PairedSample<Scalar>>& out, const char* split, Index phantom,
                 const PhantomSpec& spec, uint64_t master_seed, uint64_t index_base) {
  const ClassMap map = generate_phantom(spec, derive_seed(master_seed, kStreamDataset, index_base));
  const Tensor<double> a =
      render_modality(map, modality_a(), derive_seed(master_seed, kStreamDataset, index_base + 1));
  const Tensor<double> b =
      render_modality(map, modality_b(), derive_seed(master_seed, kStreamDataset, index_base + 2));
  const Tensor<Scalar> as = a.template cast<Scalar>();
  const Tensor<Scalar> bs = b.template cast<Scalar>();
  out.push_back({as, bs, Direction::AtoB, sample_id(split, phantom, Direction::AtoB)});
  out.push_back({bs, as, Direction::BtoA, sample_id(split, phantom, Direction::BtoA)});
}

}  // namespace detail

/// Builds disjoint train/test splits. Counts are directional samples, two per
/// phantom (AtoB then BtoA), so they must be even; both directions are exactly
/// balanced. Deterministic given the master seed.
template <typename Scalar>
Dataset<Scalar> make_dataset(Index n_train, Index n_test, const PhantomSpec& spec,
                             uint64_t master_seed) {
  check(n_train > 0 && n_test > 0, "make_dataset: counts must be > 0, got ", n_train, "/", n_test);
  check(n_train % 2 == 0 && n_test % 2 == 0,
        "make_dataset: counts must be even (two directions per phantom), got ", n_train, "/",
        n_test);
  spec.validate();
  Dataset<Scalar> ds;
  ds.train.reserve(static_cast<size_t>(n_train));
  ds.test.reserve(static_cast<size_t>(n_test));
  for (Index i = 0; i < n_train / 2; ++i)
    detail::append_pair(ds.train, "train", i, spec, master_seed, static_cast<uint64_t>(3 * i));
  for (Index i = 0; i < n_test / 2; ++i)
    detail::append_pair(ds.test, "test", i, spec, master_seed,
                        3'000'000ull + static_cast<uint64_t>(3 * i));
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

/// Applies the same randomly drawn geometric transform to input and target:
/// crop to 7/8 size + resize back, rotation by k*90 degrees (square images
/// only), horizontal flip, vertical flip — each with probability 1/2.
/// Values stay in [0,1]; deterministic given the seed.
template <typename Scalar>
PairedSample<Scalar> augment(const PairedSample<Scalar>& sample, uint64_t seed) {
  check(sample.input.rank() == 4 && sample.input.shape() == sample.target.shape(),
        "augment: input/target must be equal-shape NCHW tensors");
  Rng rng(seed);
  PairedSample<Scalar> out = sample;
  const Index h = sample.input.h(), w = sample.input.w();
  if (rng.bernoulli(0.5)) {
    const Index ch = std::max<Index>(1, (7 * h) / 8);
    const Index cw = std::max<Index>(1, (7 * w) / 8);
    const Index oy = rng.uniform_int(0, h - ch);
    const Index ox = rng.uniform_int(0, w - cw);
    out.input = bilinear_resize(crop(out.input, oy, ox, ch, cw), h, w);
    out.target = bilinear_resize(crop(out.target, oy, ox, ch, cw), h, w);
  }
  if (h == w && rng.bernoulli(0.5)) {
    const Index k = rng.uniform_int(1, 3);
    out.input = rotate90(out.input, k);
    out.target = rotate90(out.target, k);
  }
  if (rng.bernoulli(0.5)) {
    out.input = flip_horizontal(out.input);
    out.target = flip_horizontal(out.target);
  }
  if (rng.bernoulli(0.5)) {
    out.input = flip_vertical(out.input);
    out.target = flip_vertical(out.target);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mixup

/// Convex blend of two same-direction samples with a fixed coefficient; the
/// same m applies to input and target.
template <typename Scalar>
PairedSample<Scalar> mixup_with(const PairedSample<Scalar>& a, const PairedSample<Scalar>& b,
                                double m) {
  check(a.direction == b.direction, "mixup: direction mismatch: ", direction_name(a.direction),
        " vs ", direction_name(b.direction));
  check(a.input.shape() == b.input.shape() && a.target.shape() == b.target.shape(),
        "mixup: shape mismatch");
  const Scalar ms = static_cast<Scalar>(m);
  PairedSample<Scalar> out;
  out.input = add(scalar_mul(a.input, ms), scalar_mul(b.input, Scalar(1) - ms));
  out.target = add(scalar_mul(a.target, ms), scalar_mul(b.target, Scalar(1) - ms));
  out.direction = a.direction;
  out.id = a.id + "+" + b.id;
  return out;
}

/// Beta(alpha, alpha)-weighted mixup; deterministic given the seed.
template <typename Scalar>
PairedSample<Scalar> mixup(const PairedSample<Scalar>& a, const PairedSample<Scalar>& b,
                           double alpha, uint64_t seed) {
  check(alpha > 0.0, "mixup: alpha must be > 0, got ", alpha);
  Rng rng(seed);
  return mixup_with(a, b, rng.beta(alpha, alpha));
}

}  // namespace medprompt
