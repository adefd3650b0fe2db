#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "medprompt/rng.hpp"
#include "medprompt/tensor_ops.hpp"
#include "oracles.hpp"

using namespace medprompt;

namespace {

struct ConvCase {
  Shape x, w;
  Conv2dSpec spec;
};

}  // namespace

TEST_CASE("conv2d matches the naive oracle across strides, padding and groups") {
  const ConvCase cases[] = {
      {{2, 3, 8, 8}, {4, 3, 3, 3}, {1, 1, 1}},
      {{1, 4, 9, 7}, {6, 4, 3, 3}, {2, 1, 1}},
      {{2, 4, 8, 8}, {8, 2, 3, 3}, {1, 1, 2}},
      {{1, 6, 10, 10}, {6, 1, 3, 3}, {1, 1, 6}},
      {{2, 5, 6, 6}, {7, 5, 1, 1}, {1, 0, 1}},
      {{1, 3, 8, 8}, {2, 3, 5, 5}, {1, 2, 1}},
      {{1, 2, 7, 7}, {4, 2, 3, 3}, {3, 0, 1}},
  };
  Rng rng(901);
  for (const auto& tc : cases) {
    CAPTURE(shape_str(tc.x));
    CAPTURE(shape_str(tc.w));
    auto x = Tensor<double>::uniform(tc.x, rng, -1.0, 1.0);
    auto w = Tensor<double>::uniform(tc.w, rng, -1.0, 1.0);
    auto b = Tensor<double>::uniform({tc.w[0]}, rng, -0.5, 0.5);
    auto got = conv2d(x, w, &b, tc.spec);
    auto want = oracle::naive_conv2d(x, w, &b, tc.spec.stride, tc.spec.padding, tc.spec.groups);
    CHECK(max_abs_diff(got, want) < 1e-12);

    auto got_nb = conv2d<double>(x, w, nullptr, tc.spec);
    auto want_nb =
        oracle::naive_conv2d<double>(x, w, nullptr, tc.spec.stride, tc.spec.padding, tc.spec.groups);
    CHECK(max_abs_diff(got_nb, want_nb) < 1e-12);
  }
}

TEST_CASE("conv2d rejects malformed arguments") {
  auto x = Tensor<float>::zeros({1, 3, 8, 8});
  auto w = Tensor<float>::zeros({4, 3, 3, 3});
  CHECK_THROWS_AS(conv2d<float>(Tensor<float>::zeros({3, 8, 8}), w, nullptr, {}), TensorError);
  CHECK_THROWS_AS(conv2d<float>(x, Tensor<float>::zeros({4, 2, 3, 3}), nullptr, {}), TensorError);
  auto bad_bias = Tensor<float>::zeros({5});
  CHECK_THROWS_AS(conv2d<float>(x, w, &bad_bias, {}), TensorError);
  CHECK_THROWS_AS(conv2d<float>(x, w, nullptr, {0, 1, 1}), TensorError);
  CHECK_THROWS_AS(conv2d<float>(x, w, nullptr, {1, 1, 2}), TensorError);
  auto big = Tensor<float>::zeros({4, 3, 11, 11});
  CHECK_THROWS_AS(conv2d<float>(x, big, nullptr, {1, 0, 1}), TensorError);
}

TEST_CASE("conv2d backward matches finite differences on a small case") {
  Rng rng(77);
  auto x = Tensor<double>::uniform({1, 2, 5, 5}, rng, -1.0, 1.0);
  auto w = Tensor<double>::uniform({3, 2, 3, 3}, rng, -1.0, 1.0);
  auto b = Tensor<double>::uniform({3}, rng, -0.5, 0.5);
  Conv2dSpec spec{2, 1, 1};
  auto mask = Tensor<double>::uniform(conv2d(x, w, &b, spec).shape(), rng, -1.0, 1.0);

  auto loss = [&](const Tensor<double>& xx, const Tensor<double>& ww, const Tensor<double>& bb) {
    auto y = conv2d(xx, ww, &bb, spec);
    return (y.array() * mask.array()).sum();
  };
  auto dy = mask;
  auto grads = conv2d_backward(x, w, true, spec, dy);

  const double eps = 1e-6;
  auto probe = [&](Tensor<double>& t, const Tensor<double>& analytic) {
    for (Index i = 0; i < std::min<Index>(t.numel(), 12); ++i) {
      double saved = t.data()[i];
      t.data()[i] = saved + eps;
      double up = loss(x, w, b);
      t.data()[i] = saved - eps;
      double dn = loss(x, w, b);
      t.data()[i] = saved;
      CHECK(analytic.data()[i] == doctest::Approx((up - dn) / (2 * eps)).epsilon(1e-6));
    }
  };
  probe(x, grads.dx);
  probe(w, grads.dw);
  probe(b, grads.db);
}

TEST_CASE("elementwise ops and the dispatcher") {
  auto a = Tensor<float>::from_vector({4}, {1, -2, 3, 0.5f});
  auto b = Tensor<float>::from_vector({4}, {2, 4, -1, 0.5f});
  CHECK(add(a, b).at({1}) == 2.0f);
  CHECK(sub(a, b).at({0}) == -1.0f);
  CHECK(mul(a, b).at({2}) == -3.0f);
  CHECK(div(a, b).at({1}) == -0.5f);
  CHECK(scalar_mul(a, 2.0f).at({3}) == 1.0f);
  CHECK(scalar_add(a, 1.0f).at({1}) == -1.0f);
  auto c = clamp01(Tensor<float>::from_vector({3}, {-0.5f, 0.25f, 1.5f}));
  CHECK(c.at({0}) == 0.0f);
  CHECK(c.at({1}) == 0.25f);
  CHECK(c.at({2}) == 1.0f);

  CHECK(elementwise(EwOp::add, a, &b).at({0}) == 3.0f);
  CHECK(elementwise<float>(EwOp::scalar_mul, a, nullptr, 3.0f).at({0}) == 3.0f);
  CHECK_THROWS_AS(elementwise<float>(EwOp::add, a, nullptr), TensorError);
  CHECK_THROWS_AS(add(a, Tensor<float>::zeros({5})), TensorError);
}

TEST_CASE("gelu matches normal-CDF reference values") {
  auto x = Tensor<double>::from_vector({5}, {0.0, 1.0, -1.0, 2.0, -6.0});
  auto y = gelu(x);
  CHECK(y.at({0}) == doctest::Approx(0.0));
  CHECK(y.at({1}) == doctest::Approx(0.8413447460685429).epsilon(1e-12));
  CHECK(y.at({2}) == doctest::Approx(-0.15865525393145707).epsilon(1e-12));
  CHECK(y.at({3}) == doctest::Approx(1.9544997361036416).epsilon(1e-12));
  CHECK(std::abs(y.at({4})) < 1e-8);
}

TEST_CASE("softmax rows are positive and sum to one, stable under large logits") {
  Rng rng(5);
  auto x = Tensor<double>::uniform({3, 7, 2}, rng, -500.0, 500.0);
  for (Index axis = 0; axis < 3; ++axis) {
    auto y = softmax_axis(x, axis);
    AxisDims d = axis_dims(x.shape(), axis);
    for (Index o = 0; o < d.outer; ++o)
      for (Index i = 0; i < d.inner; ++i) {
        double sum = 0;
        for (Index j = 0; j < d.n; ++j) {
          double v = y.data()[o * d.n * d.inner + j * d.inner + i];
          CHECK(v >= 0.0);
          CHECK(std::isfinite(v));
          sum += v;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
      }
  }
}

TEST_CASE("softmax matches direct evaluation on a known vector") {
  auto x = Tensor<double>::from_vector({1, 3}, {1.0, 2.0, 3.0});
  auto y = softmax_axis(x, 1);
  double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(y.at({0, 0}) == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
  CHECK(y.at({0, 2}) == doctest::Approx(std::exp(3.0) / z).epsilon(1e-12));
}

TEST_CASE("global average pool") {
  auto x = Tensor<float>::from_vector({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  auto y = global_avg_pool(x);
  CHECK(y.shape() == Shape{1, 2, 1, 1});
  CHECK(y.at({0, 0, 0, 0}) == doctest::Approx(2.5f));
  CHECK(y.at({0, 1, 0, 0}) == doctest::Approx(25.0f));
}

TEST_CASE("layer norm normalizes across channels per position") {
  Rng rng(9);
  auto x = Tensor<double>::uniform({2, 6, 3, 3}, rng, -2.0, 2.0);
  auto gamma = Tensor<double>::full({6}, 1.0);
  auto y = layer_norm_channels(x, gamma);
  for (Index b = 0; b < 2; ++b)
    for (Index p = 0; p < 9; ++p) {
      double mean = 0, var = 0;
      for (Index c = 0; c < 6; ++c) mean += y.data()[(b * 6 + c) * 9 + p];
      mean /= 6;
      for (Index c = 0; c < 6; ++c) {
        double v = y.data()[(b * 6 + c) * 9 + p] - mean;
        var += v * v;
      }
      var /= 6;
      CHECK(mean == doctest::Approx(0.0).epsilon(1e-10));
      CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }

  auto gamma2 = Tensor<double>::full({6}, 2.0);
  auto y2 = layer_norm_channels(x, gamma2);
  CHECK(max_abs_diff(y2, scalar_mul(y, 2.0)) < 1e-12);
}

TEST_CASE("bilinear resize: identity, constants and the 2->4 ramp") {
  Rng rng(17);
  auto x = Tensor<double>::uniform({1, 2, 5, 7}, rng, 0.0, 1.0);
  CHECK(max_abs_diff(bilinear_resize(x, 5, 7), x) == 0.0);

  auto c = Tensor<double>::full({1, 1, 3, 3}, 0.6);
  auto cu = bilinear_resize(c, 9, 5);
  CHECK((cu.array() - 0.6).abs().maxCoeff() < 1e-12);

  auto ramp = Tensor<double>::from_vector({1, 1, 1, 2}, {1.0, 3.0});
  auto up = bilinear_resize(ramp, 1, 4);
  CHECK(up.at({0, 0, 0, 0}) == doctest::Approx(1.0));
  CHECK(up.at({0, 0, 0, 1}) == doctest::Approx(1.5));
  CHECK(up.at({0, 0, 0, 2}) == doctest::Approx(2.5));
  CHECK(up.at({0, 0, 0, 3}) == doctest::Approx(3.0));
}

TEST_CASE("bilinear resize backward conserves gradient mass") {
  Rng rng(23);
  auto dy = Tensor<double>::uniform({1, 1, 8, 8}, rng, -1.0, 1.0);
  auto dx = bilinear_resize_backward({1, 1, 5, 5}, dy);
  CHECK(dx.array().sum() == doctest::Approx(dy.array().sum()).epsilon(1e-12));
}

TEST_CASE("pixel shuffle: hand case and inverse relation") {
  auto x = Tensor<float>::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
  auto d = pixel_shuffle_down(x, 2);
  CHECK(d.shape() == Shape{1, 4, 1, 1});
  CHECK(d.at({0, 0, 0, 0}) == 1.0f);
  CHECK(d.at({0, 1, 0, 0}) == 2.0f);
  CHECK(d.at({0, 2, 0, 0}) == 3.0f);
  CHECK(d.at({0, 3, 0, 0}) == 4.0f);
  CHECK(bit_equal(pixel_shuffle_up(d, 2), x));

  Rng rng(31);
  auto big = Tensor<float>::uniform({2, 3, 8, 10}, rng, -1.0f, 1.0f);
  CHECK(bit_equal(pixel_shuffle_up(pixel_shuffle_down(big, 2), 2), big));
  CHECK_THROWS_AS(pixel_shuffle_down(Tensor<float>::zeros({1, 1, 3, 4}), 2), TensorError);
  CHECK_THROWS_AS(pixel_shuffle_up(Tensor<float>::zeros({1, 3, 4, 4}), 2), TensorError);
}

TEST_CASE("concat and slice channels roundtrip") {
  Rng rng(37);
  auto a = Tensor<float>::uniform({2, 2, 3, 3}, rng, -1.0f, 1.0f);
  auto b = Tensor<float>::uniform({2, 3, 3, 3}, rng, -1.0f, 1.0f);
  auto cat = concat_channels<float>({a, b});
  CHECK(cat.shape() == Shape{2, 5, 3, 3});
  CHECK(bit_equal(slice_channels(cat, 0, 2), a));
  CHECK(bit_equal(slice_channels(cat, 2, 3), b));
  CHECK_THROWS_AS(slice_channels(cat, 4, 2), TensorError);
  CHECK_THROWS_AS(concat_channels<float>({a, Tensor<float>::zeros({2, 1, 4, 3})}), TensorError);
}

TEST_CASE("batched matmul matches the naive oracle for all transpose flags") {
  Rng rng(41);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      Shape as = ta ? Shape{3, 4, 5} : Shape{3, 5, 4};
      Shape bs = tb ? Shape{3, 6, 4} : Shape{3, 4, 6};
      auto a = Tensor<double>::uniform(as, rng, -1.0, 1.0);
      auto b = Tensor<double>::uniform(bs, rng, -1.0, 1.0);
      auto got = matmul_batched(a, b, ta, tb);
      auto want = oracle::naive_matmul_batched(a, b, ta, tb);
      CHECK(got.shape() == Shape{3, 5, 6});
      CHECK(max_abs_diff(got, want) < 1e-12);
    }
  CHECK_THROWS_AS(
      matmul_batched(Tensor<double>::zeros({2, 3, 4}), Tensor<double>::zeros({2, 5, 6})),
      TensorError);
}

TEST_CASE("l2 row normalization produces unit rows") {
  Rng rng(43);
  auto x = Tensor<double>::uniform({4, 3, 6}, rng, -2.0, 2.0);
  auto y = l2_normalize_rows(x);
  for (Index r = 0; r < 12; ++r) {
    double n = 0;
    for (Index s = 0; s < 6; ++s) {
      double v = y.data()[r * 6 + s];
      n += v * v;
    }
    CHECK(n == doctest::Approx(1.0).epsilon(1e-9));
  }
  auto z = l2_normalize_rows(Tensor<double>::zeros({1, 1, 4}));
  CHECK(z.array().abs().maxCoeff() == 0.0);
}

TEST_CASE("per-head scaling") {
  auto x = Tensor<float>::from_vector({4, 1, 2}, {1, 1, 1, 1, 1, 1, 1, 1});
  auto alpha = Tensor<float>::from_vector({2}, {2.0f, 3.0f});
  auto y = scale_per_head(x, alpha);
  CHECK(y.at({0, 0, 0}) == 2.0f);
  CHECK(y.at({1, 0, 0}) == 3.0f);
  CHECK(y.at({2, 0, 0}) == 2.0f);
  CHECK(y.at({3, 0, 0}) == 3.0f);
}

TEST_CASE("mean_all") {
  auto x = Tensor<double>::from_vector({2, 2}, {1, 2, 3, 6});
  CHECK(mean_all(x).item() == doctest::Approx(3.0));
}

TEST_CASE("flips, rotations and crops") {
  auto x = Tensor<float>::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
  auto fh = flip_horizontal(x);
  CHECK(fh.at({0, 0, 0, 0}) == 2.0f);
  CHECK(fh.at({0, 0, 1, 1}) == 3.0f);
  auto fv = flip_vertical(x);
  CHECK(fv.at({0, 0, 0, 0}) == 3.0f);

  auto r1 = rotate90(x, 1);
  CHECK(r1.at({0, 0, 0, 0}) == 2.0f);
  CHECK(r1.at({0, 0, 0, 1}) == 4.0f);
  CHECK(r1.at({0, 0, 1, 0}) == 1.0f);
  CHECK(r1.at({0, 0, 1, 1}) == 3.0f);
  CHECK(bit_equal(rotate90(rotate90(x, 1), 3), x));
  CHECK(bit_equal(rotate90(x, 4), x));
  CHECK(bit_equal(rotate90(x, -1), rotate90(x, 3)));

  auto rect = Tensor<float>::from_vector({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  auto rr = rotate90(rect, 1);
  CHECK(rr.shape() == Shape{1, 1, 3, 2});
  CHECK(rr.at({0, 0, 0, 0}) == 3.0f);
  CHECK(rr.at({0, 0, 2, 1}) == 4.0f);

  auto c = crop(rect, 0, 1, 2, 2);
  CHECK(c.at({0, 0, 0, 0}) == 2.0f);
  CHECK(c.at({0, 0, 1, 1}) == 6.0f);
  CHECK_THROWS_AS(crop(rect, 1, 2, 2, 2), TensorError);
}
