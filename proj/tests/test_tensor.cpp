#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "medprompt/rng.hpp"
#include "medprompt/tensor.hpp"

using namespace medprompt;

TEST_CASE("factories and element access") {
  auto t = Tensor<float>::zeros({2, 3});
  CHECK(t.rank() == 2);
  CHECK(t.numel() == 6);
  CHECK(t.at({1, 2}) == 0.0f);

  auto f = Tensor<double>::full({2, 2}, 1.5);
  CHECK(f.at({0, 0}) == 1.5);
  CHECK(f.at({1, 1}) == 1.5);

  auto s = Tensor<float>::scalar(3.0f);
  CHECK(s.shape() == Shape{1});
  CHECK(s.item() == 3.0f);

  auto v = Tensor<float>::from_vector({2, 2}, {1, 2, 3, 4});
  CHECK(v.at({0, 0}) == 1.0f);
  CHECK(v.at({0, 1}) == 2.0f);
  CHECK(v.at({1, 0}) == 3.0f);
  CHECK(v.at({1, 1}) == 4.0f);
}

TEST_CASE("invalid construction and access throw") {
  CHECK_THROWS_AS(Tensor<float>::zeros({2, 0}), TensorError);
  CHECK_THROWS_AS(Tensor<float>::from_vector({2, 2}, {1, 2, 3}), TensorError);
  auto t = Tensor<float>::zeros({2, 3});
  CHECK_THROWS_AS(t.at({2, 0}), TensorError);
  CHECK_THROWS_AS(t.at({0, 0, 0}), TensorError);
  CHECK_THROWS_AS(t.item(), TensorError);
  CHECK_THROWS_AS(t.reshaped({5}), TensorError);
}

TEST_CASE("nchw accessors") {
  auto t = Tensor<float>::zeros({2, 3, 4, 5});
  CHECK(t.n() == 2);
  CHECK(t.c() == 3);
  CHECK(t.h() == 4);
  CHECK(t.w() == 5);
}

TEST_CASE("row-major layout") {
  auto t = Tensor<float>::from_vector({2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  CHECK(t.at({0, 0, 1}) == 1.0f);
  CHECK(t.at({0, 1, 0}) == 2.0f);
  CHECK(t.at({1, 0, 0}) == 4.0f);
}

TEST_CASE("reshape shares the buffer, clone does not") {
  auto t = Tensor<float>::from_vector({2, 2}, {1, 2, 3, 4});
  auto r = t.reshaped({4});
  CHECK(r.at({2}) == 3.0f);
  t.data()[2] = 9.0f;
  CHECK(r.at({2}) == 9.0f);

  auto c = t.clone();
  t.data()[0] = -1.0f;
  CHECK(c.at({0, 0}) == 1.0f);
}

TEST_CASE("cast between scalar types") {
  auto t = Tensor<double>::from_vector({3}, {0.5, 1.25, -2.0});
  auto f = t.cast<float>();
  CHECK(f.at({1}) == 1.25f);
  auto back = f.cast<double>();
  CHECK(back.at({2}) == -2.0);
}

TEST_CASE("bit_equal and max_abs_diff") {
  auto a = Tensor<float>::from_vector({3}, {1, 2, 3});
  auto b = a.clone();
  CHECK(bit_equal(a, b));
  b.data()[1] = 2.5f;
  CHECK_FALSE(bit_equal(a, b));
  CHECK(max_abs_diff(a, b) == doctest::Approx(0.5f));
  CHECK_FALSE(bit_equal(a, Tensor<float>::zeros({4})));
}

TEST_CASE("rng: same seed gives identical streams") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("rng: derived streams are distinct") {
  uint64_t base = 7;
  Rng a(derive_seed(base, kStreamDataset, 0));
  Rng b(derive_seed(base, kStreamInit, 0));
  Rng c(derive_seed(base, kStreamDataset, 1));
  CHECK(a.next_u64() != b.next_u64());
  CHECK(Rng(derive_seed(base, kStreamDataset, 0)).next_u64() != c.next_u64());
}

TEST_CASE("rng: uniform range and integer bounds") {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    int64_t k = rng.uniform_int(-2, 5);
    CHECK(k >= -2);
    CHECK(k <= 5);
  }
}

TEST_CASE("rng: moment sanity for normal, gamma and beta") {
  Rng rng(11);
  const int n = 20000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(sum / n == doctest::Approx(0.0).epsilon(0.05));
  CHECK(sq / n == doctest::Approx(1.0).epsilon(0.05));

  double gs = 0;
  for (int i = 0; i < n; ++i) gs += rng.gamma(2.5);
  CHECK(gs / n == doctest::Approx(2.5).epsilon(0.05));

  double bs = 0;
  for (int i = 0; i < n; ++i) {
    double b = rng.beta(0.4, 0.4);
    CHECK(b >= 0.0);
    CHECK(b <= 1.0);
    bs += b;
  }
  CHECK(bs / n == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("rng: state roundtrip resumes the stream") {
  Rng a(123);
  a.normal();
  a.uniform();
  std::string state = a.serialize_state();
  Rng b(0);
  b.deserialize_state(state);
  for (int i = 0; i < 20; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("rng: random tensor factories are deterministic") {
  Rng a(5), b(5);
  auto ta = Tensor<float>::uniform({3, 3}, a, -1.0f, 1.0f);
  auto tb = Tensor<float>::uniform({3, 3}, b, -1.0f, 1.0f);
  CHECK(bit_equal(ta, tb));
  auto na = Tensor<float>::normal({3, 3}, a, 0.0f, 0.02f);
  auto nb = Tensor<float>::normal({3, 3}, b, 0.0f, 0.02f);
  CHECK(bit_equal(na, nb));
}
