#pragma once

#include <cstring>
#include <initializer_list>
#include <memory>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "medprompt/common.hpp"
#include "medprompt/rng.hpp"

namespace medprompt {

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

/// Dense row-major N-d array over f32 or f64. Copies share the buffer; a
/// tensor is treated as an immutable value once it leaves its builder, so
/// sharing is safe. Images and feature maps use NCHW order.
template <typename Scalar>
class Tensor {
  static_assert(std::is_floating_point_v<Scalar>, "Tensor is f32/f64 only");

 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), Scalar(0)); }

  /// Uninitialized storage; caller must overwrite every element.
  static Tensor empty(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    Index n = numel_of(t.shape_);
    for (Index d : t.shape_) check(d > 0, "Tensor: non-positive extent in ", shape_str(t.shape_));
    t.data_ = std::make_shared<ArrayX<Scalar>>(n);
    return t;
  }

  static Tensor full(Shape shape, Scalar value) { return Tensor(std::move(shape), value); }

  static Tensor scalar(Scalar value) { return Tensor(Shape{1}, value); }

  static Tensor from_vector(Shape shape, std::vector<Scalar> values) {
    Tensor t(std::move(shape), Scalar(0));
    check(t.numel() == static_cast<Index>(values.size()), "Tensor: ", t.numel(),
          " elements expected for shape ", shape_str(t.shape()), ", got ", values.size());
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, Scalar lo, Scalar hi) {
    Tensor t(std::move(shape), Scalar(0));
    Scalar* p = t.data();
    for (Index i = 0; i < t.numel(); ++i) p[i] = static_cast<Scalar>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor normal(Shape shape, Rng& rng, Scalar mean, Scalar stddev) {
    Tensor t(std::move(shape), Scalar(0));
    Scalar* p = t.data();
    for (Index i = 0; i < t.numel(); ++i) p[i] = static_cast<Scalar>(rng.normal(mean, stddev));
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<size_t>(i)); }
  Index numel() const { return data_ ? static_cast<Index>(data_->size()) : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  // NCHW accessors; valid only for rank-4 tensors.
  Index n() const { return dim(0); }
  Index c() const { return dim(1); }
  Index h() const { return dim(2); }
  Index w() const { return dim(3); }

  const Scalar* data() const { return data_->data(); }
  Scalar* data() { return data_->data(); }

  Eigen::Map<const ArrayX<Scalar>> array() const {
    return Eigen::Map<const ArrayX<Scalar>>(data(), numel());
  }
  Eigen::Map<ArrayX<Scalar>> array() {
    return Eigen::Map<ArrayX<Scalar>>(data(), numel());
  }

  Scalar at(std::initializer_list<Index> idx) const { return data()[offset_of(idx)]; }
  Scalar& at(std::initializer_list<Index> idx) { return data()[offset_of(idx)]; }

  Scalar item() const {
    check(numel() == 1, "item: tensor has ", numel(), " elements");
    return data()[0];
  }

  /// Same buffer under a new shape (element count must match).
  Tensor reshaped(Shape shape) const {
    check(numel_of(shape) == numel(), "reshape: ", shape_str(shape_), " -> ", shape_str(shape),
          " changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  /// Deep copy with its own buffer.
  Tensor clone() const {
    Tensor t(shape_, Scalar(0));
    t.array() = array();
    return t;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> t = Tensor<Other>::zeros(shape_);
    const Scalar* src = data();
    Other* dst = t.data();
    for (Index i = 0; i < numel(); ++i) dst[i] = static_cast<Other>(src[i]);
    return t;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)) {
    Index n = numel_of(shape_);
    for (Index d : shape_) check(d > 0, "Tensor: non-positive extent in ", shape_str(shape_));
    data_ = std::make_shared<ArrayX<Scalar>>(ArrayX<Scalar>::Constant(n, fill));
  }

  Index offset_of(std::initializer_list<Index> idx) const {
    check(static_cast<Index>(idx.size()) == rank(), "index rank mismatch");
    Index off = 0;
    auto it = idx.begin();
    for (size_t i = 0; i < shape_.size(); ++i, ++it) {
      check(*it >= 0 && *it < shape_[i], "index ", *it, " out of range for dim ", i, " of ",
            shape_str(shape_));
      off = off * shape_[i] + *it;
    }
    return off;
  }

  Shape shape_;
  std::shared_ptr<ArrayX<Scalar>> data_;
};

template <typename Scalar>
bool bit_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(Scalar) * a.numel()) == 0;
}

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check(a.shape() == b.shape(), "max_abs_diff: shape mismatch ", shape_str(a.shape()), " vs ",
        shape_str(b.shape()));
  return (a.array() - b.array()).abs().maxCoeff();
}

}  // namespace medprompt
