#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstring>
#include <initializer_list>
#include <span>
#include <string>

#include "melius/errors.hpp"

namespace melius {

using Index = Eigen::Index;

/// Extent of an N x C x H x W tensor.
struct Shape {
  Index n = 0;
  Index c = 0;
  Index h = 0;
  Index w = 0;

  Index size() const { return n * c * h * w; }
  Index plane() const { return h * w; }

  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return std::to_string(s.n) + "x" + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" +
         std::to_string(s.w);
}

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense N x C x H x W array, row-major in n -> c -> h -> w order.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(shape) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      throw ContractViolation("negative tensor extent " + to_string(shape));
    }
    values_.setConstant(shape.size(), fill);
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values) : Tensor(shape) {
    if (static_cast<Index>(values.size()) != shape.size()) {
      throw ContractViolation("initializer has " + std::to_string(values.size()) +
                              " values for shape " + to_string(shape));
    }
    std::copy(values.begin(), values.end(), values_.data());
  }

  Tensor(Shape shape, Vector<Scalar> values) : shape_(shape), values_(std::move(values)) {
    if (values_.size() != shape.size()) {
      throw ContractViolation("value count does not match shape " + to_string(shape));
    }
  }

  const Shape& shape() const { return shape_; }
  Index size() const { return values_.size(); }
  bool empty() const { return values_.size() == 0; }

  Scalar* data() { return values_.data(); }
  const Scalar* data() const { return values_.data(); }
  std::span<Scalar> span() { return {values_.data(), static_cast<std::size_t>(values_.size())}; }
  std::span<const Scalar> span() const {
    return {values_.data(), static_cast<std::size_t>(values_.size())};
  }

  Vector<Scalar>& values() { return values_; }
  const Vector<Scalar>& values() const { return values_; }

  Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Scalar& operator()(Index n, Index c, Index h, Index w) { return values_[offset(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const {
    return values_[offset(n, c, h, w)];
  }
  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  /// Channels [c0, c0 + count) of image n viewed as a (count x H*W) matrix.
  MatrixMap channels(Index n, Index c0, Index count) {
    return MatrixMap(values_.data() + offset(n, c0, 0, 0), count, shape_.plane());
  }
  ConstMatrixMap channels(Index n, Index c0, Index count) const {
    return ConstMatrixMap(values_.data() + offset(n, c0, 0, 0), count, shape_.plane());
  }
  MatrixMap image(Index n) { return channels(n, 0, shape_.c); }
  ConstMatrixMap image(Index n) const { return channels(n, 0, shape_.c); }

  bool all_finite() const { return values_.allFinite(); }

  template <typename To>
  Tensor<To> cast() const {
    return Tensor<To>(shape_, values_.template cast<To>().eval());
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_{};
  Vector<Scalar> values_;
};

/// Gradient of a loss with respect to a co-located Tensor; same layout.
template <typename Scalar>
using GradTensor = Tensor<Scalar>;

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ContractViolation(std::string(what) + ": shape " + to_string(a.shape()) + " vs " +
                            to_string(b.shape()));
  }
}

/// Bitwise equality including the sign of zero and NaN payloads.
template <typename Scalar>
bool bitwise_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return a.shape() == b.shape() &&
         std::equal(a.data(), a.data() + a.size(), b.data(), [](Scalar x, Scalar y) {
           return std::memcmp(&x, &y, sizeof(Scalar)) == 0;
         });
}

}  // namespace melius
