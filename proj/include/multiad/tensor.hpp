#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include "multiad/error.hpp"

namespace multiad {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <class S>
using VectorX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <class S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape);

/// Dense row-major N-d array. Values live in an Eigen column vector so that
/// whole-tensor arithmetic can go through Eigen expressions; `grad` is only
/// allocated for tensors that take part in optimization.
template <class S>
class Tensor {
 public:
  using Scalar = S;
  using Vector = VectorX<S>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape();
    data_ = Vector::Zero(numel(shape_));
  }

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  Tensor(Shape shape, std::initializer_list<S> values)
      : Tensor(std::move(shape), Vector(Eigen::Map<const Vector>(values.begin(),
                                                                 static_cast<Index>(values.size())))) {}

  static Tensor filled(Shape shape, S value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }

  S& operator[](Index i) { return data_[i]; }
  S operator[](Index i) const { return data_[i]; }

  // NCHW accessor for rank-4 tensors.
  S& at(Index n, Index c, Index h, Index w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  S at(Index n, Index c, Index h, Index w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) {
    requires_grad_ = on;
    if (!on) grad_.reset();
  }

  bool has_grad() const { return grad_.has_value(); }
  Vector& grad() {
    if (!grad_) grad_ = Vector::Zero(data_.size());
    return *grad_;
  }
  const Vector& grad() const {
    if (!grad_) throw StateError("gradient requested before any was accumulated");
    return *grad_;
  }
  void zero_grad() {
    if (grad_) grad_->setZero();
  }

  /// Same data viewed under a new shape of equal element count.
  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <class T>
  Tensor<T> cast() const {
    return Tensor<T>(shape_, data_.template cast<T>());
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  void check_shape() const {
    for (Index d : shape_) {
      if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  Vector data_;
  bool requires_grad_ = false;
  std::optional<Vector> grad_;
};

}  // namespace multiad
