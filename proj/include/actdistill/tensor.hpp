#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace actdistill {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;
using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);

/// Dense 64-bit tensor of rank 0, 1 or 2 with an optional gradient slot.
///
/// Storage is a row-major Eigen matrix: rank 0 maps to 1x1, rank 1 [n] to 1xn.
/// Values are fixed once a tensor is part of a model; only the optimizer and
/// explicit loaders write them. The gradient slot is mutable so that read-only
/// models can still accumulate gradients during backward.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Matrix values);

  static Tensor scalar(double v);
  static Tensor from_matrix(Matrix values);
  static Tensor from_row(const RowVector& values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return static_cast<std::size_t>(values_.size()); }

  Matrix& values() noexcept { return values_; }
  const Matrix& values() const noexcept { return values_; }
  std::span<const double> data() const noexcept { return {values_.data(), size()}; }
  std::span<double> data() noexcept { return {values_.data(), size()}; }

  bool requires_grad() const noexcept { return requires_grad_; }
  Tensor& set_requires_grad(bool on) noexcept {
    requires_grad_ = on;
    return *this;
  }

  bool has_grad() const noexcept { return grad_.has_value(); }
  /// Gradient buffer, allocated as zeros on first access.
  Matrix& grad() const;
  void zero_grad() const;
  void clear_grad() const { grad_.reset(); }

  bool all_finite() const { return values_.allFinite(); }

  /// FNV-1a over shape and raw values.
  std::uint64_t content_hash() const;

 private:
  Shape shape_;
  Matrix values_;
  bool requires_grad_ = false;
  mutable std::optional<Matrix> grad_;
};

/// Storage rows/cols for a given logical shape.
std::pair<Index, Index> storage_dims(const Shape& shape);

}  // namespace actdistill
