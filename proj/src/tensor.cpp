#include "actdistill/tensor.hpp"

#include "actdistill/error.hpp"
#include "actdistill/hash.hpp"

namespace actdistill {

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::pair<Index, Index> storage_dims(const Shape& shape) {
  switch (shape.size()) {
    case 0: return {1, 1};
    case 1: return {1, static_cast<Index>(shape[0])};
    case 2: return {static_cast<Index>(shape[0]), static_cast<Index>(shape[1])};
    default: throw ContractError("tensor: rank > 2 unsupported, got " + to_string(shape));
  }
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  auto [r, c] = storage_dims(shape_);
  values_ = Matrix::Zero(r, c);
}

Tensor::Tensor(Shape shape, Matrix values) : shape_(std::move(shape)), values_(std::move(values)) {
  auto [r, c] = storage_dims(shape_);
  if (values_.rows() != r || values_.cols() != c) {
    throw ContractError("tensor: values " + std::to_string(values_.rows()) + "x" +
                        std::to_string(values_.cols()) + " do not match shape " +
                        to_string(shape_));
  }
}

Tensor Tensor::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Tensor({}, std::move(m));
}

Tensor Tensor::from_matrix(Matrix values) {
  Shape shape{static_cast<std::size_t>(values.rows()), static_cast<std::size_t>(values.cols())};
  return Tensor(std::move(shape), std::move(values));
}

Tensor Tensor::from_row(const RowVector& values) {
  return Tensor({static_cast<std::size_t>(values.size())}, Matrix(values));
}

Matrix& Tensor::grad() const {
  if (!grad_) grad_ = Matrix::Zero(values_.rows(), values_.cols());
  return *grad_;
}

void Tensor::zero_grad() const {
  if (grad_) grad_->setZero();
}

std::uint64_t Tensor::content_hash() const {
  Fnv1a h;
  for (std::size_t e : shape_) h.update_value(static_cast<std::uint64_t>(e));
  h.update(values_.data(), sizeof(double) * size());
  return h.digest();
}

}  // namespace actdistill
