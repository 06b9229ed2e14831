#pragma once

#include "actdistill/tensor.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace actdistill {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  /// Value of a 1x1 var.
  double item() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

enum class GradMode { kRecord, kInference };

/// Reverse-mode tape. Entries are appended in evaluation order, so the list is
/// topologically sorted by construction; backward() walks it once in reverse.
///
/// One tape belongs to one thread. Parameter leaves are deduplicated per tape,
/// and their gradients are accumulated into Tensor::grad() after backward().
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  explicit Tape(GradMode mode = GradMode::kRecord) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return mode_ == GradMode::kRecord; }

  Var constant(Matrix value, std::string_view label = "constant");
  /// Leaf for a model tensor; gradients flow back only if it requires grad.
  Var parameter(const Tensor& t);

  /// Appends a primitive application. Rejects non-finite values.
  Var record(std::string_view op, Matrix value, std::span<const Var> inputs, Backward backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every leaf.
  void backward(const Var& loss);
  /// Multi-output form: seeds each output with the given upstream gradient.
  void backward(std::span<const Var> outputs, std::span<const Matrix> seeds);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const noexcept { return nodes_[id].needs_grad; }
  /// Gradient of the last backward() wrt an entry (zeros if untouched).
  Matrix grad(const Var& v) const;

  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::MatrixBase<Derived>& contribution) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = contribution;
    } else {
      n.grad += contribution;
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::string_view op_name(std::size_t id) const { return nodes_[id].op; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    const Tensor* leaf = nullptr;
    Backward backward;
    std::string_view op;
  };

  void check_owned(const Var& v, std::string_view what) const;
  void run_backward(std::size_t last);

  GradMode mode_;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> leaf_ids_;
  bool backward_done_ = false;
};

}  // namespace actdistill
