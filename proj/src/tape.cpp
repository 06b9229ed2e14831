#include "actdistill/tape.hpp"

#include "actdistill/error.hpp"

#include <string>

namespace actdistill {

const Matrix& Var::value() const { return tape_->value(id_); }

double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) {
    throw ContractError("item: expected 1x1, got " + std::to_string(v.rows()) + "x" +
                        std::to_string(v.cols()));
  }
  return v(0, 0);
}

Var Tape::constant(Matrix value, std::string_view label) {
  if (!value.allFinite()) {
    throw NumericalError(std::string(label) + ": non-finite constant");
  }
  Node n;
  n.value = std::move(value);
  n.op = label;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(const Tensor& t) {
  if (auto it = leaf_ids_.find(&t); it != leaf_ids_.end()) return {this, it->second};
  if (!t.all_finite()) throw NumericalError("parameter: non-finite values");
  Node n;
  n.value = t.values();
  n.op = "parameter";
  if (recording() && t.requires_grad()) {
    n.needs_grad = true;
    n.leaf = &t;
  }
  nodes_.push_back(std::move(n));
  leaf_ids_.emplace(&t, nodes_.size() - 1);
  return {this, nodes_.size() - 1};
}

void Tape::check_owned(const Var& v, std::string_view what) const {
  if (!v.valid() || &v.tape() != this || v.id() >= nodes_.size()) {
    throw ContractError(std::string(what) + ": variable is not recorded on this tape");
  }
}

Var Tape::record(std::string_view op, Matrix value, std::span<const Var> inputs,
                 Backward backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    check_owned(in, op);
    needs = needs || nodes_[in.id()].needs_grad;
  }
  if (!value.allFinite()) {
    throw NumericalError(std::string(op) + ": produced non-finite values");
  }
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.needs_grad = recording() && needs;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Tape::backward(const Var& loss) {
  check_owned(loss, "backward");
  if (loss.value().size() != 1) {
    throw ContractError("backward: loss must be scalar, got " + std::to_string(loss.rows()) +
                        "x" + std::to_string(loss.cols()));
  }
  Matrix seed = Matrix::Ones(1, 1);
  const Var outs[] = {loss};
  const Matrix seeds[] = {seed};
  backward(outs, seeds);
}

void Tape::backward(std::span<const Var> outputs, std::span<const Matrix> seeds) {
  if (!recording()) throw ContractError("backward: tape was created in inference mode");
  if (backward_done_) throw ContractError("backward: tape already consumed");
  if (outputs.size() != seeds.size()) throw ContractError("backward: outputs/seeds size mismatch");
  std::size_t last = 0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    check_owned(outputs[i], "backward");
    const Node& n = nodes_[outputs[i].id()];
    if (seeds[i].rows() != n.value.rows() || seeds[i].cols() != n.value.cols()) {
      throw ContractError("backward: seed shape does not match output");
    }
    if (!n.needs_grad) {
      throw ContractError("backward: output is detached from every trainable parameter");
    }
    accumulate(outputs[i].id(), seeds[i]);
    last = std::max(last, outputs[i].id());
  }
  run_backward(last);
}

void Tape::run_backward(std::size_t last) {
  backward_done_ = true;
  for (std::size_t id = last + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.backward) {
      n.backward(*this, n.grad);
    } else if (n.leaf != nullptr) {
      n.leaf->grad() += n.grad;
    }
  }
}

Matrix Tape::grad(const Var& v) const {
  check_owned(v, "grad");
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

}  // namespace actdistill
