#include "actdistill/ops.hpp"

#include "actdistill/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace actdistill::ops {
namespace {

std::string dims(const Matrix& m) {
  return "[" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "]";
}

[[noreturn]] void shape_error(std::string_view op, const Matrix& a, const Matrix& b) {
  throw ContractError(std::string(op) + ": shape mismatch " + dims(a) + " vs " + dims(b));
}

void require_same_shape(std::string_view op, const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a.value(), b.value());
}

Tape& same_tape(std::string_view op, const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands on different tapes");
  return a.tape();
}

}  // namespace

const std::vector<PrimitiveInfo>& primitive_set() {
  static const std::vector<PrimitiveInfo> kSet = {
      {"matmul", "matrix product A B", true},
      {"transpose", "matrix transpose", true},
      {"add", "elementwise a + b", true},
      {"sub", "elementwise a - b", true},
      {"mul", "elementwise (Hadamard) a * b", true},
      {"scale", "scalar multiple s * x", true},
      {"affine", "s * x + shift", true},
      {"add_row", "row-broadcast addition", true},
      {"mul_row", "row-broadcast multiplication", true},
      {"exp", "elementwise exponential", true},
      {"relu", "rectifier max(x, 0)", true},
      {"sigmoid", "logistic sigmoid", true},
      {"softmax_rows", "row-wise softmax", true},
      {"layer_norm_rows", "row standardization without affine", true},
      {"sum_all", "sum of all entries", true},
      {"mean_all", "mean of all entries", true},
      {"mean_rows", "mean over axis 0", true},
      {"mean_cols", "mean over axis 1", true},
      {"squared_norm_rows", "per-row squared L2 norm", true},
      {"l1_normalize_rows", "x / (rowsum + eps)", true},
      {"normalize_rows", "rows scaled to unit L2 norm", true},
      {"cosine_rows", "cosine similarity of paired rows", true},
      {"cosine_gram", "pairwise cosine similarity matrix", true},
      {"frobenius_sq", "squared Frobenius norm of a difference", true},
      {"concat_rows", "vertical concatenation", true},
      {"concat_cols", "horizontal concatenation", true},
      {"slice_rows", "contiguous row block", true},
      {"slice_cols", "contiguous column block", true},
      {"element", "single entry as 1x1", true},
      {"topk_indices", "row-wise top-k column indices (ties to smaller index)", false},
      {"gather_cols", "row-wise gather by index", true},
      {"scatter_cols", "row-wise scatter into dense matrix", true},
      {"stop_grad", "identity forward, zero backward", true},
      {"dropout", "inverted dropout (train) / identity (eval)", true},
      {"gate_blend", "g * a + (1 - g) * b with scalar g", true},
  };
  return kSet;
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = same_tape("matmul", a, b);
  if (a.cols() != b.rows()) shape_error("matmul", a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  const Var in[] = {a, b};
  return t.record("matmul", a.value() * b.value(), in, [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
    if (tp.needs_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

Var transpose(const Var& x) {
  const std::size_t ix = x.id();
  const Var in[] = {x};
  return x.tape().record("transpose", x.value().transpose(), in,
                         [ix](Tape& tp, const Matrix& g) { tp.accumulate(ix, g.transpose()); });
}

Var add(const Var& a, const Var& b) {
  Tape& t = same_tape("add", a, b);
  require_same_shape("add", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  const Var in[] = {a, b};
  return t.record("add", a.value() + b.value(), in, [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = same_tape("sub", a, b);
  require_same_shape("sub", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  const Var in[] = {a, b};
  return t.record("sub", a.value() - b.value(), in, [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, -g);
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = same_tape("mul", a, b);
  require_same_shape("mul", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  const Var in[] = {a, b};
  return t.record("mul", a.value().cwiseProduct(b.value()), in,
                  [ia, ib](Tape& tp, const Matrix& g) {
                    if (tp.needs_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
                    if (tp.needs_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
                  });
}

Var scale(const Var& x, double s) {
  const std::size_t ix = x.id();
  const Var in[] = {x};
  return x.tape().record("scale", x.value() * s, in,
                         [ix, s](Tape& tp, const Matrix& g) { tp.accumulate(ix, g * s); });
}

Var affine(const Var& x, double s, double shift) {
  const std::size_t ix = x.id();
  const Var in[] = {x};
  Matrix y = (x.value() * s).array() + shift;
  return x.tape().record("affine", std::move(y), in,
                         [ix, s](Tape& tp, const Matrix& g) { tp.accumulate(ix, g * s); });
}

Var add_row(const Var& x, const Var& row) {
  Tape& t = same_tape("add_row", x, row);
  if (row.rows() != 1 || row.cols() != x.cols()) shape_error("add_row", x.value(), row.value());
  const std::size_t ix = x.id(), ir = row.id();
  const Var in[] = {x, row};
  Matrix y = x.value().rowwise() + row.value().row(0);
  return t.record("add_row", std::move(y), in, [ix, ir](Tape& tp, const Matrix& g) {
    tp.accumulate(ix, g);
    if (tp.needs_grad(ir)) tp.accumulate(ir, g.colwise().sum());
  });
}

Var mul_row(const Var& x, const Var& row) {
  Tape& t = same_tape("mul_row", x, row);
  if (row.rows() != 1 || row.cols() != x.cols()) shape_error("mul_row", x.value(), row.value());
  const std::size_t ix = x.id(), ir = row.id();
  const Var in[] = {x, row};
  Matrix y = x.value().array().rowwise() * row.value().row(0).array();
  return t.record("mul_row", std::move(y), in, [ix, ir](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ix)) {
      Matrix gx = g.array().rowwise() * tp.value(ir).row(0).array();
      tp.accumulate(ix, gx);
    }
    if (tp.needs_grad(ir)) tp.accumulate(ir, g.cwiseProduct(tp.value(ix)).colwise().sum());
  });
}

Var exp(const Var& x) {
  const std::size_t ix = x.id();
  const Var in[] = {x};
  Matrix y = x.value().array().exp().matrix();
  Matrix saved = y;
  return x.tape().record("exp", std::move(y), in,
                         [ix, saved = std::move(saved)](Tape& tp, const Matrix& g) {
                           tp.accumulate(ix, g.cwiseProduct(saved));
                         });
}

Var relu(const Var& x) {
  const std::size_t ix = x.id();
  const Var in[] = {x};
  return x.tape().record("relu", x.value().cwiseMax(0.0), in, [ix](Tape& tp, const Matrix& g) {
    Matrix mask = (tp.value(ix).array() > 0.0).cast<double>();
    tp.accumulate(ix, g.cwiseProduct(mask));
  });
}

Var sigmoid(const Var& x) {
  const std::size_t ix = x.id();
  const Var in[] = {x};
  Matrix y = (1.0 + (-x.value().array()).exp()).inverse().matrix();
  Matrix dy = y.array() * (1.0 - y.array());
  return x.tape().record("sigmoid", std::move(y), in,
                         [ix, dy = std::move(dy)](Tape& tp, const Matrix& g) {
                           tp.accumulate(ix, g.cwiseProduct(dy));
                         });
}

Var softmax_rows(const Var& x) {
  const std::size_t ix = x.id();
  const Var in[] = {x};
  Matrix y = x.value();
  for (Index i = 0; i < y.rows(); ++i) {
    const double m = y.row(i).maxCoeff();
    y.row(i) = (y.row(i).array() - m).exp();
    y.row(i) /= y.row(i).sum();
  }
  Matrix saved = y;
  return x.tape().record("softmax_rows", std::move(y), in,
                         [ix, saved = std::move(saved)](Tape& tp, const Matrix& g) {
                           Eigen::VectorXd dot = g.cwiseProduct(saved).rowwise().sum();
                           Matrix gx = saved.array() * (g.colwise() - dot).array();
                           tp.accumulate(ix, gx);
                         });
}

Var layer_norm_rows(const Var& x, double eps) {
  const std::size_t ix = x.id();
  const Var in[] = {x};
  const Matrix& v = x.value();
  const Index n = v.cols();
  Matrix y(v.rows(), n);
  Eigen::VectorXd inv_std(v.rows());
  for (Index i = 0; i < v.rows(); ++i) {
    const double mu = v.row(i).mean();
    const double var = (v.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    y.row(i) = (v.row(i).array() - mu) * inv_std(i);
  }
  Matrix saved = y;
  return x.tape().record(
      "layer_norm_rows", std::move(y), in,
      [ix, saved = std::move(saved), inv_std = std::move(inv_std)](Tape& tp, const Matrix& g) {
        Matrix gx(g.rows(), g.cols());
        for (Index i = 0; i < g.rows(); ++i) {
          const double mg = g.row(i).mean();
          const double mgy = g.row(i).cwiseProduct(saved.row(i)).mean();
          gx.row(i) = inv_std(i) * (g.row(i).array() - mg - saved.row(i).array() * mgy);
        }
        tp.accumulate(ix, gx);
      });
}

Var sum_all(const Var& x) {
  const std::size_t ix = x.id();
  const Index r = x.rows(), c = x.cols();
  const Var in[] = {x};
  Matrix y(1, 1);
  y(0, 0) = x.value().sum();
  return x.tape().record("sum_all", std::move(y), in, [ix, r, c](Tape& tp, const Matrix& g) {
    tp.accumulate(ix, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean_all(const Var& x) {
  const std::size_t ix = x.id();
  const Index r = x.rows(), c = x.cols();
  const Var in[] = {x};
  Matrix y(1, 1);
  y(0, 0) = x.value().mean();
  return x.tape().record("mean_all", std::move(y), in, [ix, r, c](Tape& tp, const Matrix& g) {
    tp.accumulate(ix, Matrix::Constant(r, c, g(0, 0) / static_cast<double>(r * c)));
  });
}

Var mean_rows(const Var& x) {
  const std::size_t ix = x.id();
  const Index r = x.rows();
  const Var in[] = {x};
  Matrix y = x.value().colwise().mean();
  return x.tape().record("mean_rows", std::move(y), in, [ix, r](Tape& tp, const Matrix& g) {
    Matrix gx = g.replicate(r, 1) / static_cast<double>(r);
    tp.accumulate(ix, gx);
  });
}

Var mean_cols(const Var& x) {
  const std::size_t ix = x.id();
  const Index c = x.cols();
  const Var in[] = {x};
  Matrix y = x.value().rowwise().mean();
  return x.tape().record("mean_cols", std::move(y), in, [ix, c](Tape& tp, const Matrix& g) {
    Matrix gx = g.replicate(1, c) / static_cast<double>(c);
    tp.accumulate(ix, gx);
  });
}

Var squared_norm_rows(const Var& x) {
  const std::size_t ix = x.id();
  const Var in[] = {x};
  Matrix y = x.value().rowwise().squaredNorm();
  return x.tape().record("squared_norm_rows", std::move(y), in,
                         [ix](Tape& tp, const Matrix& g) {
                           Matrix gx = 2.0 * (tp.value(ix).array().colwise() * g.col(0).array());
                           tp.accumulate(ix, gx);
                         });
}

Var l1_normalize_rows(const Var& x, double eps) {
  const std::size_t ix = x.id();
  const Var in[] = {x};
  Eigen::VectorXd s = x.value().rowwise().sum().array() + eps;
  if ((s.array() == 0.0).any()) throw NumericalError("l1_normalize_rows: zero denominator");
  Matrix y = x.value().array().colwise() / s.array();
  return x.tape().record("l1_normalize_rows", std::move(y), in,
                         [ix, s = std::move(s)](Tape& tp, const Matrix& g) {
                           const Matrix& xv = tp.value(ix);
                           Eigen::VectorXd gx_dot =
                               g.cwiseProduct(xv).rowwise().sum().array() / s.array().square();
                           Matrix gx = (g.array().colwise() / s.array()).colwise() - gx_dot.array();
                           tp.accumulate(ix, gx);
                         });
}

namespace {

Eigen::VectorXd checked_row_norms(std::string_view op, const Matrix& m) {
  Eigen::VectorXd n = m.rowwise().norm();
  if ((n.array() == 0.0).any()) {
    throw ContractError(std::string(op) + ": zero-norm row, cosine undefined");
  }
  return n;
}

}  // namespace

Var normalize_rows(const Var& x) {
  const std::size_t ix = x.id();
  const Var in[] = {x};
  Eigen::VectorXd n = checked_row_norms("normalize_rows", x.value());
  Matrix u = x.value().array().colwise() / n.array();
  Matrix y = u;
  return x.tape().record("normalize_rows", std::move(y), in,
                         [ix, n = std::move(n), u = std::move(u)](Tape& tp, const Matrix& g) {
                           const Eigen::VectorXd proj = g.cwiseProduct(u).rowwise().sum();
                           Matrix gx = (g - (u.array().colwise() * proj.array()).matrix()).array().colwise() /
                                       n.array();
                           tp.accumulate(ix, gx);
                         });
}

Var cosine_rows(const Var& a, const Var& b) {
  Tape& t = same_tape("cosine_rows", a, b);
  require_same_shape("cosine_rows", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  const Var in[] = {a, b};
  Eigen::VectorXd na = checked_row_norms("cosine_rows", a.value());
  Eigen::VectorXd nb = checked_row_norms("cosine_rows", b.value());
  Eigen::VectorXd dot = a.value().cwiseProduct(b.value()).rowwise().sum();
  Eigen::VectorXd c = dot.array() / (na.array() * nb.array());
  Matrix y = c;
  return t.record("cosine_rows", std::move(y), in,
                  [ia, ib, na, nb, c](Tape& tp, const Matrix& g) {
                    const Matrix& av = tp.value(ia);
                    const Matrix& bv = tp.value(ib);
                    const Eigen::ArrayXd gc = g.col(0).array();
                    if (tp.needs_grad(ia)) {
                      Matrix ga = (bv.array().colwise() * (gc / (na.array() * nb.array()))) -
                                  (av.array().colwise() * (gc * c.array() / na.array().square()));
                      tp.accumulate(ia, ga);
                    }
                    if (tp.needs_grad(ib)) {
                      Matrix gb = (av.array().colwise() * (gc / (na.array() * nb.array()))) -
                                  (bv.array().colwise() * (gc * c.array() / nb.array().square()));
                      tp.accumulate(ib, gb);
                    }
                  });
}

Var cosine_gram(const Var& x) {
  const std::size_t ix = x.id();
  const Var in[] = {x};
  Eigen::VectorXd n = checked_row_norms("cosine_gram", x.value());
  Matrix u = x.value().array().colwise() / n.array();
  Matrix y = u * u.transpose();
  return x.tape().record("cosine_gram", std::move(y), in,
                         [ix, n, u](Tape& tp, const Matrix& g) {
                           Matrix gu = (g + g.transpose()) * u;
                           Eigen::VectorXd proj = gu.cwiseProduct(u).rowwise().sum();
                           Matrix gx = (gu - (u.array().colwise() * proj.array()).matrix()).array().colwise() /
                                       n.array();
                           tp.accumulate(ix, gx);
                         });
}

Var frobenius_sq(const Var& a, const Var& b) {
  Tape& t = same_tape("frobenius_sq", a, b);
  require_same_shape("frobenius_sq", a, b);
  const std::size_t ia = a.id(), ib = b.id();
  const Var in[] = {a, b};
  Matrix diff = a.value() - b.value();
  Matrix y(1, 1);
  y(0, 0) = diff.squaredNorm();
  return t.record("frobenius_sq", std::move(y), in,
                  [ia, ib, diff = std::move(diff)](Tape& tp, const Matrix& g) {
                    tp.accumulate(ia, 2.0 * g(0, 0) * diff);
                    tp.accumulate(ib, -2.0 * g(0, 0) * diff);
                  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no operands");
  Tape& t = parts.front().tape();
  const Index cols = parts.front().cols();
  Index rows = 0;
  std::vector<std::size_t> ids;
  std::vector<Index> offsets;
  for (const Var& p : parts) {
    if (&p.tape() != &t) throw ContractError("concat_rows: operands on different tapes");
    if (p.cols() != cols) shape_error("concat_rows", parts.front().value(), p.value());
    ids.push_back(p.id());
    offsets.push_back(rows);
    rows += p.rows();
  }
  Matrix y(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    y.middleRows(offsets[i], parts[i].rows()) = parts[i].value();
  }
  return t.record("concat_rows", std::move(y), parts,
                  [ids = std::move(ids), offsets = std::move(offsets)](Tape& tp, const Matrix& g) {
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      if (!tp.needs_grad(ids[i])) continue;
                      tp.accumulate(ids[i], g.middleRows(offsets[i], tp.value(ids[i]).rows()));
                    }
                  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no operands");
  Tape& t = parts.front().tape();
  const Index rows = parts.front().rows();
  Index cols = 0;
  std::vector<std::size_t> ids;
  std::vector<Index> offsets;
  for (const Var& p : parts) {
    if (&p.tape() != &t) throw ContractError("concat_cols: operands on different tapes");
    if (p.rows() != rows) shape_error("concat_cols", parts.front().value(), p.value());
    ids.push_back(p.id());
    offsets.push_back(cols);
    cols += p.cols();
  }
  Matrix y(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    y.middleCols(offsets[i], parts[i].cols()) = parts[i].value();
  }
  return t.record("concat_cols", std::move(y), parts,
                  [ids = std::move(ids), offsets = std::move(offsets)](Tape& tp, const Matrix& g) {
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      if (!tp.needs_grad(ids[i])) continue;
                      tp.accumulate(ids[i], g.middleCols(offsets[i], tp.value(ids[i]).cols()));
                    }
                  });
}

Var slice_rows(const Var& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) {
    throw ContractError("slice_rows: range [" + std::to_string(begin) + ", " +
                        std::to_string(begin + count) + ") outside " + dims(x.value()));
  }
  const std::size_t ix = x.id();
  const Index r = x.rows(), c = x.cols();
  const Var in[] = {x};
  return x.tape().record("slice_rows", x.value().middleRows(begin, count), in,
                         [ix, r, c, begin, count](Tape& tp, const Matrix& g) {
                           Matrix gx = Matrix::Zero(r, c);
                           gx.middleRows(begin, count) = g;
                           tp.accumulate(ix, gx);
                         });
}

Var slice_cols(const Var& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.cols()) {
    throw ContractError("slice_cols: range [" + std::to_string(begin) + ", " +
                        std::to_string(begin + count) + ") outside " + dims(x.value()));
  }
  const std::size_t ix = x.id();
  const Index r = x.rows(), c = x.cols();
  const Var in[] = {x};
  return x.tape().record("slice_cols", x.value().middleCols(begin, count), in,
                         [ix, r, c, begin, count](Tape& tp, const Matrix& g) {
                           Matrix gx = Matrix::Zero(r, c);
                           gx.middleCols(begin, count) = g;
                           tp.accumulate(ix, gx);
                         });
}

Var element(const Var& x, Index r, Index c) {
  if (r < 0 || c < 0 || r >= x.rows() || c >= x.cols()) {
    throw ContractError("element: (" + std::to_string(r) + "," + std::to_string(c) +
                        ") outside " + dims(x.value()));
  }
  const std::size_t ix = x.id();
  const Index rows = x.rows(), cols = x.cols();
  const Var in[] = {x};
  Matrix y(1, 1);
  y(0, 0) = x.value()(r, c);
  return x.tape().record("element", std::move(y), in,
                         [ix, rows, cols, r, c](Tape& tp, const Matrix& g) {
                           Matrix gx = Matrix::Zero(rows, cols);
                           gx(r, c) = g(0, 0);
                           tp.accumulate(ix, gx);
                         });
}

IndexMatrix topk_indices(const Matrix& scores, Index k) {
  if (k < 1 || k > scores.cols()) {
    throw ContractError("topk_indices: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(scores.cols()) + "]");
  }
  IndexMatrix out(scores.rows(), k);
  std::vector<Index> order(static_cast<std::size_t>(scores.cols()));
  for (Index i = 0; i < scores.rows(); ++i) {
    std::iota(order.begin(), order.end(), Index{0});
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
      const double va = scores(i, a), vb = scores(i, b);
      return va > vb || (va == vb && a < b);
    });
    for (Index t = 0; t < k; ++t) out(i, t) = order[static_cast<std::size_t>(t)];
  }
  return out;
}

Var gather_cols(const Var& x, const IndexMatrix& idx) {
  if (idx.rows() != x.rows()) {
    throw ContractError("gather_cols: index rows " + std::to_string(idx.rows()) + " vs " +
                        dims(x.value()));
  }
  const std::size_t ix = x.id();
  const Index r = x.rows(), c = x.cols();
  Matrix y(idx.rows(), idx.cols());
  for (Index i = 0; i < idx.rows(); ++i) {
    for (Index t = 0; t < idx.cols(); ++t) {
      if (idx(i, t) < 0 || idx(i, t) >= c) throw ContractError("gather_cols: index out of range");
      y(i, t) = x.value()(i, idx(i, t));
    }
  }
  const Var in[] = {x};
  return x.tape().record("gather_cols", std::move(y), in, [ix, r, c, idx](Tape& tp, const Matrix& g) {
    Matrix gx = Matrix::Zero(r, c);
    for (Index i = 0; i < idx.rows(); ++i) {
      for (Index t = 0; t < idx.cols(); ++t) gx(i, idx(i, t)) += g(i, t);
    }
    tp.accumulate(ix, gx);
  });
}

Var scatter_cols(const Var& w, const IndexMatrix& idx, Index ncols) {
  if (idx.rows() != w.rows() || idx.cols() != w.cols()) {
    throw ContractError("scatter_cols: index shape does not match " + dims(w.value()));
  }
  const std::size_t iw = w.id();
  Matrix y = Matrix::Zero(w.rows(), ncols);
  for (Index i = 0; i < idx.rows(); ++i) {
    for (Index t = 0; t < idx.cols(); ++t) {
      if (idx(i, t) < 0 || idx(i, t) >= ncols) throw ContractError("scatter_cols: index out of range");
      y(i, idx(i, t)) = w.value()(i, t);
    }
  }
  const Var in[] = {w};
  return w.tape().record("scatter_cols", std::move(y), in, [iw, idx](Tape& tp, const Matrix& g) {
    Matrix gw(idx.rows(), idx.cols());
    for (Index i = 0; i < idx.rows(); ++i) {
      for (Index t = 0; t < idx.cols(); ++t) gw(i, t) = g(i, idx(i, t));
    }
    tp.accumulate(iw, gw);
  });
}

Var stop_grad(const Var& x) {
  return x.tape().record("stop_grad", x.value(), {}, nullptr);
}

Var dropout(const Var& x, double rate, Rng* rng, bool train) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0, 1)");
  if (!train || rate == 0.0) return x;
  if (rng == nullptr) throw ContractError("dropout: train mode requires an rng");
  const std::size_t ix = x.id();
  Matrix mask(x.rows(), x.cols());
  const double keep = 1.0 - rate;
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
  const Var in[] = {x};
  Matrix y = x.value().cwiseProduct(mask);
  return x.tape().record("dropout", std::move(y), in,
                         [ix, mask = std::move(mask)](Tape& tp, const Matrix& g) {
                           tp.accumulate(ix, g.cwiseProduct(mask));
                         });
}

Var gate_blend(const Var& a, const Var& b, const Var& g) {
  Tape& t = same_tape("gate_blend", a, b);
  same_tape("gate_blend", a, g);
  require_same_shape("gate_blend", a, b);
  if (g.value().size() != 1) throw ContractError("gate_blend: gate must be 1x1, got " + dims(g.value()));
  const std::size_t ia = a.id(), ib = b.id(), ig = g.id();
  const double gv = g.item();
  const Var in[] = {a, b, g};
  Matrix y = gv * a.value() + (1.0 - gv) * b.value();
  return t.record("gate_blend", std::move(y), in, [ia, ib, ig, gv](Tape& tp, const Matrix& gr) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, gv * gr);
    if (tp.needs_grad(ib)) tp.accumulate(ib, (1.0 - gv) * gr);
    if (tp.needs_grad(ig)) {
      Matrix gg(1, 1);
      gg(0, 0) = gr.cwiseProduct(tp.value(ia) - tp.value(ib)).sum();
      tp.accumulate(ig, gg);
    }
  });
}

}  // namespace actdistill::ops
