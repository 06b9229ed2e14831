#pragma once

#include "actdistill/rng.hpp"
#include "actdistill/tape.hpp"

#include <span>
#include <string>
#include <vector>

/// Differentiable primitives over tape variables.
///
/// Every op checks operand shapes and throws ContractError naming the op and
/// the offending shapes. Values are 2-D; vectors are 1xn rows.
namespace actdistill::ops {

struct PrimitiveInfo {
  std::string name;
  std::string description;
  bool differentiable;
};

/// Catalogue of the primitives below.
const std::vector<PrimitiveInfo>& primitive_set();

// Linear algebra and elementwise arithmetic.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& x);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
/// s * x + shift, elementwise.
Var affine(const Var& x, double s, double shift);
/// x [N,C] + row [1,C] broadcast over rows.
Var add_row(const Var& x, const Var& row);
/// x [N,C] * row [1,C] broadcast over rows.
Var mul_row(const Var& x, const Var& row);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& x, double s) { return scale(x, s); }
inline Var operator*(double s, const Var& x) { return scale(x, s); }

// Nonlinearities.
Var exp(const Var& x);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var softmax_rows(const Var& x);
/// Row standardization (x - mean) / sqrt(var + eps), no affine part.
Var layer_norm_rows(const Var& x, double eps = 1e-5);

// Reductions.
Var sum_all(const Var& x);
Var mean_all(const Var& x);
/// Mean over axis 0: [N,C] -> [1,C].
Var mean_rows(const Var& x);
/// Mean over axis 1: [N,C] -> [N,1].
Var mean_cols(const Var& x);
/// Per-row sum of squares: [N,C] -> [N,1].
Var squared_norm_rows(const Var& x);
/// x / (rowsum(x) + eps) per row.
Var l1_normalize_rows(const Var& x, double eps);
/// Cosine similarity of paired rows: [B,C] x [B,C] -> [B,1]. Zero rows are rejected.
Var cosine_rows(const Var& a, const Var& b);
/// x_i / ||x_i||; zero rows throw ContractError.
Var normalize_rows(const Var& x);
/// Pairwise cosine matrix of rows: [B,C] -> [B,B].
Var cosine_gram(const Var& x);
/// ||a - b||_F^2 -> [1,1].
Var frobenius_sq(const Var& a, const Var& b);

// Structure.
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(const Var& x, Index begin, Index count);
Var slice_cols(const Var& x, Index begin, Index count);
Var element(const Var& x, Index r, Index c);

using IndexMatrix = Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Indices of the k largest entries of each row, ordered by decreasing value;
/// ties resolve to the smaller column index. Not differentiable.
IndexMatrix topk_indices(const Matrix& scores, Index k);
/// y(i, t) = x(i, idx(i, t)).
Var gather_cols(const Var& x, const IndexMatrix& idx);
/// Dense [N, ncols] with y(i, idx(i, t)) = w(i, t), zero elsewhere. Indices per row must be distinct.
Var scatter_cols(const Var& w, const IndexMatrix& idx, Index ncols);

// Gradient control.
/// Forward identity; contributes no gradient to x.
Var stop_grad(const Var& x);
/// Inverted dropout. Identity when train is false or rate is 0.
Var dropout(const Var& x, double rate, Rng* rng, bool train);
/// g * a + (1 - g) * b with g a 1x1 variable.
Var gate_blend(const Var& a, const Var& b, const Var& g);

}  // namespace actdistill::ops
