#pragma once

#include "actdistill/tensor.hpp"

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

namespace actdistill {

/// Central-difference gradient (f(t + eps e_i) - f(t - eps e_i)) / 2 eps of a
/// scalar function of a standalone tensor. eps must lie in [1e-7, 1e-4].
/// Throws NumericalError naming the coordinate when f is non-finite.
Matrix finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& theta,
                        double eps);

/// Same rule for a tensor owned by a model: the tensor is perturbed in place
/// and restored. When `coords` is set only those flat indices are evaluated;
/// the others are left at zero.
Matrix finite_diff_grad_inplace(const std::function<double()>& f, Tensor& theta, double eps,
                                const std::optional<std::vector<std::size_t>>& coords = std::nullopt);

/// ||a - b||_inf / max(||a||_inf, ||b||_inf, floor).
double relative_error(const Matrix& analytic, const Matrix& numeric, double floor = 1e-8);

/// Relative error restricted to the listed flat coordinates.
double relative_error(const Matrix& analytic, const Matrix& numeric,
                      const std::vector<std::size_t>& coords, double floor = 1e-8);

}  // namespace actdistill
