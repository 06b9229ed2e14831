#include "actdistill/gradcheck.hpp"

#include "actdistill/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace actdistill {
namespace {

void check_eps(double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-4)) {
    throw ContractError("finite_diff_grad: eps " + std::to_string(eps) + " outside [1e-7, 1e-4]");
  }
}

double checked(double v, std::size_t coord) {
  if (!std::isfinite(v)) {
    throw NumericalError("finite_diff_grad: non-finite function value at coordinate " +
                         std::to_string(coord));
  }
  return v;
}

}  // namespace

Matrix finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& theta,
                        double eps) {
  check_eps(eps);
  Tensor probe = theta;
  Matrix grad = Matrix::Zero(theta.values().rows(), theta.values().cols());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double x0 = theta.data()[i];
    probe.data()[i] = x0 + eps;
    const double fp = checked(f(probe), i);
    probe.data()[i] = x0 - eps;
    const double fm = checked(f(probe), i);
    probe.data()[i] = x0;
    grad.data()[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

Matrix finite_diff_grad_inplace(const std::function<double()>& f, Tensor& theta, double eps,
                                const std::optional<std::vector<std::size_t>>& coords) {
  check_eps(eps);
  Matrix grad = Matrix::Zero(theta.values().rows(), theta.values().cols());
  auto eval_coord = [&](std::size_t i) {
    const double x0 = theta.data()[i];
    theta.data()[i] = x0 + eps;
    const double fp = checked(f(), i);
    theta.data()[i] = x0 - eps;
    const double fm = checked(f(), i);
    theta.data()[i] = x0;
    grad.data()[i] = (fp - fm) / (2.0 * eps);
  };
  if (coords) {
    for (std::size_t i : *coords) {
      if (i >= theta.size()) throw ContractError("finite_diff_grad: coordinate out of range");
      eval_coord(i);
    }
  } else {
    for (std::size_t i = 0; i < theta.size(); ++i) eval_coord(i);
  }
  return grad;
}

double relative_error(const Matrix& analytic, const Matrix& numeric, double floor) {
  if (analytic.rows() != numeric.rows() || analytic.cols() != numeric.cols()) {
    throw ContractError("relative_error: shape mismatch");
  }
  const double scale =
      std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), floor});
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

double relative_error(const Matrix& analytic, const Matrix& numeric,
                      const std::vector<std::size_t>& coords, double floor) {
  double diff = 0.0, scale = floor;
  for (std::size_t i : coords) {
    const double a = analytic.data()[i], n = numeric.data()[i];
    diff = std::max(diff, std::abs(a - n));
    scale = std::max({scale, std::abs(a), std::abs(n)});
  }
  return diff / scale;
}

}  // namespace actdistill
