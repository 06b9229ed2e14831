#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace actdistill {

/// Analytic versus central-difference gradient of one random instance, over
/// the concatenation of all checked tensors.
struct GradCheck {
  std::string check;
  std::size_t instance;
  std::size_t tensors;
  std::size_t coords;
  double rel_error;
  bool passed;
};

struct GradSuiteOptions {
  std::size_t instances = 10;  // per registered check
  double tolerance = 1e-5;
  double eps = 1e-6;
  std::size_t max_coords = 0;  // sampled coordinates per tensor; 0 = all
  std::uint64_t seed = 7;
};

/// Registered checks: capsule pipeline, auxiliary loss, semantic loss, action
/// loss, load balancing and the full stage II objective. Random small
/// instances (N <= 8, d <= 16).
std::vector<std::string> gradient_check_names();

std::vector<GradCheck> run_gradient_suite(const GradSuiteOptions& opts = {});

}  // namespace actdistill
