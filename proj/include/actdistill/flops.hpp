#pragma once

#include "actdistill/backbone.hpp"

#include <vector>

namespace actdistill {

/// Analytic cost model, 1 multiply-accumulate = 2 FLOPs.
///
/// Per layer with N tokens, width d and FFN width f:
///   attention 2 (4 N d^2 + 2 N^2 d), feed-forward 2 (2 N d f).
/// Fixed costs (paid once per input): encoders, router, final head.
struct FlopsModel {
  std::vector<double> layer_costs;
  double fixed = 0.0;

  static FlopsModel from_config(const BackboneConfig& cfg, std::size_t visual_tokens);

  double dense() const;
  double backbone_dense() const;
  /// fixed + sum of executed-layer costs.
  double routed(const std::vector<bool>& mask) const;
};

struct FlopsCount {
  double routed;
  double dense;
  double ratio;           // routed / dense, fixed costs included
  double backbone_ratio;  // executed-layer cost / all-layer cost
};

FlopsCount count_flops(const FlopsModel& model, const std::vector<bool>& mask);

}  // namespace actdistill
