#include "actdistill/flops.hpp"

#include "actdistill/error.hpp"

#include <numeric>

namespace actdistill {

FlopsModel FlopsModel::from_config(const BackboneConfig& cfg, std::size_t visual_tokens) {
  const double n = static_cast<double>(visual_tokens + 1);
  const double d = static_cast<double>(cfg.width);
  const double f = static_cast<double>(cfg.ffn_width);
  const double attention = 2.0 * (4.0 * n * d * d + 2.0 * n * n * d);
  const double ffn = 2.0 * (2.0 * n * d * f);
  FlopsModel m;
  m.layer_costs.assign(cfg.layers, attention + ffn);
  const double encoders = 2.0 * (static_cast<double>(visual_tokens) * cfg.token_dim * d +
                                 static_cast<double>(cfg.instruction_dim) * d);
  const double router = 2.0 * static_cast<double>(cfg.layers) * 2.0 * d;
  const double head = 2.0 * (d * d + d * 7.0);
  m.fixed = encoders + router + head;
  return m;
}

double FlopsModel::backbone_dense() const {
  return std::accumulate(layer_costs.begin(), layer_costs.end(), 0.0);
}

double FlopsModel::dense() const { return fixed + backbone_dense(); }

double FlopsModel::routed(const std::vector<bool>& mask) const {
  if (mask.size() != layer_costs.size()) {
    throw ContractError("count_flops: mask length " + std::to_string(mask.size()) + " != L=" +
                        std::to_string(layer_costs.size()));
  }
  double total = fixed;
  for (std::size_t l = 0; l < mask.size(); ++l) {
    if (mask[l]) total += layer_costs[l];
  }
  return total;
}

FlopsCount count_flops(const FlopsModel& model, const std::vector<bool>& mask) {
  FlopsCount c;
  c.routed = model.routed(mask);
  c.dense = model.dense();
  c.ratio = c.routed / c.dense;
  c.backbone_ratio = (c.routed - model.fixed) / model.backbone_dense();
  return c;
}

}  // namespace actdistill
