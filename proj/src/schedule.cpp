#include "actdistill/schedule.hpp"

#include "actdistill/error.hpp"
#include "actdistill/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace actdistill {

void TrainSchedule::validate() const {
  if (batch == 0) throw ConfigError("batch size must be >= 1");
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
  if (!(clip > 0.0)) throw ConfigError("gradient clip max-norm must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
}

std::size_t TrainSchedule::steps_per_epoch(std::size_t n_examples) const {
  return (n_examples + batch - 1) / batch;
}

std::size_t TrainSchedule::total_steps(std::size_t n_examples) const {
  return epochs * steps_per_epoch(n_examples);
}

double lr_at(std::size_t step, const TrainSchedule& s, std::size_t total_steps) {
  const std::size_t warmup = std::min(s.warmup, total_steps);
  if (step < warmup) {
    return s.lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (!s.cosine) return s.lr;
  if (step >= total_steps) return 0.0;
  const double span = static_cast<double>(total_steps - warmup);
  const double progress = static_cast<double>(step - warmup) / span;
  return 0.5 * s.lr * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0xE0000 + epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

}  // namespace actdistill
