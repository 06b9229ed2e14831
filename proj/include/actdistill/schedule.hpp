#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace actdistill {

struct TrainSchedule {
  std::size_t epochs = 5;
  std::size_t batch = 16;
  double lr = 1e-3;
  std::size_t warmup = 100;
  bool cosine = true;
  double clip = 1.0;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t steps_per_epoch(std::size_t n_examples) const;
  std::size_t total_steps(std::size_t n_examples) const;
};

/// Linear warmup from 0 to the base rate, then cosine decay reaching 0 at
/// total_steps (or constant when cosine is off). Warmup longer than the run is
/// truncated to the run length.
double lr_at(std::size_t step, const TrainSchedule& s, std::size_t total_steps);

/// Deterministic permutation of 0..n-1 for one epoch.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

}  // namespace actdistill
