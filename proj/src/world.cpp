#include "actdistill/world.hpp"

#include "actdistill/checkpoint.hpp"
#include "actdistill/error.hpp"
#include "actdistill/hash.hpp"
#include "actdistill/rng.hpp"

#include <numeric>
#include <string>

namespace actdistill {

void WorldConfig::validate() const {
  if (token_dim < static_cast<std::size_t>(kIdCodeDim + kPositionDim)) {
    throw ConfigError("world.token_dim must be >= 11, got " + std::to_string(token_dim));
  }
  if (n_objects < 2) throw ConfigError("world.n_objects must be >= 2");
  if (n_objects > static_cast<std::size_t>(kIdCodeDim)) {
    throw ConfigError("world.n_objects must be <= 8 (one code per id)");
  }
  if (n_objects > n_tokens) throw ConfigError("world.n_objects must be <= world.n_tokens");
  if (!(noise_std >= 0.0)) throw ConfigError("world.noise_std must be non-negative");
}

std::uint64_t WorldConfig::hash() const {
  Fnv1a h;
  h.update_value(static_cast<std::uint64_t>(n_tokens));
  h.update_value(static_cast<std::uint64_t>(token_dim));
  h.update_value(static_cast<std::uint64_t>(n_objects));
  h.update_value(noise_std);
  h.update_value(seed);
  return h.digest();
}

ActionVector compose_action(const Position& target, const Position& receptacle, double gripper) {
  ActionVector a;
  const Position delta = receptacle - target;
  a.head<3>() = delta;
  const double norm = delta.norm();
  if (norm > 0.0) {
    a.segment<3>(3) = 0.1 * delta / norm;
  } else {
    a.segment<3>(3).setZero();
  }
  a(6) = gripper;
  return a;
}

Episode gen_episode(const WorldConfig& cfg, std::uint64_t index) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, index));
  const Index n = static_cast<Index>(cfg.n_tokens);
  const Index dim = static_cast<Index>(cfg.token_dim);

  // Distinct object ids and distinct token slots by partial Fisher-Yates.
  std::vector<Index> ids(kIdCodeDim);
  std::iota(ids.begin(), ids.end(), Index{0});
  std::vector<Index> slots(static_cast<std::size_t>(n));
  std::iota(slots.begin(), slots.end(), Index{0});
  for (std::size_t i = 0; i < cfg.n_objects; ++i) {
    std::swap(ids[i], ids[i + rng.below(ids.size() - i)]);
    std::swap(slots[i], slots[i + rng.below(slots.size() - i)]);
  }

  Episode e;
  e.visual = Matrix::Zero(n, dim);
  std::vector<Position> positions(cfg.n_objects);
  for (std::size_t o = 0; o < cfg.n_objects; ++o) {
    for (Index c = 0; c < 3; ++c) positions[o](c) = rng.uniform(-1.0, 1.0);
    auto row = e.visual.row(slots[o]);
    row(ids[o]) = 1.0;
    row.segment(kIdCodeDim, kPositionDim) = positions[o];
  }
  for (std::size_t s = cfg.n_objects; s < slots.size(); ++s) {
    for (Index c = 0; c < dim; ++c) e.visual(slots[s], c) = cfg.noise_std * rng.normal();
  }
  const double gripper = rng.bernoulli(0.5) ? 1.0 : -1.0;

  // Objects 0 and 1 are target and receptacle; the rest are distractor objects.
  e.instruction = RowVector::Zero(kInstructionDim);
  e.instruction(ids[0]) = 1.0;
  e.instruction(kIdCodeDim + ids[1]) = 1.0;
  e.instruction(2 * kIdCodeDim) = gripper;
  e.action = compose_action(positions[0], positions[1], gripper);
  return e;
}

namespace {

Position find_object(const Episode& e, const Eigen::Ref<const RowVector>& code,
                     const char* role) {
  for (Index i = 0; i < e.visual.rows(); ++i) {
    if (e.visual.row(i).head(kIdCodeDim) == code) {
      return e.visual.row(i).segment(kIdCodeDim, kPositionDim);
    }
  }
  throw ContractError(std::string("oracle_action: instruction ") + role +
                      " id is absent from the visual tokens");
}

}  // namespace

ActionVector oracle_action(const Episode& e) {
  if (e.instruction.size() != kInstructionDim ||
      e.visual.cols() < kIdCodeDim + kPositionDim) {
    throw ContractError("oracle_action: malformed episode");
  }
  const Position target = find_object(e, e.instruction.segment(0, kIdCodeDim), "target");
  const Position receptacle =
      find_object(e, e.instruction.segment(kIdCodeDim, kIdCodeDim), "receptacle");
  return compose_action(target, receptacle, e.instruction(2 * kIdCodeDim));
}

std::uint64_t Dataset::content_hash() const {
  Fnv1a h;
  h.update_value(static_cast<std::uint64_t>(episodes.size()));
  for (const Episode& e : episodes) {
    h.update(e.visual.data(), sizeof(double) * static_cast<std::size_t>(e.visual.size()));
    h.update(e.instruction.data(),
             sizeof(double) * static_cast<std::size_t>(e.instruction.size()));
    h.update(e.action.data(), sizeof(double) * kActionDim);
  }
  return h.digest();
}

std::map<std::string, std::string> Dataset::manifest() const {
  return {
      {"kind", "dataset"},
      {"world.n_tokens", std::to_string(config.n_tokens)},
      {"world.token_dim", std::to_string(config.token_dim)},
      {"world.n_objects", std::to_string(config.n_objects)},
      {"world.noise_std", format_double(config.noise_std)},
      {"world.seed", std::to_string(config.seed)},
      {"first_index", std::to_string(first_index)},
      {"count", std::to_string(episodes.size())},
      {"config_hash", hex_digest(config.hash())},
      {"content_hash", hex_digest(content_hash())},
  };
}

Dataset make_dataset(const WorldConfig& cfg, std::size_t n, std::uint64_t first_index) {
  if (n == 0) throw ContractError("make_dataset: n_episodes must be >= 1");
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  ds.first_index = first_index;
  ds.episodes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ds.episodes.push_back(gen_episode(cfg, first_index + i));
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  Checkpoint ck;
  ck.manifest = ds.manifest();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Episode& e = ds.episodes[i];
    const std::string base = "episode/" + std::to_string(i) + "/";
    ck.add(base + "v", Tensor::from_matrix(e.visual));
    ck.add(base + "l", Tensor::from_row(e.instruction));
    ck.add(base + "a", Tensor::from_row(e.action));
  }
  write_checkpoint(ck, path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  Checkpoint ck = read_checkpoint(path);
  if (ck.manifest_value("kind") != "dataset") {
    throw IntegrityError(IntegrityCode::kMalformed, path.string() + " is not a dataset");
  }
  Dataset ds;
  ds.config.n_tokens = std::stoull(ck.manifest_value("world.n_tokens"));
  ds.config.token_dim = std::stoull(ck.manifest_value("world.token_dim"));
  ds.config.n_objects = std::stoull(ck.manifest_value("world.n_objects"));
  ds.config.noise_std = std::stod(ck.manifest_value("world.noise_std"));
  ds.config.seed = std::stoull(ck.manifest_value("world.seed"));
  ds.first_index = std::stoull(ck.manifest_value("first_index"));
  const std::size_t count = std::stoull(ck.manifest_value("count"));
  ds.episodes.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string base = "episode/" + std::to_string(i) + "/";
    Episode& e = ds.episodes[i];
    e.visual = ck.get(base + "v", {ds.config.n_tokens, ds.config.token_dim}).values();
    e.instruction = ck.get(base + "l", {static_cast<std::size_t>(kInstructionDim)}).values();
    e.action = ck.get(base + "a", {static_cast<std::size_t>(kActionDim)}).values();
  }
  if (hex_digest(ds.content_hash()) != ck.manifest_value("content_hash")) {
    throw IntegrityError(IntegrityCode::kHashMismatch, path.string() + ": dataset content hash");
  }
  return ds;
}

}  // namespace actdistill
