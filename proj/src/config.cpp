#include "actdistill/config.hpp"

#include "actdistill/checkpoint.hpp"
#include "actdistill/error.hpp"
#include "actdistill/hash.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace actdistill {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError(std::string(key) + ": cannot parse '" + std::string(text) + "'");
  }
  return v;
}

double parse_real(std::string_view key, std::string_view text) {
  const double v = parse_number<double>(key, text);
  if (!std::isfinite(v)) throw ConfigError(std::string(key) + ": value must be finite");
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(std::string(key) + ": expected true or false, got '" + std::string(text) + "'");
}

void require(bool ok, std::string_view key, const std::string& what) {
  if (!ok) throw ConfigError(std::string(key) + " " + what);
}

struct Entry {
  ConfigKey info;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, std::string_view)> set;
};

// Field binders; `check` validates a single parsed value.
template <typename T>
Entry size_key(std::string key, std::string doc, T Config::*group, std::size_t T::*field,
               std::size_t min_value) {
  Entry e{{key, std::move(doc)}, nullptr, nullptr};
  e.get = [group, field](const Config& c) { return std::to_string(c.*group.*field); };
  e.set = [key, group, field, min_value](Config& c, std::string_view v) {
    const auto n = parse_number<std::size_t>(key, v);
    require(n >= min_value, key, "must be >= " + std::to_string(min_value));
    c.*group.*field = n;
  };
  return e;
}

Entry top_size_key(std::string key, std::string doc, std::size_t Config::*field, std::size_t min_value) {
  Entry e{{key, std::move(doc)}, nullptr, nullptr};
  e.get = [field](const Config& c) { return std::to_string(c.*field); };
  e.set = [key, field, min_value](Config& c, std::string_view v) {
    const auto n = parse_number<std::size_t>(key, v);
    require(n >= min_value, key, "must be >= " + std::to_string(min_value));
    c.*field = n;
  };
  return e;
}

template <typename T>
Entry seed_key(std::string key, std::string doc, T Config::*group, std::uint64_t T::*field) {
  Entry e{{key, std::move(doc)}, nullptr, nullptr};
  e.get = [group, field](const Config& c) { return std::to_string(c.*group.*field); };
  e.set = [key, group, field](Config& c, std::string_view v) {
    c.*group.*field = parse_number<std::uint64_t>(key, v);
  };
  return e;
}

using RealCheck = std::function<bool(double)>;

template <typename T>
Entry real_key(std::string key, std::string doc, T Config::*group, double T::*field, RealCheck check,
               std::string rule) {
  Entry e{{key, std::move(doc)}, nullptr, nullptr};
  e.get = [group, field](const Config& c) { return format_double(c.*group.*field); };
  e.set = [key, group, field, check, rule](Config& c, std::string_view v) {
    const double x = parse_real(key, v);
    require(check(x), key, rule);
    c.*group.*field = x;
  };
  return e;
}

Entry top_real_key(std::string key, std::string doc, double Config::*field, RealCheck check,
                   std::string rule) {
  Entry e{{key, std::move(doc)}, nullptr, nullptr};
  e.get = [field](const Config& c) { return format_double(c.*field); };
  e.set = [key, field, check, rule](Config& c, std::string_view v) {
    const double x = parse_real(key, v);
    require(check(x), key, rule);
    c.*field = x;
  };
  return e;
}

template <typename T>
Entry bool_key(std::string key, std::string doc, T Config::*group, bool T::*field) {
  Entry e{{key, std::move(doc)}, nullptr, nullptr};
  e.get = [group, field](const Config& c) { return std::string(c.*group.*field ? "true" : "false"); };
  e.set = [key, group, field](Config& c, std::string_view v) { c.*group.*field = parse_bool(key, v); };
  return e;
}

const RealCheck kNonNegative = [](double x) { return x >= 0.0; };
const RealCheck kPositive = [](double x) { return x > 0.0; };
const RealCheck kAny = [](double) { return true; };
const RealCheck kUnitOpen = [](double x) { return x > 0.0 && x < 1.0; };
const RealCheck kRate = [](double x) { return x >= 0.0 && x < 1.0; };

void add_schedule(std::vector<Entry>& v, const std::string& ns, TrainSchedule Config::*s,
                  const std::string& what) {
  v.push_back(size_key(ns + ".epochs", what + " epochs", s, &TrainSchedule::epochs, 0));
  v.push_back(size_key(ns + ".batch", what + " batch size", s, &TrainSchedule::batch, 1));
  v.push_back(real_key(ns + ".lr", what + " base learning rate", s, &TrainSchedule::lr, kNonNegative, "must be >= 0"));
  v.push_back(size_key(ns + ".warmup", what + " linear warmup steps (clamped to the run length)", s, &TrainSchedule::warmup, 0));
  v.push_back(bool_key(ns + ".cosine", what + " cosine decay after warmup", s, &TrainSchedule::cosine));
  v.push_back(real_key(ns + ".clip", what + " gradient clip max-norm", s, &TrainSchedule::clip, kPositive, "must be > 0"));
  v.push_back(real_key(ns + ".weight_decay", what + " AdamW decoupled weight decay", s, &TrainSchedule::weight_decay, kNonNegative, "must be >= 0"));
}

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = [] {
    std::vector<Entry> v;
    using C = Config;
    v.push_back(size_key("world.n_tokens", "visual tokens per episode", &C::world, &WorldConfig::n_tokens, 2));
    v.push_back(size_key("world.token_dim", "visual token width (>= 11)", &C::world, &WorldConfig::token_dim, 11));
    v.push_back(size_key("world.n_objects", "objects per scene, 2..8", &C::world, &WorldConfig::n_objects, 2));
    v.push_back(real_key("world.noise_std", "distractor token noise", &C::world, &WorldConfig::noise_std, kNonNegative, "must be >= 0"));
    v.push_back(seed_key("world.seed", "episode generator seed", &C::world, &WorldConfig::seed));
    v.push_back(top_size_key("world.n_train", "training episodes", &C::n_train, 1));
    v.push_back(top_size_key("world.n_test", "test episodes (generated after the training ones)", &C::n_test, 1));

    v.push_back(size_key("backbone.layers", "layer count L", &C::backbone, &BackboneConfig::layers, 2));
    v.push_back(size_key("backbone.width", "hidden width d", &C::backbone, &BackboneConfig::width, 1));
    v.push_back(size_key("backbone.heads", "attention heads (must divide width)", &C::backbone, &BackboneConfig::heads, 1));
    v.push_back(size_key("backbone.ffn_width", "feed-forward hidden width", &C::backbone, &BackboneConfig::ffn_width, 1));
    v.push_back(size_key("backbone.capsule_dim", "capsule width d_c (<= width)", &C::backbone, &BackboneConfig::capsule_dim, 1));
    v.push_back(seed_key("backbone.seed", "teacher initialization seed", &C::backbone, &BackboneConfig::seed));

    v.push_back(size_key("graph.k", "neighbors kept per token", &C::graph, &GraphOptions::k, 1));
    v.push_back(size_key("graph.affinity_dim", "affinity projection width d_a", &C::graph, &GraphOptions::affinity_dim, 1));
    v.push_back(real_key("graph.dropout", "dropout in graph passes and heads", &C::graph, &GraphOptions::dropout, kRate, "must be in [0, 1)"));
    {
      Entry e{{"graph.kind", "capsule encoder: gat or mlp (ablation)"}, nullptr, nullptr};
      e.get = [](const Config& c) { return std::string(c.graph.kind == EncapsulationKind::kGat ? "gat" : "mlp"); };
      e.set = [](Config& c, std::string_view s) {
        if (s == "gat") c.graph.kind = EncapsulationKind::kGat;
        else if (s == "mlp") c.graph.kind = EncapsulationKind::kMlp;
        else throw ConfigError("graph.kind: expected gat or mlp, got '" + std::string(s) + "'");
      };
      v.push_back(std::move(e));
    }

    v.push_back(real_key("loss.alpha", "semantic loss weight", &C::loss, &LossWeights::alpha, kNonNegative, "must be >= 0"));
    v.push_back(real_key("loss.beta", "action loss weight", &C::loss, &LossWeights::beta, kNonNegative, "must be >= 0"));
    v.push_back(real_key("loss.eta", "relational term weight inside the semantic loss", &C::loss, &LossWeights::eta, kNonNegative, "must be >= 0"));
    v.push_back(real_key("loss.gamma", "load-balancing weight", &C::loss, &LossWeights::gamma, kNonNegative, "must be >= 0"));
    v.push_back(real_key("loss.kappa", "layer weight exponent, lambda_l = (l/L)^kappa", &C::loss, &LossWeights::kappa, kNonNegative, "must be >= 0"));
    v.push_back(bool_key("loss.use_semantic", "include the semantic loss", &C::loss, &LossWeights::use_semantic));
    v.push_back(bool_key("loss.use_action", "include the action loss", &C::loss, &LossWeights::use_action));
    v.push_back(bool_key("loss.use_load_balance", "include the load-balancing loss", &C::loss, &LossWeights::use_load_balance));
    {
      Entry e{{"loss.stop_gradient", "stop-gradient on the previous-layer action term"}, nullptr, nullptr};
      e.get = [](const Config& c) { return std::string(c.stop_gradient ? "true" : "false"); };
      e.set = [](Config& c, std::string_view s) { c.stop_gradient = parse_bool("loss.stop_gradient", s); };
      v.push_back(std::move(e));
    }

    v.push_back(top_real_key("router.tau", "inference threshold, layer runs iff g >= tau", &C::tau, kUnitOpen, "must be in (0, 1)"));
    v.push_back(top_real_key("router.bias_init", "initial router bias", &C::router_bias_init, kAny, ""));

    add_schedule(v, "train", &C::train, "stage II");
    v.push_back(seed_key("train.seed", "stage II shuffling and dropout seed", &C::train, &TrainSchedule::seed));
    add_schedule(v, "teacher", &C::teacher, "teacher");
    v.push_back(seed_key("teacher.seed", "teacher shuffling seed", &C::teacher, &TrainSchedule::seed));
    add_schedule(v, "stage1", &C::stage1, "stage I");
    v.push_back(seed_key("stage1.seed", "probe initialization, shuffling and dropout seed", &C::stage1, &TrainSchedule::seed));
    v.push_back(top_size_key("stage1.calib_episodes", "episodes used to fit capsule standardization", &C::calib_episodes, 1));

    v.push_back(top_real_key("eval.success_threshold", "success iff max |pred - a| < threshold", &C::success_threshold, kPositive, "must be > 0"));
    {
      Entry e{{"paths.in", "directory holding input artifacts (default: --out)"}, nullptr, nullptr};
      e.get = [](const Config& c) { return c.paths_in; };
      e.set = [](Config& c, std::string_view s) { c.paths_in = std::string(s); };
      v.push_back(std::move(e));
    }
    return v;
  }();
  return entries;
}

const Entry& find_entry(std::string_view key) {
  for (const Entry& e : registry()) {
    if (e.info.key == key) return e;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

Config::Config() {
  teacher.epochs = 30;
  teacher.lr = 2e-3;
  teacher.warmup = 100;
  teacher.seed = 3;
  stage1.epochs = 5;
  stage1.seed = 4;
  train.seed = 2;
}

void Config::validate() const {
  world.validate();
  backbone_config().validate();
  if (graph.k > world.n_tokens + 1) {
    throw ConfigError("graph.k must be <= world.n_tokens + 1 (token count)");
  }
  loss.validate();
  train.validate();
  teacher.validate();
  stage1.validate();
}

std::string Config::dump() const {
  std::string out;
  for (const Entry& e : registry()) out += e.info.key + " = " + e.get(*this) + "\n";
  return out;
}

std::uint64_t Config::hash() const {
  Fnv1a h;
  h.update(dump());
  return h.digest();
}

void Config::set(std::string_view key, std::string_view value) { find_entry(key).set(*this, value); }

BackboneConfig Config::backbone_config() const {
  BackboneConfig b = backbone;
  b.token_dim = world.token_dim;
  b.instruction_dim = static_cast<std::size_t>(kInstructionDim);
  return b;
}

Stage2Options Config::stage2_options() const {
  Stage2Options o;
  o.weights = loss;
  o.graph = graph;
  o.schedule = train;
  o.router_bias_init = router_bias_init;
  o.stop_gradient = stop_gradient;
  return o;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const Entry& e : registry()) k.push_back(e.info);
    return k;
  }();
  return keys;
}

Config parse_config(std::string_view text, Config base) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash_pos = line.find('#');
    const std::string body = trim(std::string_view(line).substr(0, hash_pos));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(number) + ": expected 'key = value'");
    }
    try {
      base.set(trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(number) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_override(Config& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  }
  cfg.set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void apply_seed(Config& cfg, std::uint64_t seed) {
  cfg.world.seed = seed;
  cfg.backbone.seed = seed + 1;
  cfg.train.seed = seed + 2;
  cfg.teacher.seed = seed + 3;
  cfg.stage1.seed = seed + 4;
}

}  // namespace actdistill
