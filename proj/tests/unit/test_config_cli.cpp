#include "actdistill/config.hpp"
#include "actdistill/error.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

using namespace actdistill;
namespace fs = std::filesystem;

namespace {

const char* kSmall =
    "world.n_train=24 world.n_test=8 backbone.layers=2 backbone.width=8 backbone.heads=2 "
    "backbone.ffn_width=16 backbone.capsule_dim=4 graph.k=4 graph.affinity_dim=4 "
    "teacher.epochs=1 teacher.batch=8 stage1.epochs=1 stage1.batch=8 stage1.calib_episodes=16 "
    "train.epochs=1 train.batch=8";

std::string small_sets() {
  std::istringstream in(kSmall);
  std::string out, kv;
  while (in >> kv) out += " --set " + kv;
  return out;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(ACTDISTILL_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("actdistill_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Config, Defaults) {
  const Config c;
  EXPECT_EQ(c.backbone.layers, 6u);
  EXPECT_EQ(c.tau, 0.5);
  EXPECT_EQ(c.graph.k, 8u);
  EXPECT_EQ(c.loss.kappa, 2.0);
  EXPECT_EQ(c.router_bias_init, -1.0);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, DumpParsesBackToSameHash) {
  Config c;
  apply_override(c, "loss.gamma=0.2");
  const Config back = parse_config(c.dump());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(back.dump(), c.dump());
  EXPECT_NE(c.hash(), Config().hash());
}

TEST(Config, EveryKeyIsDocumentedAndDumped) {
  const std::string dump = Config().dump();
  std::set<std::string> seen;
  for (const auto& k : config_keys()) {
    EXPECT_FALSE(k.doc.empty()) << k.key;
    EXPECT_TRUE(seen.insert(k.key).second) << k.key;
    EXPECT_NE(dump.find(k.key + " ="), std::string::npos) << k.key;
  }
}

TEST(Config, ParseWithCommentsAndBlankLines) {
  const Config c = parse_config("# header\n\nbackbone.layers = 4  # fewer\n  router.tau=0.7\n");
  EXPECT_EQ(c.backbone.layers, 4u);
  EXPECT_EQ(c.tau, 0.7);
}

TEST(Config, ErrorsCarryLineNumber) {
  try {
    parse_config("backbone.layers = 4\nno_equals_sign\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  try {
    parse_config("\n\nbogus.key = 1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Config, RejectsBadValues) {
  Config c;
  EXPECT_THROW(apply_override(c, "graph.k=0"), ConfigError);
  EXPECT_THROW(apply_override(c, "router.tau=1"), ConfigError);
  EXPECT_THROW(apply_override(c, "router.tau=abc"), ConfigError);
  EXPECT_THROW(apply_override(c, "loss.alpha=-1"), ConfigError);
  EXPECT_THROW(apply_override(c, "loss.alpha=nan"), ConfigError);
  EXPECT_THROW(apply_override(c, "graph.dropout=1"), ConfigError);
  EXPECT_THROW(apply_override(c, "loss.use_action=maybe"), ConfigError);
  EXPECT_THROW(apply_override(c, "graph.kind=cnn"), ConfigError);
  EXPECT_THROW(apply_override(c, "no_assignment"), ConfigError);
  EXPECT_THROW(apply_override(c, "world.n_train=-3"), ConfigError);
  // Rejected overrides leave the config untouched.
  EXPECT_EQ(c.hash(), Config().hash());
}

TEST(Config, CrossKeyValidation) {
  Config c;
  apply_override(c, "backbone.heads=5");
  EXPECT_THROW(c.validate(), ConfigError);
  c = Config();
  apply_override(c, "graph.k=100");
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, SeedMapping) {
  Config c;
  apply_seed(c, 10);
  EXPECT_EQ(c.world.seed, 10u);
  EXPECT_EQ(c.backbone.seed, 11u);
  EXPECT_EQ(c.train.seed, 12u);
  EXPECT_EQ(c.teacher.seed, 13u);
  EXPECT_EQ(c.stage1.seed, 14u);
}

TEST(Config, MissingFile) {
  EXPECT_THROW(load_config("/nonexistent/actdistill.cfg"), ConfigError);
}

TEST(Cli, UnknownKeyExitsTwo) {
  const fs::path d = fresh_dir("unknown");
  EXPECT_EQ(run_cli("gen-data --out " + d.string() + " --set bogus.key=1", d / "log"), 2);
  EXPECT_NE(slurp(d / "log").find("bogus.key"), std::string::npos);
  EXPECT_EQ(run_cli("no-such-command", d / "log"), 2);
}

TEST(Cli, GenDataIsReproducible) {
  const fs::path a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
  ASSERT_EQ(run_cli("gen-data --out " + a.string() + small_sets(), a / "log"), 0);
  ASSERT_EQ(run_cli("gen-data --out " + b.string() + small_sets(), b / "log"), 0);
  EXPECT_EQ(slurp(a / "datasets.csv"), slurp(b / "datasets.csv"));
  EXPECT_EQ(slurp(a / "train.actd"), slurp(b / "train.actd"));
  const fs::path c = fresh_dir("gen_c");
  ASSERT_EQ(run_cli("gen-data --seed 5 --out " + c.string() + small_sets(), c / "log"), 0);
  EXPECT_NE(slurp(a / "datasets.csv"), slurp(c / "datasets.csv"));
}

TEST(Cli, StagedPipelineAndCorruption) {
  const fs::path d = fresh_dir("stages");
  const std::string common = " --out " + d.string() + small_sets();
  for (const char* cmd : {"gen-data", "train-teacher", "stage1", "stage2", "eval", "sweep-tau", "sweep-skip",
                          "activation-hist"}) {
    ASSERT_EQ(run_cli(std::string(cmd) + common, d / "log"), 0) << cmd << ": " << slurp(d / "log");
  }
  for (const char* f : {"teacher_loss.csv", "stage1_loss.csv", "probe_mse.csv", "stage2_loss.csv", "eval.csv",
                        "gates.csv", "sweep_tau.csv", "sweep_skip.csv", "activation_hist.csv"}) {
    EXPECT_TRUE(fs::exists(d / f)) << f;
  }
  EXPECT_EQ(slurp(d / "eval.csv").rfind("tau,success,", 0), 0u);

  // A flipped byte in the student checkpoint is an integrity failure.
  std::string bytes = slurp(d / "student.actd");
  bytes[bytes.size() / 2] ^= 0x01;
  std::ofstream(d / "student.actd", std::ios::binary) << bytes;
  EXPECT_EQ(run_cli("eval" + common, d / "log"), 3);
  EXPECT_NE(slurp(d / "log").find("integrity"), std::string::npos);

  // A model-shape override that disagrees with the stored teacher is a usage error.
  EXPECT_EQ(run_cli("stage1" + common + " --set backbone.layers=3", d / "log"), 2);
  // Data regenerated under another world seed no longer matches the stored splits.
  EXPECT_EQ(run_cli("train-teacher" + common + " --set world.seed=99", d / "log"), 3);
  EXPECT_EQ(run_cli("sweep-tau" + common + " --taus 0.5,x", d / "log"), 2);
}

TEST(Cli, GradcheckSmall) {
  const fs::path d = fresh_dir("gradcheck");
  EXPECT_EQ(run_cli("gradcheck --instances 1 --out " + d.string(), d / "log"), 0) << slurp(d / "log");
  EXPECT_TRUE(fs::exists(d / "gradcheck.csv"));
}
