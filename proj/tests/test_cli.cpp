#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "molnp/chem.hpp"
#include "molnp/cli.hpp"
#include "molnp/errors.hpp"
#include "json.hpp"

using namespace molnp;
using namespace molnp::cli;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

ErrorKind config_kind(const std::vector<std::string>& overrides, const std::string& json = "") {
  try {
    parse_run_config(json, overrides);
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::EmptyInput;
}

std::string config_message(const std::vector<std::string>& overrides) {
  try {
    parse_run_config("", overrides);
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("molnp_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Ten small molecules, a dense training function A and the objective F2.
  fs::path write_fixture() {
    const char* smiles[] = {"C", "CC", "CCC", "CCO", "CCN", "c1ccccc1", "CC(=O)O", "C1CCCCC1", "CCCl", "OCCO"};
    std::string tsv = "molecule_id\tsmiles\tA\tF2\n";
    for (int i = 0; i < 10; ++i) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "m%02d\t%s\t%.3f\t%.3f\n", i, smiles[i], -0.5 * i, -7.0 - ((i * 7) % 10) * 0.3);
      tsv += buf;
    }
    const fs::path p = dir_ / "fixture.tsv";
    spit(p, tsv);
    spit(dir_ / "dtrain.txt", "m00\nm01\nm02\nm03\nm04\n");
    spit(dir_ / "dtest.txt", "m05\nm06\nm07\nm08\nm09\n");
    spit(dir_ / "pool.txt", "m00\nm01\nm02\nm03\nm04\nm05\nm06\nm07\nm08\nm09\n");
    return p;
  }

  std::vector<std::string> base(const fs::path& dataset) const {
    return {"seed=1",
            "dataset=" + dataset.string(),
            "output_dir=" + (dir_ / "out").string(),
            "fingerprint.nbits=64",
            "split.dtrain_ids=" + (dir_ / "dtrain.txt").string(),
            "split.dtest_ids=" + (dir_ / "dtest.txt").string(),
            "split.ftest=[\"F2\"]",
            "model.encoder_hidden=[8]",
            "model.decoder_hidden=[8]",
            "model.repr_dim=4",
            "train.context_min=1",
            "train.context_max=3",
            "train.target_max=2"};
  }

  fs::path dir_;
};

}  // namespace

TEST(CliConfig, SeedIsRequired) {
  EXPECT_EQ(config_kind({}), ErrorKind::ConfigError);
  EXPECT_NE(config_message({}).find("'seed'"), std::string::npos);
  EXPECT_NO_THROW(parse_run_config("", {"seed=0"}));
}

TEST(CliConfig, FieldLevelMessages) {
  EXPECT_NE(config_message({"seed=0", "train.epochz=3"}).find("'train.epochz': unknown field"), std::string::npos);
  EXPECT_NE(config_message({"seed=0", "train.epochs=lots"}).find("'train.epochs'"), std::string::npos);
  EXPECT_NE(config_message({"seed=0", "fewshot.models=[\"svm\"]"}).find("'fewshot.models'"), std::string::npos);
  EXPECT_NE(config_message({"seed=0", "fingerprint.nbits=100"}).find("'fingerprint.nbits'"), std::string::npos);
  EXPECT_NE(config_message({"seed=0", "bo.strategies=[\"ucb\"]"}).find("'bo.strategies'"), std::string::npos);
  EXPECT_EQ(config_kind({"seed=-1"}), ErrorKind::ConfigError);
  EXPECT_EQ(config_kind({"novalue"}), ErrorKind::ConfigError);
  EXPECT_EQ(config_kind({}, "{not json"), ErrorKind::ConfigError);
}

TEST(CliConfig, FileAndOverridesMerge) {
  const auto c = parse_run_config(R"({"seed": 4, "train": {"epochs": 7}, "split": {"ftest": ["X"]}})",
                                  {"train.epochs=9", "model.repr_dim=16", "bo.objective=KIT"});
  EXPECT_EQ(c.seed, 4u);
  EXPECT_EQ(c.train.epochs, 9);
  EXPECT_EQ(c.architecture.repr_dim, 16);
  EXPECT_EQ(c.bo.objective, "KIT");
  EXPECT_EQ(c.split.ftest, std::vector<std::string>{"X"});
  EXPECT_EQ(c.train.episode.context_max, 256);
}

TEST(CliConfig, HashTracksContent) {
  const auto a = parse_run_config("", {"seed=1"});
  const auto b = parse_run_config(R"({"seed": 1})", {});
  const auto c = parse_run_config("", {"seed=2"});
  EXPECT_EQ(a.hash, b.hash);
  EXPECT_NE(a.hash, c.hash);
  EXPECT_EQ(a.hash.size(), 16u);
  EXPECT_EQ(output_directory(a, Command::Train), fs::path("out") / "train" / a.hash);
}

TEST(CliConfig, DefaultsParse) {
  auto tree = nlohmann::json::parse(default_config_json());
  EXPECT_TRUE(tree["seed"].is_null());
  tree["seed"] = 3;
  EXPECT_NO_THROW(parse_run_config(tree.dump(), {}));
}

TEST(CliConfig, ExitCodes) {
  EXPECT_EQ(exit_code(Error(ErrorKind::ConfigError, "")), 2);
  EXPECT_EQ(exit_code(Error(ErrorKind::MissingCheckpoint, "")), 2);
  EXPECT_EQ(exit_code(DataError(ErrorKind::RaggedRow, 3, "")), 3);
  EXPECT_EQ(exit_code(Error(ErrorKind::CacheInvalid, "")), 3);
  EXPECT_EQ(exit_code(Error(ErrorKind::NonFiniteLoss, "")), 4);
  EXPECT_EQ(exit_code(std::runtime_error("x")), 1);
  EXPECT_EQ(command_from_string("generalize"), Command::Generalize);
  EXPECT_THROW(command_from_string("serve"), Error);
}

TEST_F(CliTest, MissingDatasetFailsBeforeWork) {
  const auto c = parse_run_config("", {"seed=0", "dataset=" + (dir_ / "nope.tsv").string(), "output_dir=" + (dir_ / "out").string()});
  std::ostringstream log;
  try {
    run_command(Command::Train, c, log);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ConfigError);
    EXPECT_NE(std::string(e.what()).find("'dataset'"), std::string::npos);
  }
  EXPECT_FALSE(fs::exists(dir_ / "out"));
}

TEST_F(CliTest, FingerprintCache) {
  const auto data = write_fixture();
  std::string head = slurp(data);
  // Five molecules.
  std::istringstream in(head);
  std::string five, line;
  for (int i = 0; i < 6 && std::getline(in, line); ++i) five += line + "\n";
  spit(data, five);
  const auto c = parse_run_config("", base(data));
  std::ostringstream log;
  run_command(Command::Fingerprint, c, log);
  const fs::path cache = default_fingerprint_cache(c);
  ASSERT_TRUE(fs::exists(cache));
  EXPECT_EQ(read_fingerprint_cache(cache).records.size(), 5u);

  const auto stamp = fs::last_write_time(cache);
  std::ostringstream again;
  run_command(Command::Fingerprint, c, again);
  EXPECT_EQ(fs::last_write_time(cache), stamp);
  EXPECT_NE(again.str().find("up to date"), std::string::npos);

  std::string text = slurp(cache);
  text.replace(0, text.find('\n'), "#ecfp radius=banana");
  spit(cache, text);
  try {
    run_command(Command::Fingerprint, c, log);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::CacheInvalid);
    EXPECT_EQ(exit_code(e), 3);
    EXPECT_NE(std::string(e.what()).find(cache.filename().string()), std::string::npos);
  }
}

TEST_F(CliTest, TrainOneEpochIsDeterministic) {
  const auto data = write_fixture();
  auto args = base(data);
  args.push_back("train.epochs=1");
  args.push_back("train.checkpoints=[1]");
  const auto c = parse_run_config("", args);
  std::ostringstream log;
  const auto out = run_command(Command::Train, c, log);
  const std::string ckpt = slurp(out / "checkpoints" / "cnp_epoch1.ckpt");
  const std::string manifest = slurp(out / "manifest.json");
  const std::string train_log = slurp(out / "train_log.csv");
  EXPECT_FALSE(ckpt.empty());
  EXPECT_EQ(std::count(train_log.begin(), train_log.end(), '\n'), 2);
  EXPECT_EQ(train_log.rfind("epoch,split,metric,value\n1,train,loss,", 0), 0u);

  fs::remove_all(out);
  run_command(Command::Train, c, log);
  EXPECT_EQ(slurp(out / "checkpoints" / "cnp_epoch1.ckpt"), ckpt);
  EXPECT_EQ(slurp(out / "manifest.json"), manifest);
  const auto m = nlohmann::json::parse(manifest);
  EXPECT_EQ(m["config_hash"], c.hash);
  EXPECT_EQ(m["seed"], 1);
}

TEST_F(CliTest, RandomBoExhaustsTinyPool) {
  const auto data = write_fixture();
  auto args = base(data);
  args.insert(args.end(), {"bo.objective=F2", "bo.pool_ids=" + (dir_ / "pool.txt").string(), "bo.strategies=[\"random\"]",
                           "bo.n_init=5", "bo.n_iterations=5", "bo.n_seeds=1"});
  const auto c = parse_run_config("", args);
  std::ostringstream log;
  const auto out = run_command(Command::Bo, c, log);
  std::istringstream csv(slurp(out / "bo_traces.csv"));
  std::string line, last;
  int rows = -1;
  while (std::getline(csv, line)) {
    ++rows;
    last = line;
  }
  EXPECT_EQ(rows, 10);
  // F2 minimum over the fixture is -9.7 (i = 7).
  EXPECT_NE(last.find(",-9.6999999999999993"), std::string::npos) << last;
}

TEST_F(CliTest, GreedyBoNeedsCheckpoint) {
  const auto data = write_fixture();
  auto args = base(data);
  args.push_back("bo.strategies=[\"greedy\"]");
  const auto c = parse_run_config("", args);
  std::ostringstream log;
  try {
    run_command(Command::Bo, c, log);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingCheckpoint);
  }
}

TEST_F(CliTest, FewshotFssDeterministic) {
  const auto data = write_fixture();
  auto args = base(data);
  args.insert(args.end(), {"fewshot.context_sizes=[1]", "fewshot.models=[\"fss\"]", "fewshot.repeats=2"});
  const auto c = parse_run_config("", args);
  std::ostringstream log;
  const auto out = run_command(Command::Fewshot, c, log);
  const std::string first = slurp(out / "fewshot.csv");
  fs::remove_all(out);
  run_command(Command::Fewshot, c, log);
  EXPECT_EQ(slurp(out / "fewshot.csv"), first);
  EXPECT_NE(first.find(",fss,1,r2,"), std::string::npos);
}

TEST_F(CliTest, SynthThenGeneralize) {
  const auto sc = parse_run_config("", {"seed=5", "output_dir=" + (dir_ / "out").string(), "synth.n_functions=6",
                                        "synth.n_molecules=120", "synth.nbits=32"});
  std::ostringstream log;
  const auto synth_dir = run_command(Command::Synth, sc, log);
  const fs::path tsv = synth_dir / "synthetic.tsv";
  ASSERT_TRUE(fs::exists(tsv));

  const auto c = parse_run_config(
      "", {"seed=5", "dataset=" + tsv.string(), "output_dir=" + (dir_ / "out").string(), "fingerprint.nbits=32",
           "split.ftest=[\"f04\",\"f05\"]", "split.n_dtrain=50", "split.n_dtest=50", "model.encoder_hidden=[8]",
           "model.decoder_hidden=[8]", "model.repr_dim=4", "train.epochs=3", "train.context_max=10", "train.target_max=10",
           "calibrate.eval_context=10", "generalize.functions=[\"f04\",\"f05\"]"});
  const auto out = run_command(Command::Generalize, c, log);
  const std::string grid = slurp(out / "grid.txt");
  EXPECT_EQ(std::count(grid.begin(), grid.end(), '\n'), 3);
  EXPECT_NE(grid.find("Plain and QED-modified scores"), std::string::npos);
  EXPECT_TRUE(fs::exists(out / "generalization.csv"));
}

#ifdef MOLNP_CLI_PATH
TEST_F(CliTest, ExecutableExitCodes) {
  const std::string exe = MOLNP_CLI_PATH;
  const std::string quiet = " >/dev/null 2>&1";
  auto status = [](int raw) { return WEXITSTATUS(raw); };
  EXPECT_EQ(status(std::system((exe + " train" + quiet).c_str())), 2);
  EXPECT_EQ(status(std::system((exe + " train --set seed=0 --set train.bogus=1" + quiet).c_str())), 2);
  const fs::path bad = dir_ / "bad.tsv";
  spit(bad, "molecule_id\tsmiles\tA\nm1\tC\t1\nm2\tCC\n");
  EXPECT_EQ(status(std::system((exe + " train --set seed=0 --set dataset=" + bad.string() + " --set output_dir=" +
                                (dir_ / "out").string() + quiet)
                                   .c_str())),
            3);
  EXPECT_EQ(status(std::system((exe + " synth --set seed=0 --set synth.n_molecules=20 --set synth.n_functions=2 --set output_dir=" +
                                (dir_ / "out").string() + quiet)
                                   .c_str())),
            0);
}
#endif
