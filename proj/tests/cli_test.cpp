#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "exlin/cli/commands.hpp"

using namespace exlin;
using cli::json;
namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("exlin_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(const std::string& cmd, const json& cfg, const std::string& sub = "out", std::uint64_t seed = 7) {
    log_.str("");
    err_.str("");
    return cli::run_command(cmd, cfg, seed, (dir_ / sub).string(), log_, err_);
  }
  std::string path(const std::string& rel) const { return (dir_ / rel).string(); }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
  }
  static json short_data(double duration) {
    return {{"data", {{"file", "data.csv"}, {"duration", duration}, {"step", 0.02}, {"substeps", 2}}}};
  }

  fs::path dir_;
  std::ostringstream log_, err_;
};

}  // namespace

// ---- gen-data ----------------------------------------------------------------------------

TEST_F(Cli, ZeroDurationGivesHeaderOnlyFile) {
  ASSERT_EQ(run("gen-data", short_data(0.0)), cli::kOk) << err_.str();
  const std::string csv = slurp(dir_ / "out" / "data.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1);
  EXPECT_EQ(csv.rfind("t,v1,v2,v3,d1,d2,y1,y2,y3,z1,z2,ydot1,ydot2,ydot3,ddot1,ddot2", 0), 0u);
}

TEST_F(Cli, TeacherDatasetPassesInvariantsOnReload) {
  ASSERT_EQ(run("gen-data", short_data(4.0)), cli::kOk) << err_.str();
  const model::LoadedDataset ds = model::read_dataset(path("out/data.csv"));
  EXPECT_EQ(ds.data.size(), 200u);
  EXPECT_TRUE(fs::exists(dir_ / "out" / "gen-data.config.json"));
}

TEST_F(Cli, SameSeedGivesByteIdenticalCsvAndOtherSeedDoesNot) {
  ASSERT_EQ(run("gen-data", short_data(2.0), "a"), cli::kOk);
  ASSERT_EQ(run("gen-data", short_data(2.0), "b"), cli::kOk);
  ASSERT_EQ(run("gen-data", short_data(2.0), "c", 8), cli::kOk);
  EXPECT_EQ(slurp(dir_ / "a" / "data.csv"), slurp(dir_ / "b" / "data.csv"));
  EXPECT_NE(slurp(dir_ / "a" / "data.csv"), slurp(dir_ / "c" / "data.csv"));
}

// ---- train --------------------------------------------------------------------------------

TEST_F(Cli, ZeroEpochsWritesInitialModelThatRoundTripsExactly) {
  ASSERT_EQ(run("gen-data", short_data(2.0)), cli::kOk);
  const json cfg{{"data", {{"file", path("out/data.csv")}}},
                 {"model", {{"architecture", {{"hidden", 4}}}}},
                 {"train", {{"epochs", 0}}}};
  ASSERT_EQ(run("train", cfg), cli::kOk) << err_.str();
  const model::ELModel m = model::load_model(path("out/model.bin"));
  model::save_model(path("again.bin"), m);
  EXPECT_EQ(slurp(dir_ / "out" / "model.bin"), slurp(dir_ / "again.bin"));
  EXPECT_EQ(slurp(dir_ / "out" / "loss_history.csv"), "epoch,train_loss,validation_loss,learning_rate\n");
}

TEST_F(Cli, TrainingOnTeacherDataEmitsR2Table) {
  json gen = short_data(60.0);
  ASSERT_EQ(run("gen-data", gen), cli::kOk);
  const json cfg{{"data", {{"file", path("out/data.csv")}}}, {"train", {{"epochs", 20}, {"batch_size", 64}}}};
  ASSERT_EQ(run("train", cfg), cli::kOk) << err_.str();
  std::istringstream table(slurp(dir_ / "out" / "r2.csv"));
  std::string line;
  std::getline(table, line);
  EXPECT_EQ(line, "channel,r2");
  int channels = 0;
  double average = -1.0;
  while (std::getline(table, line)) {
    const auto comma = line.find(',');
    const std::string name = line.substr(0, comma);
    const double r2 = std::stod(line.substr(comma + 1));
    if (name == "average") {
      average = r2;
    } else {
      ++channels;
    }
  }
  EXPECT_EQ(channels, 5);
  EXPECT_GE(average, 0.95);
}

TEST_F(Cli, NonUniformTimeColumnIsRejected) {
  ASSERT_EQ(run("gen-data", short_data(1.0)), cli::kOk);
  std::string csv = slurp(dir_ / "out" / "data.csv");
  // Shift the time stamp of the third data row off the uniform grid.
  std::size_t row = 0;
  for (int i = 0; i < 3; ++i) row = csv.find('\n', row) + 1;
  csv.replace(row, csv.find(',', row) - row, "0.05");
  std::ofstream(dir_ / "out" / "data.csv", std::ios::binary) << csv;
  EXPECT_NE(run("train", json{{"data", {{"file", path("out/data.csv")}}}, {"train", {{"epochs", 1}}}}), cli::kOk);
  EXPECT_FALSE(err_.str().empty());
}

// ---- simulate -----------------------------------------------------------------------------

TEST_F(Cli, PairedRunEmitsBothTracesAndComparison) {
  const json cfg{{"model", {{"from_plant", true}}},
                 {"scenario", {{"preset", "standard"}, {"horizon_scale", 0.05}}},
                 {"controllers", {"lqr", "icbf"}}};
  ASSERT_EQ(run("simulate", cfg), cli::kOk) << err_.str();
  EXPECT_TRUE(fs::exists(dir_ / "out" / "trace_lqr.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "out" / "trace_icbf.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "out" / "trace.gp"));
  const json summary = json::parse(slurp(dir_ / "out" / "summary.json"));
  EXPECT_LE(summary["runs"]["icbf"]["max_h"].get<double>(), 1e-6);
  EXPECT_TRUE(summary["comparison"].contains("rmse_ratio_feasible"));
  EXPECT_TRUE(summary["comparison"]["icbf_satisfies"].get<bool>());
}

TEST_F(Cli, MissingModelFileIsACleanError) {
  const json cfg{{"model", {{"file", path("missing.bin")}}}, {"scenario", {{"preset", "standard"}}}};
  EXPECT_EQ(run("simulate", cfg), cli::kRuntimeError);
  EXPECT_NE(err_.str().find("missing.bin"), std::string::npos) << err_.str();
}

// ---- config handling ------------------------------------------------------------------------

TEST_F(Cli, UnknownKeyIsAConfigError) {
  json cfg = short_data(0.0);
  cfg["data"]["durration"] = 3.0;
  EXPECT_EQ(run("gen-data", cfg), cli::kConfigError);
  EXPECT_NE(err_.str().find("data.durration"), std::string::npos) << err_.str();
}

TEST_F(Cli, ConfigEchoHashIgnoresKeyOrder) {
  const json a = json::parse(R"({"data": {"step": 0.02, "duration": 0}, "seed": 3})");
  const json b = json::parse(R"({"seed": 3, "data": {"duration": 0, "step": 0.02}})");
  EXPECT_EQ(cli::config_hash(a), cli::config_hash(b));
  EXPECT_NE(cli::config_hash(a), cli::config_hash(json::parse(R"({"seed": 4, "data": {"duration": 0, "step": 0.02}})")));
}

TEST(Seeds, DerivedStreamsDifferByPurposeAndSeed) {
  EXPECT_NE(cli::derive_seed(1, "v-excitation"), cli::derive_seed(1, "d-excitation"));
  EXPECT_NE(cli::derive_seed(1, "v-excitation"), cli::derive_seed(2, "v-excitation"));
  EXPECT_EQ(cli::derive_seed(5, "model-init"), cli::derive_seed(5, "model-init"));
}

// ---- check-linearizable ---------------------------------------------------------------------

TEST_F(Cli, BuiltinFixturesReportTheirVerdicts) {
  const json box{{"lower", {-2.0, -2.0, -2.0}}, {"upper", {2.0, 2.0, 2.0}}, {"samples", 30}};
  json chain = box, non = box;
  chain["system"] = {{"builtin", "chain3"}};
  non["system"] = {{"builtin", "noninvolutive3"}};
  ASSERT_EQ(run("check-linearizable", chain, "chain"), cli::kOk) << err_.str();
  ASSERT_EQ(run("check-linearizable", non, "non"), cli::kOk) << err_.str();
  EXPECT_EQ(json::parse(slurp(dir_ / "chain" / "check_report.json"))["verdict"], "pass");
  EXPECT_EQ(json::parse(slurp(dir_ / "non" / "check_report.json"))["verdict"], "fail-involutive");
}

TEST_F(Cli, BadExpressionFileIsAnError) {
  std::ofstream(dir_ / "bad.sys") << "n = 2\nf1 = y2 +\nf2 = 0\ng1 = 0\ng2 = 1\n";
  const json cfg{{"system", {{"file", path("bad.sys")}}}, {"lower", {-1.0, -1.0}}, {"upper", {1.0, 1.0}}};
  EXPECT_NE(run("check-linearizable", cfg), cli::kOk);
  EXPECT_FALSE(err_.str().empty());
}
