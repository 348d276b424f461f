#include <gtest/gtest.h>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "dpin/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dpin;
using namespace dpin::experiment;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path d = fs::path(::testing::TempDir()) / ("dpin_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(const std::string& args, const fs::path& dir) {
  const auto o = dir / "stdout.txt", e = dir / "stderr.txt";
  const std::string cmd = std::string(DPIN_CLI_PATH) + " " + args + " >" + o.string() + " 2>" + e.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(o), slurp(e)};
}

fs::path write_json(const fs::path& dir, const std::string& name, const json& j) {
  const auto p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

fs::path toy_csv(const fs::path& dir) {
  const auto p = dir / "toy.csv";
  std::ofstream out(p);
  out << "a,b,y\n";
  Engine eng = make_engine(5, Stream::kTraining);
  for (int i = 0; i < 40; ++i) {
    const double a = uniform(eng, -1, 1), b = uniform(eng, -1, 1);
    out << fmt(a) << ',' << fmt(b) << ',' << fmt(2 * a - b + 0.1 * standard_normal(eng)) << '\n';
  }
  return p;
}

json tiny_model() {
  return {{"hidden", {6}}, {"stage1_epochs", 5}, {"stage2_epochs", 5}, {"batch_size", 16}};
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) files[e.path().filename().string()] = slurp(e.path());
  return files;
}

}  // namespace

TEST(Config, DefaultsFilledIn) {
  const auto c = parse_config(json{{"dataset", {{"path", "x.csv"}}}}, "regression");
  EXPECT_EQ(c.repeats, 20u);
  EXPECT_EQ(c.ensemble_size, 5u);
  EXPECT_DOUBLE_EQ(c.split.train, 0.9);
  EXPECT_EQ(c.model.hidden, std::vector<Eigen::Index>{50});
  EXPECT_EQ(c.model.weights.eta2, 10.0);
  const auto a = parse_config(json{{"dataset", {{"path", "x.csv"}}}}, "active");
  EXPECT_DOUBLE_EQ(a.split.pool, 0.5);
  EXPECT_EQ(a.repeats, 10u);
}

TEST(Config, UnknownKeysRejectedAtEveryLevel) {
  EXPECT_THROW(parse_config(json{{"bogus", 1}}, "synthetic"), ValidationError);
  EXPECT_THROW(parse_config(json{{"model", {{"hiden", {4}}}}}, "synthetic"), ValidationError);
  EXPECT_THROW(parse_config(json{{"dataset", {{"path", "x"}, {"colum", 1}}}}, "regression"), ValidationError);
  EXPECT_THROW(parse_config(json{{"gradcheck", {{"stpe", 1}}}}, "gradcheck"), ValidationError);
}

TEST(Config, InvalidValuesRejected) {
  EXPECT_THROW(parse_config(json{{"model", {{"eta1", 0}, {"eta2", 0}}}}, "synthetic"), ValidationError);
  EXPECT_THROW(parse_config(json{{"model", {{"stage1_epochs", 0}}}}, "synthetic"), ValidationError);
  EXPECT_THROW(parse_config(json{{"model", {{"alpha", 1.5}}}}, "synthetic"), ValidationError);
  EXPECT_THROW(parse_config(json{{"model", {{"hidden", "wide"}}}}, "synthetic"), ValidationError);
  EXPECT_THROW(parse_config(json::object(), "regression"), ValidationError);
  EXPECT_THROW(parse_config(json{{"dataset", {{"path", "x"}}}, {"split", {{"train", 0.5}, {"test", 0.2}}}},
                            "regression"),
               ValidationError);
  EXPECT_THROW(parse_config(json{{"command", "active"}}, "synthetic"), ValidationError);
  EXPECT_THROW(parse_config(json::object(), "train"), ValidationError);
}

TEST(Table, CsvAndJsonAgree) {
  Table t({"name", "value", "n"});
  t.add({std::string("a"), 0.1, std::uint64_t{3}});
  t.add({std::string("b"), std::nan(""), std::uint64_t{4}});
  EXPECT_EQ(t.csv(), "name,value,n\na,0.1,3\nb,,4\n");
  const json j = t.to_json();
  EXPECT_EQ(j[0]["value"].get<double>(), 0.1);
  EXPECT_TRUE(j[1]["value"].is_null());
}

TEST(Fmt, ShortestRoundTrip) {
  EXPECT_EQ(fmt(0.1), "0.1");
  EXPECT_EQ(fmt(1.0 / 3.0), "0.3333333333333333");
  EXPECT_EQ(std::stod(fmt(M_PI)), M_PI);
}

TEST(Cli, RegressionWritesSchema) {
  const auto dir = scratch("regression");
  const json cfg{{"dataset", {{"path", toy_csv(dir).string()}}},
                 {"repeats", 2},
                 {"ensemble_size", 2},
                 {"model", tiny_model()}};
  const auto cfg_path = write_json(dir, "cfg.json", cfg);
  const auto r = cli("regression --config " + cfg_path.string() + " --out " + (dir / "out").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto summary = json::parse(slurp(dir / "out" / "summary.json"));
  ASSERT_EQ(summary.size(), 5u);
  EXPECT_EQ(summary[0]["metric"], "rmse");
  EXPECT_TRUE(summary[0]["mean"].is_number());
  EXPECT_TRUE(summary[0]["se"].is_number());
  EXPECT_EQ(summary[0]["runs"], 2);
  const auto records = json::parse(slurp(dir / "out" / "records.json"));
  ASSERT_EQ(records.size(), 2u);
  for (const char* k : {"run_id", "split_seed", "n_test", "rmse", "ll", "picp", "mpiw", "mpiw_original"})
    EXPECT_TRUE(records[0].contains(k)) << k;
  EXPECT_EQ(records[0]["n_test"], 4);
  const auto manifest = json::parse(slurp(dir / "out" / "manifest.json"));
  EXPECT_EQ(manifest["command"], "regression");
  EXPECT_EQ(manifest["config"]["repeats"], 2);
  EXPECT_NE(slurp(dir / "out" / "log.txt").find("40 rows, 2 features"), std::string::npos);
}

TEST(Cli, SyntheticGridSortedAndOrdered) {
  const auto dir = scratch("synthetic");
  const json cfg{{"synthetic", {{"n", 60}}},
                 {"grid", {{"min", -3}, {"max", 3}, {"step", 0.05}}},
                 {"ensemble_size", 2},
                 {"model", tiny_model()}};
  const auto r = cli("synthetic -c " + write_json(dir, "c.json", cfg).string() + " -o " + (dir / "o").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto grid = json::parse(slurp(dir / "o" / "grid.json"));
  ASSERT_EQ(grid.size(), 121u);
  double prev = -1e9;
  for (const auto& row : grid) {
    const double x = row["x"];
    EXPECT_GT(x, prev);
    if (prev > -1e9) {
      EXPECT_LE(x - prev, 0.05 + 1e-12);
    }
    prev = x;
    EXPECT_LE(row["lower"].get<double>(), row["mu"].get<double>());
    EXPECT_LE(row["mu"].get<double>(), row["upper"].get<double>());
  }
  EXPECT_NEAR(grid.back()["x"].get<double>(), 3.0, 1e-9);
  EXPECT_EQ(json::parse(slurp(dir / "o" / "train_data.json")).size(), 60u);
}

TEST(Cli, ActiveTraceColumns) {
  const auto dir = scratch("active");
  const json cfg{{"dataset", {{"path", toy_csv(dir).string()}}},
                 {"active", {{"n_acquire", 2}, {"iterations", 2}, {"repeats", 2}}},
                 {"ensemble_size", 2},
                 {"model", tiny_model()}};
  const auto r = cli("active -c " + write_json(dir, "c.json", cfg).string() + " -o " + (dir / "o").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(dir / "o" / "trace.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "repeat,iteration,rmse,ll,picp,mpiw,acquired_indices");
  const auto trace = json::parse(slurp(dir / "o" / "trace.json"));
  ASSERT_EQ(trace.size(), 4u);
  EXPECT_NE(trace[0]["acquired_indices"].get<std::string>().find(';'), std::string::npos);
}

TEST(Cli, GradcheckPassesWithoutConfig) {
  const auto dir = scratch("gradcheck");
  const auto r = cli("gradcheck --out " + (dir / "o").string(), dir);
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("dpi_loss"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "o" / "gradcheck.csv"));
}

TEST(Cli, ValidationErrorsExitOneWithJson) {
  const auto dir = scratch("errors");
  const auto bad = write_json(dir, "bad.json", json{{"synthetic", {{"n", 10}}}, {"typo", true}});
  auto r = cli("synthetic -c " + bad.string() + " -o " + (dir / "o").string(), dir);
  EXPECT_EQ(r.code, 1);
  const auto err = json::parse(r.err);
  EXPECT_EQ(err["error"]["type"], "validation");
  EXPECT_NE(err["error"]["message"].get<std::string>().find("typo"), std::string::npos);

  const auto missing = write_json(dir, "missing.json", json{{"dataset", {{"path", (dir / "nope.csv").string()}}}});
  r = cli("regression -c " + missing.string() + " -o " + (dir / "o2").string(), dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err)["error"]["type"], "validation");

  r = cli("frobnicate", dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err)["error"]["type"], "usage");

  std::ofstream(dir / "notjson.json") << "{ nope";
  r = cli("synthetic -c " + (dir / "notjson.json").string() + " -o " + (dir / "o3").string(), dir);
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, RerunsAreByteIdentical) {
  const auto dir = scratch("rerun");
  const json cfg{{"dataset", {{"path", toy_csv(dir).string()}}},
                 {"repeats", 2},
                 {"ensemble_size", 3},
                 {"save_checkpoints", true},
                 {"model", tiny_model()}};
  const auto c = write_json(dir, "c.json", cfg).string();
  ASSERT_EQ(cli("regression -c " + c + " -o " + (dir / "a").string(), dir).code, 0);
  ASSERT_EQ(cli("regression -c " + c + " -o " + (dir / "b").string(), dir).code, 0);
  const auto a = snapshot(dir / "a"), b = snapshot(dir / "b");
  EXPECT_GT(a.size(), 6u);
  EXPECT_EQ(a, b);
  ASSERT_EQ(cli("regression -c " + c + " -o " + (dir / "s").string() + " --seed 9", dir).code, 0);
  EXPECT_NE(snapshot(dir / "s").at("records.csv"), a.at("records.csv"));
}
