#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include <sys/wait.h>

#include "safeatt/cli.hpp"

using namespace safeatt;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "safeatt_cli");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string write_temp(const std::string& name, const std::string& text) {
  const std::string path = ::testing::TempDir() + name;
  std::ofstream(path) << text;
  return path;
}

std::string simulated_csv(std::size_t n, bool external) {
  const auto data = gen_model1(n, 4, 17);
  std::ostringstream os;
  os << "r,t,y,x1,x2,x3,x4\n";
  for (std::size_t i = 0; i < data.N(); ++i) {
    const auto row = data.row(i);
    if (!external && row.r == 0) continue;
    os << row.r << ',' << row.t << ',' << row.y;
    for (int j = 1; j <= 4; ++j) os << ',' << row.x[j];
    os << '\n';
  }
  return os.str();
}

const std::vector<std::string> kCovariates = {"--covariates", "x1,x2,x3,x4"};

}  // namespace

TEST(Cli, EstimateJson) {
  const auto path = write_temp("cli_est.csv", simulated_csv(600, true));
  auto args = std::vector<std::string>{"estimate", "--data", path, "--seed", "3"};
  args.insert(args.end(), kCovariates.begin(), kCovariates.end());
  const auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  ASSERT_EQ(j["estimates"].size(), 3u);
  EXPECT_EQ(j["estimates"][0]["method"], "nv");
  EXPECT_EQ(j["estimates"][2]["method"], "safe");
  EXPECT_FALSE(j["data"]["no_external_rows"].get<bool>());
  EXPECT_EQ(j["config"]["lambda"], "cv");
  EXPECT_EQ(j["config"]["cv"]["folds"], 5);
  EXPECT_TRUE(j["nuisance"].contains("gamma"));
  EXPECT_EQ(run(args).out, r.out);  // deterministic for a fixed seed
}

TEST(Cli, EstimateWithoutExternalRowsWarns) {
  const auto path = write_temp("cli_noext.csv", simulated_csv(600, false));
  auto args = std::vector<std::string>{"estimate", "--data", path, "--lambda", "0.01:0.01:0.01:0.01"};
  args.insert(args.end(), kCovariates.begin(), kCovariates.end());
  const auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_TRUE(j["data"]["no_external_rows"].get<bool>());
  EXPECT_FALSE(j["warnings"].empty());

  args.insert(args.end(), {"--format", "csv"});
  const auto c = run(args);
  ASSERT_EQ(c.code, 0);
  EXPECT_NE(c.out.find("# warning: no external rows"), std::string::npos);
}

TEST(Cli, MalformedCsvNamesRowAndColumn) {
  const auto path = write_temp("cli_bad.csv", "r,t,y,x1\n1,1,2,0\n1,0,oops,1\n0,0,1,1\n");
  const auto r = run({"estimate", "--data", path, "--covariates", "x1"});
  EXPECT_EQ(r.code, cli::kExitData);
  const auto j = nlohmann::json::parse(r.err);
  EXPECT_EQ(j["error"], "MalformedCsv");
  EXPECT_EQ(j["module"], "dataset");
  EXPECT_EQ(j["row"], 2);
  EXPECT_EQ(j["column"], "y");
}

TEST(Cli, ConfigErrors) {
  EXPECT_EQ(run({"simulate", "--model", "M1", "--reps", "2"}).code, cli::kExitConfig);  // no seed
  EXPECT_EQ(run({"simulate", "--paper-table", "2", "--N", "500", "--seed", "1"}).code, cli::kExitConfig);
  EXPECT_EQ(run({"simulate", "--seed", "1"}).code, cli::kExitConfig);
  EXPECT_EQ(run({"simulate", "--model", "M1", "--n", "400", "--seed", "1"}).code, cli::kExitConfig);
  EXPECT_EQ(run({"estimate", "--data", "x.csv"}).code, cli::kExitConfig);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kExitConfig);
  const auto r = run({"simulate", "--model", "M1", "--seed", "1", "--lambda", "1:2"});
  EXPECT_EQ(r.code, cli::kExitConfig);
  EXPECT_EQ(nlohmann::json::parse(r.err)["module"], "config");
}

TEST(Cli, LambdaPolicyParsing) {
  EXPECT_TRUE(cli::parse_lambda_policy("cv").uses_cv());
  const auto f = cli::parse_lambda_policy("0.1:0.2:0.3:0.4");
  EXPECT_FALSE(f.uses_cv());
  EXPECT_DOUBLE_EQ(*f.values[0], 0.1);
  EXPECT_DOUBLE_EQ(*f.values[3], 0.4);
  EXPECT_THROW(cli::parse_lambda_policy("0.1:x:0.3:0.4"), Error);
  EXPECT_THROW(cli::parse_lambda_policy("0.1:-1:0.3:0.4"), Error);
}

TEST(Cli, SimulateCsvShapeAndReproducibility) {
  const std::vector<std::string> args = {"simulate", "--model", "M2ii", "--n", "200", "--d", "5", "--reps", "3",
                                         "--seed", "8", "--format", "csv", "--lambda", "0.01:0.01:0.01:0.01"};
  const auto a = run(args);
  ASSERT_EQ(a.code, 0) << a.err;
  std::istringstream is(a.out);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0].rfind("# config: ", 0), 0u);
  EXPECT_EQ(lines[1], "model,size,d,method,bias,sd,se,cp,are,theta_star,reps_used,failures,flagged");
  EXPECT_EQ(lines[2].rfind("M2ii,200,5,nv,", 0), 0u);
  EXPECT_EQ(lines[4].rfind("M2ii,200,5,safe,", 0), 0u);
  const auto cfg = nlohmann::json::parse(lines[0].substr(10));
  EXPECT_EQ(cfg["cells"][0]["m"], 1000);
  EXPECT_EQ(run(args).out, a.out);
}

TEST(Cli, SimulateWritesOutputFile) {
  const std::string path = ::testing::TempDir() + "cli_sim.json";
  const auto r = run({"simulate", "--model", "M1", "--N", "300", "--reps", "2", "--seed", "2", "--out", path,
                      "--lambda", "0.02:0.02:0.02:0.02"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(r.out.empty());
  std::ifstream f(path);
  const auto j = nlohmann::json::parse(f);
  EXPECT_EQ(j["table"]["rows"].size(), 3u);
  std::remove(path.c_str());
}

#ifdef SAFEATT_CLI_PATH
TEST(Cli, BinaryReportsExitCodes) {
  const auto path = write_temp("cli_bin_bad.csv", "r,t,y,x1\n1,2,2,0\n");
  const std::string cmd = std::string(SAFEATT_CLI_PATH) + " estimate --data " + path + " --covariates x1 2>/dev/null";
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), cli::kExitData);
  const int help = std::system((std::string(SAFEATT_CLI_PATH) + " --help >/dev/null").c_str());
  EXPECT_EQ(WEXITSTATUS(help), 0);
}
#endif
