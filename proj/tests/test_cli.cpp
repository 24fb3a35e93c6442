#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result cli(const std::string& args) {
  const std::string cmd = std::string(KBRW_CLI_PATH) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("kbrw_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const std::string& text) {
    const auto p = dir_ / name;
    std::ofstream(p) << text;
    return p;
  }
  fs::path two_point() {
    return write("two_point.json",
                 R"({"kind":"iid","nu":{"type":"deterministic","value":2},"x":{"type":"two_point","up":1.0,"down":-1.0,"p_up":0.05}})");
  }
  fs::path lattice_critical() {
    char p[64];
    std::snprintf(p, sizeof p, "%.17g", (2.0 - std::sqrt(3.0)) / 4.0);
    return write("lattice.json",
                 std::string(R"({"kind":"iid","nu":{"type":"deterministic","value":2},"x":{"type":"two_point","up":1.0,"down":-1.0,"p_up":)") +
                     p + "}}");
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, AnalyzeModelReportsRoots) {
  const auto r = cli("analyze-model --model " + two_point().string());
  ASSERT_EQ(r.code, 0);
  const auto a = json::parse(r.out)["summary"]["analytics"];
  EXPECT_EQ(a["regime"], "subcritical");
  // e^{rho-+} are the roots of 0.1 y^2 - y + 1.9.
  const double d = std::sqrt(1.0 - 0.76);
  EXPECT_NEAR(a["rho_minus"].get<double>(), std::log((1.0 - d) / 0.2), 1e-8);
  EXPECT_NEAR(a["rho_plus"].get<double>(), std::log((1.0 + d) / 0.2), 1e-8);
  EXPECT_NEAR(a["tail_exponent"].get<double>(), std::log((1.0 + d) / 0.2) / std::log((1.0 - d) / 0.2), 1e-8);
}

TEST_F(Cli, AnalyzeModelCritical) {
  const auto r = cli("analyze-model --model " + lattice_critical().string());
  ASSERT_EQ(r.code, 0);
  const auto a = json::parse(r.out)["summary"]["analytics"];
  EXPECT_EQ(a["regime"], "critical");
  EXPECT_NEAR(a["rho_star"].get<double>(), std::log(2.0 + std::sqrt(3.0)), 1e-6);
}

TEST_F(Cli, RerunIsByteIdentical) {
  const auto m = two_point().string();
  const auto a = dir_ / "a", b = dir_ / "b";
  ASSERT_EQ(cli("simulate --model " + m + " --replicas 5000 --seed 9 -q -o " + a.string()).code, 0);
  ASSERT_EQ(cli("simulate --model " + m + " --replicas 5000 --seed 9 --workers 3 -q -o " + b.string()).code, 0);
  EXPECT_EQ(slurp(a / "summary.json"), slurp(b / "summary.json"));
  EXPECT_EQ(slurp(a / "records.csv"), slurp(b / "records.csv"));
  EXPECT_TRUE(fs::exists(a / "MANIFEST"));
}

TEST_F(Cli, ReportHasOneRowPerCriterion) {
  const auto s = dir_ / "sim", rep = dir_ / "rep";
  ASSERT_EQ(cli("simulate --model " + lattice_critical().string() + " --replicas 5000 -q -o " + s.string()).code, 0);
  ASSERT_EQ(cli("report --inputs " + s.string() + " -q -o " + rep.string()).code, 0);
  const auto md = slurp(rep / "report.md");
  for (int c = 1; c <= 12; ++c) EXPECT_NE(md.find("| " + std::to_string(c) + " |"), std::string::npos) << c;
  EXPECT_NE(md.find("| 1 | pass |"), std::string::npos);
}

TEST_F(Cli, OracleMatchesClosedForm) {
  const auto r = cli("oracle --model " + lattice_critical().string() + " --op eh --x 0 --t 4");
  ASSERT_EQ(r.code, 0);
  const double rho = std::log(2.0 + std::sqrt(3.0));
  EXPECT_NEAR(json::parse(r.out)["summary"]["exact"].get<double>(), std::exp(-5.0 * rho) / 6.0, 1e-9);
}

TEST_F(Cli, ExitCodes) {
  const auto bad = write("bad.json", R"({"kind":"iid","nu":{"type":"deterministic"}})");
  EXPECT_EQ(cli("analyze-model --model " + bad.string()).code, 2);
  EXPECT_EQ(cli("analyze-model --model " + (dir_ / "missing.json").string()).code, 2);
  EXPECT_EQ(cli("simulate --model " + two_point().string() + " --bogus 1").code, 2);
  const auto oos =
      write("oos.json", R"({"kind":"iid","nu":{"type":"deterministic","value":2},"x":{"type":"gaussian","mean":0.0,"sd":1.0}})");
  EXPECT_EQ(cli("spine --model " + oos.string() + " --op eh --x 1 --t 3 --replicas 10 -q").code, 2);
  EXPECT_EQ(cli("simulate --model " + lattice_critical().string() + " --x 5 --replicas 100 --max-particles 3 -q").code, 3);
}
