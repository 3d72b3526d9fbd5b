#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "test_util.hpp"

namespace wsireg {
namespace {

using nlohmann::json;
using testing::TempDir;
namespace fs = std::filesystem;

struct RunResult {
  int code = -1;
  std::string out;
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(WSIREG_CLI) + " " + args + " 2>&1";
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof buf, pipe)) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void dump(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Synthetic pair, deconvolved, shared by every end-to-end case.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir;
    const fs::path d = dir_->path();
    ASSERT_EQ(run("synth " + q(d / "synth") + " --seed 5 --width 512 --height 512 --tile-size 128")
                  .code,
              0);
    ASSERT_EQ(run("deconvolve " + q(d / "synth" / "fixed") + " " + q(d / "fixed") +
                  " --default-palette --workers 2")
                  .code,
              0);
    ASSERT_EQ(run("deconvolve " + q(d / "synth" / "moving") + " " + q(d / "moving") +
                  " --default-palette --workers 2")
                  .code,
              0);
  }
  static void TearDownTestSuite() { delete dir_; }

  static fs::path d() { return dir_->path(); }
  static std::string register_args(const fs::path& regions, const fs::path& out) {
    return "register " + q(d() / "fixed" / "H") + " " + q(d() / "moving" / "H") + " " + q(regions) +
           " " + q(out);
  }

  static TempDir* dir_;
};

TempDir* CliPipeline::dir_ = nullptr;

TEST(Cli, BadUsageExitsTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("register").code, 2);
  EXPECT_EQ(run("show-config --no-such-flag").code, 2);
}

TEST(Cli, ShowConfigLayersFileUnderFlags) {
  TempDir dir;
  dump(dir / "c.json", {{"gamma", 2.5}, {"pct", 95.0}});
  const auto r = run("show-config --config " + q(dir / "c.json") + " --pct 90");
  ASSERT_EQ(r.code, 0) << r.out;
  const json j = json::parse(r.out);
  EXPECT_EQ(j.at("gamma"), 2.5);
  EXPECT_EQ(j.at("pct"), 90.0);
  EXPECT_EQ(j.at("ratio"), 0.8);

  dump(dir / "bad.json", {{"gama", 2.5}});
  const auto bad = run("show-config --config " + q(dir / "bad.json"));
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.out.find("gama"), std::string::npos);
}

TEST_F(CliPipeline, DeconvolveWithoutPaletteExitsTwo) {
  const auto r = run("deconvolve " + q(d() / "synth" / "fixed") + " " + q(d() / "nopal"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("palette"), std::string::npos);
}

TEST_F(CliPipeline, RegisterEvaluateEndToEnd) {
  const auto r = run(register_args(d() / "synth" / "regions.json", d() / "reg") + " --ground-truth " +
                     q(d() / "synth" / "ground_truth.json") + " --apply-to " +
                     q(d() / "moving" / "DAB"));
  ASSERT_EQ(r.code, 0) << r.out;
  const json report = json::parse(slurp(d() / "reg" / "registration_report.json"));
  EXPECT_LT(report.at("ground_truth").at("mean_grid_error_px").get<double>(), 1.0);
  EXPECT_TRUE(fs::exists(d() / "reg" / "registered" / "manifest.json"));
  EXPECT_TRUE(fs::exists(d() / "reg" / "applied" / "DAB" / "manifest.json"));

  const auto ev = run("evaluate " + q(d() / "fixed" / "H") + " " + q(d() / "reg" / "registered") +
                      " " + q(d() / "ev"));
  ASSERT_EQ(ev.code, 0) << ev.out;
  EXPECT_TRUE(fs::exists(d() / "ev" / "coloc_report.json"));
  EXPECT_TRUE(fs::exists(d() / "ev" / "rcm.png"));
  EXPECT_NE(ev.out.find("PCC total"), std::string::npos);
}

TEST_F(CliPipeline, TypoSlideIdExitsTwo) {
  json doc = json::parse(slurp(d() / "synth" / "regions.json"));
  doc["fixed_slide"] = doc["fixed_slide"].get<std::string>() + "_typo";
  dump(d() / "typo.json", doc);
  const auto r = run(register_args(d() / "typo.json", d() / "typo_out"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("fixed_slide"), std::string::npos);
}

TEST_F(CliPipeline, CoverageGapExitsThree) {
  json doc = json::parse(slurp(d() / "synth" / "regions.json"));
  doc["regions"].erase(1);
  dump(d() / "gap.json", doc);
  EXPECT_EQ(run(register_args(d() / "gap.json", d() / "gap_out")).code, 3);
  EXPECT_EQ(run(register_args(d() / "gap.json", d() / "holes_out") + " --allow-holes").code, 0);
}

TEST_F(CliPipeline, ManualWithTooFewLandmarksExitsFour) {
  json doc = json::parse(slurp(d() / "synth" / "regions.json"));
  auto& lms = doc["regions"][0]["landmarks"];
  lms.erase(lms.begin() + 2, lms.end());
  dump(d() / "few.json", doc);
  const auto r = run(register_args(d() / "few.json", d() / "few_out") + " --method manual");
  EXPECT_EQ(r.code, 4) << r.out;
}

TEST_F(CliPipeline, CqmNeedsThresholdsOrReference) {
  const std::string dab = q(d() / "fixed" / "DAB") + " " + q(d() / "moving" / "DAB") + " " +
                          q(d() / "fixed" / "DAB");
  const auto none = run("cqm " + dab + " " + q(d() / "cqm_none"));
  EXPECT_EQ(none.code, 2);
  EXPECT_NE(none.out.find("threshold"), std::string::npos) << none.out;
  const auto r = run("cqm " + dab + " " + q(d() / "cqm") + " --thresholds 0.2,0.3,0.4");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(d() / "cqm" / "cqm.json"));
  EXPECT_EQ(run("cqm " + dab + " " + q(d() / "cqm_ref") + " --reference " + q(d() / "fixed" / "H"))
                .code,
            0);
}

}  // namespace
}  // namespace wsireg
