#include <gtest/gtest.h>

#include "cli_runner.hpp"
#include "diop/features.hpp"
#include "diop/instances.hpp"
#include "test_util.hpp"

namespace diop {
namespace {

using testing::run_cli;

TEST(Cli, HelpListsSubcommandsAndFlags) {
  testing::TempDir dir("cli-help");
  const auto top = run_cli({"--help"}, dir.path());
  EXPECT_EQ(top.code, 0);
  for (const char* s : {"synth", "derive", "match", "features", "train", "predict", "eval", "explain", "bench", "serve"})
    EXPECT_NE(top.out.find(s), std::string::npos) << s;
  const auto eval = run_cli({"eval", "--help"}, dir.path());
  EXPECT_EQ(eval.code, 0);
  for (const char* f : {"--config", "--seed", "--jobs", "--task", "--repeats", "--trees", "--levels"})
    EXPECT_NE(eval.out.find(f), std::string::npos) << f;
  const auto version = run_cli({"--version"}, dir.path());
  EXPECT_EQ(version.code, 0);
  EXPECT_NE(version.out.find(kVersion), std::string::npos);
}

TEST(Cli, ErrorsAreJsonLines) {
  testing::TempDir dir("cli-err");
  for (const auto& args : std::vector<std::vector<std::string>>{
           {"features", "--manifest", "/definitely/missing.json", "--instances", "/tmp", "--out", "x.csv"},
           {"eval", "--features", "/definitely/missing.csv", "--task", "fourway", "--out", "r.json"},
           {"nonsense"}}) {
    const auto r = run_cli(args, dir.path());
    EXPECT_EQ(r.code, 2) << args[0];
    const auto line = r.err.substr(0, r.err.find('\n'));
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j["error"].contains("kind"));
    EXPECT_TRUE(j["error"].contains("message"));
  }
  detail::write_file(dir / "bad.pgm", "P2\n1 1\n255\n0\n");
  const auto r = run_cli({"derive", "--raster", (dir / "bad.pgm").string(), "--output", (dir / "o.pgm").string()},
                         dir.path());
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(nlohmann::json::parse(r.err.substr(0, r.err.find('\n')))["error"]["kind"], "format");
}

TEST(Cli, ConfigRejectsUnknownKeysAndFlagsWin) {
  testing::TempDir dir("cli-cfg");
  const auto d = dir.path().string();
  ASSERT_EQ(run_cli({"synth", "--out", d + "/data", "--per-class", "3", "--seed", "4"}, dir.path()).code, 0);
  ASSERT_EQ(run_cli({"derive", "--manifest", d + "/data/manifest.json", "--out", d + "/inst"}, dir.path()).code, 0);
  ASSERT_EQ(run_cli({"features", "--manifest", d + "/data/manifest.json", "--instances", d + "/inst", "--out",
                     d + "/f.csv"},
                    dir.path())
                .code,
            0);
  detail::write_file(dir / "bad.json", R"({"learn": {"n_tres": 3}})");
  const auto bad = run_cli({"eval", "--config", d + "/bad.json", "--features", d + "/f.csv", "--task",
                            "dcis-vs-atypia", "--out", d + "/r.json"},
                           dir.path());
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("n_tres"), std::string::npos);

  detail::write_file(dir / "cfg.json", R"({"seed": 99, "learn": {"n_trees": 7, "repeats": 2}})");
  const std::vector<std::string> common = {"--features", d + "/f.csv", "--task", "dcis-vs-atypia"};
  auto with = [&](std::vector<std::string> extra, const std::string& out) {
    std::vector<std::string> args = {"eval"};
    args.insert(args.end(), common.begin(), common.end());
    args.insert(args.end(), extra.begin(), extra.end());
    args.push_back("--out");
    args.push_back(d + "/" + out);
    EXPECT_EQ(run_cli(args, dir.path()).code, 0);
    return detail::read_file(dir / out);
  };
  const auto from_config = with({"--config", d + "/cfg.json", "--seed", "5"}, "a.json");
  const auto from_flags = with({"--trees", "7", "--repeats", "2", "--seed", "5"}, "b.json");
  const auto config_seed = with({"--config", d + "/cfg.json"}, "c.json");
  EXPECT_EQ(from_config, from_flags);
  EXPECT_NE(from_config, config_seed);
  EXPECT_EQ(nlohmann::json::parse(config_seed)["seed"], 99);
}

TEST(Cli, SmokePipelineAndDeterminism) {
  testing::TempDir a("cli-a"), b("cli-b");
  const auto ra = testing::run_pipeline(a.path(), "11", 5);
  const auto rb = testing::run_pipeline(b.path(), "11", 5);
  EXPECT_TRUE(ra.failures.empty()) << ra.failures.front();
  ASSERT_EQ(ra.artifacts, rb.artifacts);
  for (const auto& f : ra.artifacts) EXPECT_EQ(detail::read_file(a / f), detail::read_file(b / f)) << f;

  const auto report = nlohmann::json::parse(detail::read_file(a / "report.json"));
  EXPECT_EQ(report["task"], "fourway");
  EXPECT_EQ(report["per_repeat"].size(), 3u);
  EXPECT_TRUE(report["summary"]["accuracy"].contains("mean"));
  const auto table = read_feature_table(a / "features.csv");
  EXPECT_EQ(table.size(), 20u);
  const auto predictions = detail::read_file(a / "predictions.csv");
  EXPECT_EQ(std::count(predictions.begin(), predictions.end(), '\n'), 21);
  const auto explain = nlohmann::json::parse(detail::read_file(a / "explain.json"));
  EXPECT_FALSE(explain["top_features"].empty());
}

TEST(Cli, DeriveMethodsComparableViaMatch) {
  testing::TempDir dir("cli-match");
  const auto d = dir.path().string();
  ASSERT_EQ(run_cli({"synth", "--out", d + "/data", "--per-class", "1", "--seed", "2"}, dir.path()).code, 0);
  const auto raster = d + "/data/rasters/dcis-0000.pgm", boxes = d + "/data/boxes/dcis-0000.json";
  ASSERT_EQ(run_cli({"derive", "--raster", raster, "--boxes", boxes, "--output", d + "/weak.pgm"}, dir.path()).code, 0);
  ASSERT_EQ(run_cli({"derive", "--raster", raster, "--method", "cc", "--output", d + "/cc.pgm"}, dir.path()).code, 0);
  const auto self = run_cli({"match", d + "/weak.pgm", d + "/weak.pgm"}, dir.path());
  ASSERT_EQ(self.code, 0);
  EXPECT_DOUBLE_EQ(nlohmann::json::parse(self.out)["mean_iou"].get<double>(), 1.0);
  const auto cross = run_cli({"match", d + "/weak.pgm", d + "/cc.pgm", "--threshold", "0.3"}, dir.path());
  ASSERT_EQ(cross.code, 0);
  const auto j = nlohmann::json::parse(cross.out);
  const auto weak = read_instance_map(dir / "weak.pgm");
  const auto cc = read_instance_map(dir / "cc.pgm");
  EXPECT_EQ(j["matched_pairs"].size() + j["unmatched_a"].get<std::size_t>(), weak.count());
  EXPECT_EQ(j["matched_pairs"].size() + j["unmatched_b"].get<std::size_t>(), cc.count());
}

TEST(Cli, BinaryEvalRepeatsAreByteIdentical) {
  testing::TempDir dir("cli-loocv");
  const auto d = dir.path().string();
  ASSERT_EQ(run_cli({"synth", "--out", d + "/data", "--per-class", "4", "--seed", "3"}, dir.path()).code, 0);
  ASSERT_EQ(run_cli({"derive", "--manifest", d + "/data/manifest.json", "--out", d + "/inst"}, dir.path()).code, 0);
  ASSERT_EQ(run_cli({"features", "--manifest", d + "/data/manifest.json", "--instances", d + "/inst", "--out",
                     d + "/f.csv"},
                    dir.path())
                .code,
            0);
  for (const char* out : {"/r1.json", "/r2.json"})
    ASSERT_EQ(run_cli({"eval", "--features", d + "/f.csv", "--task", "dcis-vs-atypia", "--repeats", "100", "--trees",
                       "5", "--seed", "7", "--out", d + out},
                      dir.path())
                  .code,
              0);
  EXPECT_EQ(detail::read_file(dir / "r1.json"), detail::read_file(dir / "r2.json"));
  EXPECT_EQ(nlohmann::json::parse(detail::read_file(dir / "r1.json"))["per_repeat"].size(), 100u);
}

TEST(Cli, BenchReportsMedian) {
  testing::TempDir dir("cli-bench");
  const auto r = run_cli({"bench", "--size", "128", "--ducts", "5", "--runs", "3"}, dir.path());
  ASSERT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["runs"].size(), 3u);
  EXPECT_GT(j["median_seconds"].get<double>(), 0.0);
}

}  // namespace
}  // namespace diop
