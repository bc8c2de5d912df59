#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"

#include "cmcl/checkpoint.hpp"
#include "cmcl/cli.hpp"

using namespace cmcl;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "cmcl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cmcl_cli_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::string tiny_config(const std::filesystem::path& dir) {
  const auto path = dir / "tiny.json";
  std::ofstream f(path);
  f << R"({"model": {"d1": 8, "d2": 4, "d3": 2, "heads": 2, "ff_dim": 4, "vocab": 40, "max_len": 16},
          "data": {"vocab": 40, "topic_size": 4, "min_du_len": 3, "max_du_len": 6,
                   "train_size": 40, "dev_size": 12, "test_size": 12, "signal": 0.6},
          "batch_size": 8, "lr": 0.01})";
  return path.string();
}

}  // namespace

TEST_CASE("help, version and usage errors") {
  CHECK(run({"--help"}).code == 0);
  const Run v = run({"--version"});
  CHECK(v.code == 0);
  CHECK(v.out.find(kVersion) != std::string::npos);
  CHECK(run({}).code == 1);
  CHECK(run({"frobnicate"}).code == 1);
  CHECK(run({"train", "--no-such-flag"}).code == 1);
  CHECK(run({"train", "--classes", "5"}).code == 1);
  CHECK(run({"train", "--config", "/nonexistent.json"}).code == 1);
  CHECK(run({"eval"}).code == 1);
  CHECK(run({"train", "--variant", "b_nope", "--epochs", "1"}).code == 1);
}

TEST_CASE("invalid configuration values exit with 1") {
  const auto dir = temp_dir("badcfg");
  const auto path = dir / "bad.json";
  std::ofstream(path) << R"({"unknown_key": 1})";
  const Run r = run({"train", "--config", path.string(), "--out", (dir / "o").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("unknown_key") != std::string::npos);
  CHECK(run({"train", "--tau", "0", "--epochs", "1", "--out", (dir / "t").string()}).code == 1);
}

TEST_CASE("gen-data writes splits and a manifest") {
  const auto dir = temp_dir("gen");
  const std::string cfg = tiny_config(dir);
  REQUIRE(run({"gen-data", "--config", cfg, "--seed", "5", "--out", (dir / "data").string()}).code == 0);
  for (const char* f : {"train.jsonl", "dev.jsonl", "test.jsonl", "stats.json", "manifest.json"}) {
    CHECK(std::filesystem::exists(dir / "data" / f));
  }
  const auto manifest = read_json(dir / "data" / "manifest.json");
  CHECK(manifest["command"] == "gen-data");
  CHECK(manifest["version"] == kVersion);
  CHECK(manifest["config"]["seed"] == 5);
  CHECK(manifest["seed"] == 5);
}

TEST_CASE("train, eval and export-reprs round trip") {
  const auto dir = temp_dir("train");
  const std::string cfg = tiny_config(dir);
  const std::string out = (dir / "run").string();
  REQUIRE(run({"train", "--config", cfg, "--epochs", "2", "--out", out}).code == 0);
  for (const char* f : {"metrics.csv", "losses.csv", "best.json", "last.json", "eval.json", "manifest.json"}) {
    CHECK(std::filesystem::exists(dir / "run" / f));
  }
  const std::string best = (dir / "run" / "best.json").string();
  REQUIRE(run({"eval", "--checkpoint", best, "--split", "test", "--out", (dir / "ev").string()}).code == 0);
  const auto report = read_json(dir / "ev" / "eval_test.json");
  CHECK(report.contains("macro_f1"));
  CHECK(run({"eval", "--checkpoint", best, "--split", "holdout"}).code == 1);

  REQUIRE(run({"export-reprs", "--checkpoint", best, "--layers", "1,3", "--out", (dir / "rep").string()}).code == 0);
  CHECK(std::filesystem::exists(dir / "rep" / "reprs_layer1.csv"));
  CHECK(std::filesystem::exists(dir / "rep" / "reprs_layer3.csv"));
  CHECK_FALSE(std::filesystem::exists(dir / "rep" / "reprs_layer2.csv"));
  CHECK(std::filesystem::exists(dir / "rep" / "silhouette.json"));
  CHECK(run({"export-reprs", "--checkpoint", best, "--layers", "4", "--out", (dir / "rep4").string()}).code == 1);

  const auto bad = dir / "broken.json";
  std::ofstream(bad) << "{";
  CHECK(run({"eval", "--checkpoint", bad.string()}).code == 1);

  REQUIRE(run({"train", "--config", cfg, "--epochs", "3", "--resume", (dir / "run" / "last.json").string(), "--out",
               (dir / "resumed").string()})
              .code == 1);  // different epoch budget changes the configuration
}

TEST_CASE("grad-check reports and exits 0") {
  const auto dir = temp_dir("grad");
  const Run r = run({"grad-check", "--configs", "1", "--out", dir.string()});
  CHECK(r.code == 0);
  const auto report = read_json(dir / "gradreport.json");
  CHECK(report["pass"] == true);
}
