#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "mvseg/cli.hpp"
#include "mvseg/log.hpp"
#include "mvseg/manifest.hpp"
#include "mvseg/pipeline.hpp"
#include "../support/temp_dir.hpp"

using namespace mvseg;

namespace {

struct Captured {
  int code = -1;
  std::string out;
  std::string err;
};

Captured run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  Captured c;
  try {
    c.code = cli::run(args);
  } catch (...) {
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    throw;
  }
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  c.out = out.str();
  c.err = err.str();
  log::set_level(log::Level::info);
  return c;
}

std::string tiny_config(const TempDir& dir) {
  const std::string path = dir / "tiny.json";
  std::ofstream(path) << R"({"batch_size": 8, "max_epochs": 1,
    "model": {"input_size": [16, 16], "channel_widths": [2, 3, 4], "convs_per_block": 1}})";
  return path;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit with 2") {
    CHECK(run_cli({}).code == cli::kFailure);
    CHECK(run_cli({"params", "--bogus"}).code == cli::kFailure);
    CHECK(run_cli({"frobnicate"}).code == cli::kFailure);
    CHECK(run_cli({"experiment", "bootstrap", "--manifest", "x", "--out", "y"}).code == cli::kFailure);
    const auto help = run_cli({"--help"});
    CHECK(help.code == cli::kOk);
    CHECK(help.out.find("experiment") != std::string::npos);
  }

  TEST_CASE("params reports the layer table and both counts") {
    const auto r = run_cli({"params"});
    REQUIRE(r.code == cli::kOk);
    CHECK(r.out.find("convolution layers:          16") != std::string::npos);
    CHECK(r.out.find("parameters (weight store):   2841154") != std::string::npos);
    CHECK(r.out.find("parameters (closed form):    2841154") != std::string::npos);
    CHECK(r.out.find("4641209") != std::string::npos);
    CHECK(r.out.find("head.conv.weight") != std::string::npos);
  }

  TEST_CASE("evaluate on labels scored against themselves") {
    TempDir dir("cli_eval");
    REQUIRE(run_cli({"phantom", "--out", dir / "ph", "--counts", "2,1,1,0", "--size", "20", "--seed", "4"}).code ==
            cli::kOk);
    // The labels double as predictions.
    const Manifest m = read_manifest(dir.path() / "ph" / "manifest.csv");
    std::filesystem::create_directories(dir.path() / "pred");
    for (const auto& s : m.subjects) {
      std::filesystem::copy_file(m.resolve(*s.label_path), dir.path() / "pred" / (s.subject_id + "_mask.nii.gz"));
    }
    const auto r = run_cli({"evaluate", "--manifest", dir / "ph/manifest.csv", "--predictions", dir / "pred",
                            "--out", dir / "ev"});
    REQUIRE(r.code == cli::kOk);
    std::ifstream in(dir.path() / "ev" / "summary.json");
    const auto doc = nlohmann::json::parse(in);
    CHECK(doc["overall"]["n"] == 4);
    CHECK(doc["overall"]["vs"]["median"] == 1.0);
    CHECK(doc["overall"]["dsc"]["median"] == 1.0);
    CHECK(doc["overall"]["hd95_mm"]["median"] == 0.0);
    CHECK(doc["per_scanner"].size() == 3);
    const auto rows = read_metrics_csv(dir.path() / "ev" / "metrics.csv");
    CHECK(rows.size() == 4);

    // A missing prediction is a subject-level failure.
    std::filesystem::remove(dir.path() / "pred" / (m.subjects[0].subject_id + "_mask.nii.gz"));
    const auto partial = run_cli({"evaluate", "--manifest", dir / "ph/manifest.csv", "--predictions",
                                  dir / "pred", "--out", dir / "ev2", "--log-level", "off"});
    CHECK(partial.code == cli::kSubjectErrors);
  }

  TEST_CASE("non-empty output directories need --force") {
    TempDir dir("cli_force");
    const std::vector<std::string> args{"phantom", "--out", dir / "ph", "--counts", "1,1,0,0", "--size", "16"};
    CHECK(run_cli(args).code == cli::kOk);
    const auto again = run_cli(args);
    CHECK(again.code == cli::kFailure);
    CHECK(again.err.find("--force") != std::string::npos);
    auto forced = args;
    forced.push_back("--force");
    CHECK(run_cli(forced).code == cli::kOk);

    const std::vector<std::string> split{"split", "--manifest", dir / "ph/manifest.csv", "--strategy", "loso",
                                         "--out", dir / "plan.json"};
    CHECK(run_cli(split).code == cli::kOk);
    CHECK(run_cli(split).code == cli::kFailure);
  }

  TEST_CASE("crossval scores every subject exactly once") {
    TempDir dir("cli_cv");
    REQUIRE(run_cli({"phantom", "--out", dir / "ph", "--counts", "3,3,0,0", "--size", "16", "--seed", "2"}).code ==
            cli::kOk);
    const auto r = run_cli({"experiment", "crossval", "--manifest", dir / "ph/manifest.csv", "--config",
                            tiny_config(dir), "--k", "3", "--out", dir / "cv", "--no-volumes", "--log-level",
                            "error"});
    REQUIRE(r.code == cli::kOk);
    CHECK(r.out.find("A+C: n=6") != std::string::npos);
    CHECK(r.out.find("style_A vs rest") != std::string::npos);

    const auto rows = read_metrics_csv(dir.path() / "cv" / "metrics.csv");
    std::multiset<std::string> ids;
    for (const auto& row : rows) ids.insert(row.subject_id);
    CHECK(ids.size() == 6);
    CHECK(std::set<std::string>(ids.begin(), ids.end()).size() == 6);
    for (const auto& fold : {"fold0", "fold1", "fold2"}) {
      CHECK(std::filesystem::exists(dir.path() / "cv" / fold / "model_axial.ckpt"));
    }
  }

  TEST_CASE("train, predict and evaluate chain together") {
    TempDir dir("cli_chain");
    const std::string cfg = tiny_config(dir);
    REQUIRE(run_cli({"phantom", "--out", dir / "ph", "--counts", "2,2,0,0", "--size", "16"}).code == cli::kOk);
    const std::string manifest = dir / "ph/manifest.csv";
    REQUIRE(run_cli({"train", "--manifest", manifest, "--config", cfg, "--views", "A,S", "--out", dir / "tr",
                     "--log-level", "error"})
                .code == cli::kOk);
    CHECK(std::filesystem::exists(dir.path() / "tr" / "curve_sagittal.csv"));
    REQUIRE(run_cli({"predict", "--manifest", manifest, "--config", cfg, "--models",
                     dir / "tr/model_axial.ckpt," + dir / "tr/model_sagittal.ckpt", "--out", dir / "pr",
                     "--log-level", "error"})
                .code == cli::kOk);
    CHECK(std::filesystem::exists(dir.path() / "pr" / "A_000_prob.nii.gz"));
    CHECK(run_cli({"evaluate", "--manifest", manifest, "--predictions", dir / "pr", "--out", dir / "ev"}).code !=
          cli::kFailure);

    // Two checkpoints for one view are rejected.
    CHECK(run_cli({"predict", "--manifest", manifest, "--models",
                   dir / "tr/model_axial.ckpt," + dir / "tr/model_axial.ckpt", "--out", dir / "pr2"})
              .code == cli::kFailure);
  }
}
