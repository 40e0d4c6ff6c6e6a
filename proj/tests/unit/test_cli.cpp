/*
 * Copyright 2026 The taskmerge Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <iostream>
#include <sstream>

#include "doctest.h"
#include "taskmerge/checkpoint/archive.hpp"
#include "taskmerge/cli/experiment.hpp"
#include "taskmerge/errors.hpp"
#include "test_util.hpp"

using namespace tmerge;
using namespace tmerge::cli;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out, err;
};

Outcome invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "taskmerge");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  Outcome o;
  o.code = run(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

std::vector<std::string> tiny(const fs::path& dir) {
  return {"--out",          dir.string(),
          "--set", "model.num_layers=2",  "--set", "model.model_dim=8",  "--set", "model.heads=2",
          "--set", "model.ffn_dim=16",    "--set", "synth.num_train=16", "--set", "synth.num_valid=8",
          "--set", "synth.num_test=8",    "--set", "synth.frames_max=20", "--set", "train.epochs=2",
          "--set", "train.batch_size=8",  "--set", "bootstrap.n_resamples=20"};
}

Outcome invoke_tiny(const fs::path& dir, std::vector<std::string> verb) {
  auto args = tiny(dir);
  args.insert(args.end(), verb.begin(), verb.end());
  return invoke(args);
}

std::string error_type(const Outcome& o) {
  const auto j = nlohmann::json::parse(o.err);
  return j.at("error").at("type").get<std::string>();
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("overrides set nested values, parse JSON and fall back to strings") {
  nlohmann::json doc = ExperimentConfig{}.to_json();
  apply_override(doc, "train.lr=0.5");
  apply_override(doc, "vectors=asr");
  apply_override(doc, "synth.class_prior=[0.5,0.5,0,0,0,0,0,0]");
  CHECK(doc["train"]["lr"] == 0.5);
  CHECK(doc["vectors"] == "asr");
  CHECK(doc["synth"]["class_prior"].size() == 8);
  CHECK_THROWS_AS(apply_override(doc, "train.lr"), ValidationError);
  CHECK_THROWS_AS(apply_override(doc, "nope.lr=1"), ValidationError);
  CHECK_THROWS_AS(resolve_config(std::nullopt, {"train.learning_rate=1"}), ValidationError);
  CHECK_THROWS_AS(resolve_config(std::nullopt, {"vectors=triple"}), ValidationError);
  CHECK(resolve_config(std::nullopt, {"train.seed=9"}).train.seed == 9);
}

TEST_CASE("config files merge over defaults and are validated across sections") {
  testing::TempDir dir("cli_cfg");
  ckpt::write_text_file(dir / "c.json", R"({"train":{"epochs":3},"strategy":"static_global"})");
  const auto cfg = resolve_config(dir / "c.json", {"train.epochs=4"});
  CHECK(cfg.train.epochs == 4);
  CHECK(cfg.train.lr == 1e-4);
  CHECK(cfg.strategy == taskvec::Strategy::StaticGlobal);
  CHECK(ExperimentConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
  CHECK_THROWS_AS(resolve_config(dir / "missing.json", {}), IoError);
  ckpt::write_text_file(dir / "bad.json", "{not json");
  CHECK_THROWS(resolve_config(dir / "bad.json", {}));
  CHECK_THROWS_AS(resolve_config(std::nullopt, {"model.input_dim=12"}), ValidationError);
}

TEST_CASE("exit codes: usage and validation errors are 2, runtime failures are 1") {
  testing::TempDir dir("cli_exit");
  auto none = invoke({});
  CHECK(none.code == 2);
  CHECK(error_type(none) == "UsageError");

  auto unknown = invoke({"frobnicate"});
  CHECK(unknown.code == 2);

  auto invalid = invoke({"--out", dir.path().string(), "--set", "model.num_layers=0", "init-base"});
  CHECK(invalid.code == 2);
  CHECK(error_type(invalid) == "ValidationError");

  auto missing = invoke_tiny(dir.path(), {"finetune", "--task", "ser"});
  CHECK(missing.code == 1);
  CHECK(error_type(missing) == "IoError");
  CHECK(missing.err.find("init-base") != std::string::npos);

  auto bad_task = invoke_tiny(dir.path(), {"finetune", "--task", "emotion"});
  CHECK(bad_task.code == 2);

  CHECK(invoke_tiny(dir.path(), {"init-base"}).code == 0);
  CHECK(fs::exists(dir / "config.json"));
  CHECK(fs::exists(dir / "log.txt"));
}

TEST_CASE("a tiny pipeline runs end to end through the command line") {
  testing::TempDir dir("cli_pipe");
  const auto d = dir.path();
  for (const auto& verb : std::vector<std::vector<std::string>>{
           {"init-base"},
           {"gen-data"},
           {"finetune", "--task", "ser"},
           {"finetune", "--task", "asr"},
           {"extract", "--task", "ser"},
           {"extract", "--task", "asr"}}) {
    const auto o = invoke_tiny(d, verb);
    REQUIRE_MESSAGE(o.code == 0, verb[0] << ": " << o.err);
  }
  CHECK(fs::exists(d / "models/ft_ser_in.metrics.csv"));
  CHECK(fs::exists(d / "data/corpus_in.stats.json"));

  SUBCASE("extract of identical checkpoints is exactly zero") {
    const auto o = invoke_tiny(d, {"extract", "--ft", (d / "base").string(), "--base", (d / "base").string(), "--to",
                                   (d / "zero").string()});
    REQUIRE(o.code == 0);
    CHECK(o.out.find("max_abs_delta 0") != std::string::npos);
    CHECK(taskvec::load_task_vector(d / "zero").max_abs() == 0.0);
    CHECK(invoke_tiny(d, {"extract", "--ft", (d / "base").string()}).code == 2);
  }

  SUBCASE("merging with zero coefficients evaluates like the bare base") {
    const auto head = (d / "models/ft_ser_in").string();
    REQUIRE(invoke_tiny(d, {"merge", "--lambda", "0", "--head", head, "--to", (d / "m0").string()}).code == 0);
    const auto merged = invoke_tiny(d, {"eval", "--model", (d / "m0").string(), "--to", (d / "m0.json").string()});
    const auto bare = invoke_tiny(d, {"eval", "--model", (d / "base").string(), "--head", head, "--to",
                                      (d / "b.json").string()});
    REQUIRE(merged.code == 0);
    REQUIRE(bare.code == 0);
    CHECK(ckpt::read_text_file(d / "m0.json") == ckpt::read_text_file(d / "b.json"));
    CHECK(invoke_tiny(d, {"merge", "--head", head}).code == 2);
    CHECK(error_type(invoke_tiny(d, {"eval", "--model", (d / "base").string()})) == "ValidationError");
  }

  SUBCASE("coefficient training exports L+1 rows per step starting at 0.5") {
    REQUIRE(invoke_tiny(d, {"train-merge"}).code == 0);
    const auto csv = ckpt::read_text_file(d / "merge/coefficients.csv");
    CHECK(line_count(csv) == 1 + 3 * 3);  // header + (epochs + 1) steps x (L + 1) layers
    std::istringstream rows(csv);
    std::string line;
    std::getline(rows, line);
    CHECK(line == "step,layer,lambda_asr,lambda_ser,alpha_agg");
    std::getline(rows, line);
    CHECK(line == "0,0,0.5,0.5,");
    std::getline(rows, line);
    CHECK(line == "0,1,0.5,0.5,0.5");

    REQUIRE(invoke_tiny(d, {"export-coeffs", "--to", (d / "again.csv").string()}).code == 0);
    CHECK(ckpt::read_text_file(d / "again.csv") == csv);

    REQUIRE(invoke_tiny(d, {"merge", "--coeffs", (d / "merge/coefficients.json").string(), "--head",
                            (d / "merge/model").string(), "--to", (d / "mc").string()})
                .code == 0);
    CHECK(ckpt::load_checkpoint(d / "mc").fingerprint() == ckpt::load_checkpoint(d / "merge/model").fingerprint());
  }

  SUBCASE("joint training writes a two-head checkpoint") {
    REQUIRE(invoke_tiny(d, {"train-mtl", "--static-init"}).code == 0);
    const auto m = ckpt::load_checkpoint(d / "models/mtl_static_init");
    CHECK(m.contains("ser.weight"));
    CHECK(m.contains("asr.weight"));
    const auto o = invoke_tiny(d, {"eval", "--model", (d / "models/mtl_static_init").string()});
    REQUIRE(o.code == 0);
    const auto report = nlohmann::json::parse(ckpt::read_text_file(d / "models/mtl_static_init.report.json"));
    CHECK(report.at("metrics").contains("uar"));
    CHECK(report.at("metrics").contains("token_error_rate"));
  }
}

TEST_CASE("coefficient csv leaves absent vectors and the layer-0 alpha empty") {
  train::CoefficientSnapshot s{0, taskvec::MergeCoefficients::init(taskvec::Strategy::AdaptiveGlobal, 1, 2), {0.25, 0.75}};
  const auto csv = coefficients_csv(trajectory_json({"ser"}, {s}));
  CHECK(csv == "step,layer,lambda_asr,lambda_ser,alpha_agg\n0,0,,0.5,\n0,1,,0.5,0.25\n0,2,,0.5,0.75\n");
  CHECK_THROWS_AS(coefficients_csv(nlohmann::json::object()), FormatError);
}
