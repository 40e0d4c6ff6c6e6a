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

#include "CLI11.hpp"
#include "taskmerge/checkpoint/archive.hpp"
#include "taskmerge/cli/experiment.hpp"
#include "taskmerge/errors.hpp"

namespace tmerge::cli {

namespace fs = std::filesystem;

namespace {

void print_error(const std::string& type, const std::string& message) {
  std::cerr << nlohmann::json{{"error", {{"type", type}, {"message", message}}}}.dump() << std::endl;
}

struct GlobalOptions {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> overrides;
};

Workspace open_workspace(const GlobalOptions& g) {
  std::vector<std::string> overrides = g.overrides;
  if (g.seed) overrides.push_back("train.seed=" + std::to_string(*g.seed));
  if (g.out) overrides.push_back("output_dir=" + nlohmann::json(*g.out).dump());
  std::optional<fs::path> path;
  if (g.config) path = *g.config;
  Workspace ws(resolve_config(path, overrides));
  ws.write_config();
  return ws;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Task-vector merging experiments on a synthetic speech corpus", "taskmerge"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--config", g.config, "Experiment config JSON");
  app.add_option("--seed", g.seed, "Training seed (train.seed)");
  app.add_option("--out", g.out, "Experiment directory (output_dir)");
  app.add_option("--set", g.overrides, "Config override dotted.path=value (repeatable)");

  std::string task = "ser", domain = "in";
  auto add_task = [&](CLI::App* c) {
    c->add_option("--task", task, "ser or asr")->required();
    c->add_option("--domain", domain, "in or out")->capture_default_str();
  };

  auto* init_base = app.add_subcommand("init-base", "Write the random-init base backbone");
  auto* gen_data = app.add_subcommand("gen-data", "Generate and save the synthetic corpus");
  gen_data->add_option("--domain", domain, "in or out")->capture_default_str();

  auto* finetune = app.add_subcommand("finetune", "Fine-tune the base on one task");
  add_task(finetune);

  auto* extract = app.add_subcommand("extract", "Task vector = fine-tuned - base");
  std::optional<std::string> ft_path, base_path, to;
  extract->add_option("--task", task, "ser or asr");
  extract->add_option("--domain", domain, "in or out")->capture_default_str();
  extract->add_option("--ft", ft_path, "Fine-tuned checkpoint prefix (explicit mode)");
  extract->add_option("--base", base_path, "Base checkpoint prefix (explicit mode)");
  extract->add_option("--to", to, "Output prefix (explicit mode)");

  auto* merge = app.add_subcommand("merge", "Merge the configured vector set into the base");
  std::optional<double> lambda;
  std::optional<std::string> coeffs_path, head_path;
  merge->add_option("--lambda", lambda, "One global coefficient for every vector");
  merge->add_option("--coeffs", coeffs_path, "Coefficient JSON (strategy + lambdas)");
  merge->add_option("--head", head_path, "Attach the head parameters of this checkpoint");
  merge->add_option("--to", to, "Output prefix (default <out>/merge/merged)");

  auto* train_mtl = app.add_subcommand("train-mtl", "Joint SER+ASR training");
  bool static_init = false;
  train_mtl->add_flag("--static-init", static_init, "Start from base + 0.5 * (asr + ser)");
  train_mtl->add_option("--to", to, "Output prefix (default <out>/models/mtl[_static_init])");

  auto* train_merge = app.add_subcommand("train-merge", "Train merge coefficients, aggregation and SER head");
  train_merge->add_option("--to", to, "Output directory (default <out>/merge)");

  auto* eval = app.add_subcommand("eval", "Test-split report with bootstrap intervals");
  std::string model_path;
  eval->add_option("--model", model_path, "Checkpoint prefix")->required();
  eval->add_option("--head", head_path, "Attach the head parameters of this checkpoint");
  eval->add_option("--to", to, "Report path (default <model>.report.json)");

  auto* export_coeffs = app.add_subcommand("export-coeffs", "Coefficient trajectory as CSV");
  std::optional<std::string> from;
  export_coeffs->add_option("--from", from, "Trajectory JSON (default <out>/merge/trajectory.json)");
  export_coeffs->add_option("--to", to, "CSV path (default <out>/merge/coefficients.csv)");

  auto* run_suite_cmd = app.add_subcommand("run-suite", "Every setup of the comparison grid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("UsageError", e.what());
    return 2;
  }

  try {
    const Workspace ws = open_workspace(g);
    const auto& cfg = ws.config();
    if (init_base->parsed()) {
      cmd_init_base(ws);
    } else if (gen_data->parsed()) {
      cmd_gen_data(ws, parse_domain(domain));
    } else if (finetune->parsed()) {
      cmd_finetune(ws, train::parse_task(task), parse_domain(domain));
    } else if (extract->parsed()) {
      if (ft_path || base_path || to) {
        if (!ft_path || !base_path || !to) throw ValidationError("extract explicit mode needs --ft, --base and --to");
        cmd_extract_paths(*ft_path, *base_path, *to);
      } else {
        cmd_extract(ws, train::parse_task(task), parse_domain(domain));
      }
    } else if (merge->parsed()) {
      if (lambda.has_value() == coeffs_path.has_value()) throw ValidationError("merge needs exactly one of --lambda, --coeffs");
      std::size_t nvec = cfg.vectors == VectorSet::Dual ? 2 : cfg.vectors == VectorSet::None ? 0 : 1;
      taskvec::MergeCoefficients c;
      if (lambda) {
        c = taskvec::MergeCoefficients::init(taskvec::Strategy::StaticGlobal, nvec, cfg.model.num_layers, *lambda);
      } else {
        const auto doc = nlohmann::json::parse(ckpt::read_text_file(*coeffs_path), nullptr, false);
        if (doc.is_discarded()) throw ValidationError(*coeffs_path + " is not valid JSON");
        nlohmann::json trimmed = doc;
        for (const char* extra : {"vectors", "alpha", "best_epoch"}) trimmed.erase(extra);
        c = taskvec::MergeCoefficients::from_json(trimmed);
      }
      std::optional<fs::path> head;
      if (head_path) head = *head_path;
      cmd_merge(ws, c, head, to ? fs::path(*to) : ws.path("merge/merged"));
    } else if (train_mtl->parsed()) {
      cmd_train_mtl(ws, static_init, to ? fs::path(*to) : ws.path(static_init ? "models/mtl_static_init" : "models/mtl"));
    } else if (train_merge->parsed()) {
      cmd_train_merge(ws, cfg.vectors, cfg.strategy, cfg.domain, to ? fs::path(*to) : ws.path("merge"));
    } else if (eval->parsed()) {
      std::optional<fs::path> head;
      if (head_path) head = *head_path;
      const fs::path out = to ? fs::path(*to) : fs::path(model_path + ".report.json");
      const auto report = cmd_eval(ws, model_path, head, out);
      std::cout << report.at("metrics").dump(2) << std::endl;
    } else if (export_coeffs->parsed()) {
      cmd_export_coeffs(from ? fs::path(*from) : ws.path("merge/trajectory.json"),
                        to ? fs::path(*to) : ws.path("merge/coefficients.csv"));
    } else if (run_suite_cmd->parsed()) {
      const auto report = run_suite(ws);
      std::cout << report.to_table();
      if (!report.ok()) {
        print_error("SuiteError", "one or more setups failed; see report.json");
        return 1;
      }
    }
    return 0;
  } catch (const std::invalid_argument& e) {
    print_error(error_type_name(e), e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error(error_type_name(e), e.what());
    return 1;
  }
}

}  // namespace tmerge::cli
