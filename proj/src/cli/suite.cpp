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

#include <cstdio>
#include <functional>
#include <sstream>

#include "taskmerge/checkpoint/archive.hpp"
#include "taskmerge/cli/experiment.hpp"
#include "taskmerge/errors.hpp"

namespace tmerge::cli {

namespace fs = std::filesystem;

std::string error_type_name(const std::exception& e) {
  if (dynamic_cast<const ValidationError*>(&e)) return "ValidationError";
  if (dynamic_cast<const ShapeError*>(&e)) return "ShapeError";
  if (dynamic_cast<const FormatError*>(&e)) return "FormatError";
  if (dynamic_cast<const CorruptionError*>(&e)) return "CorruptionError";
  if (dynamic_cast<const IoError*>(&e)) return "IoError";
  if (dynamic_cast<const CompatibilityError*>(&e)) return "CompatibilityError";
  if (dynamic_cast<const StaleVectorError*>(&e)) return "StaleVectorError";
  if (dynamic_cast<const FreezeViolation*>(&e)) return "FreezeViolation";
  if (dynamic_cast<const std::invalid_argument*>(&e)) return "InvalidArgument";
  return "RuntimeError";
}

bool SuiteReport::ok() const {
  for (const auto& s : setups)
    if (!s.ok) return false;
  return true;
}

const SetupResult& SuiteReport::at(const std::string& name) const {
  for (const auto& s : setups)
    if (s.name == name) return s;
  throw ValidationError("suite report has no setup '" + name + "'");
}

nlohmann::json SuiteReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : setups) {
    nlohmann::json r = {{"name", s.name}, {"part", s.part}, {"description", s.description},
                        {"status", s.ok ? "ok" : "failed"}};
    if (s.ok) r["metrics"] = s.metrics;
    else r["error"] = s.error;
    rows.push_back(r);
  }
  return {{"setups", rows}};
}

std::string SuiteReport::to_table() const {
  auto cell = [](const nlohmann::json& m, const char* key, bool with_ci) -> std::string {
    if (!m.contains(key)) return "-";
    const auto& v = m.at(key);
    char buf[64];
    if (with_ci) {
      std::snprintf(buf, sizeof buf, "%.2f [%.2f, %.2f]", 100.0 * v.at("point").get<double>(),
                    100.0 * v.at("ci_lo").get<double>(), 100.0 * v.at("ci_hi").get<double>());
    } else {
      std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v.at("point").get<double>());
    }
    return buf;
  };
  std::vector<std::vector<std::string>> rows{{"part", "setup", "UAR [95% CI]", "Pre.", "MaF1", "TER", "status"}};
  for (const auto& s : setups) {
    if (s.ok) {
      rows.push_back({s.part, s.name, cell(s.metrics, "uar", true), cell(s.metrics, "precision", false),
                      cell(s.metrics, "macro_f1", false), cell(s.metrics, "token_error_rate", false), "ok"});
    } else {
      rows.push_back({s.part, s.name, "-", "-", "-", "-", "failed: " + s.error});
    }
  }
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  std::ostringstream os;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      os << r[i];
      if (i + 1 < r.size()) os << std::string(width[i] - r[i].size() + 2, ' ');
    }
    os << '\n';
  }
  return os.str();
}

namespace {

struct SetupSpec {
  std::string name;
  std::string part;
  std::string description;
  std::function<fs::path(const fs::path& dir)> run;  // returns the model prefix to evaluate
};

}  // namespace

SuiteReport run_suite(const Workspace& ws) {
  using taskvec::Strategy;
  using train::Task;

  cmd_init_base(ws);
  cmd_gen_data(ws, Domain::In);
  cmd_gen_data(ws, Domain::Out);
  for (auto [task, domain] : {std::pair{Task::Ser, Domain::In}, {Task::Asr, Domain::In}, {Task::Asr, Domain::Out}}) {
    cmd_finetune(ws, task, domain);
    cmd_extract(ws, task, domain);
  }
  const auto diag = taskvec::vector_diagnostics(ws.load_vector(Task::Asr, Domain::In), ws.load_vector(Task::Ser, Domain::In));
  ckpt::write_text_file(ws.path("vectors/diagnostics_asr_ser.json"), diag.to_json().dump(2) + "\n");

  auto merge_setup = [&](VectorSet set, Strategy strategy, Domain asr_domain) {
    return [&ws, set, strategy, asr_domain](const fs::path& dir) {
      cmd_train_merge(ws, set, strategy, asr_domain, dir);
      return dir / "model";
    };
  };
  auto mtl_setup = [&](bool static_init) {
    return [&ws, static_init](const fs::path& dir) {
      cmd_train_mtl(ws, static_init, dir / "model");
      return dir / "model";
    };
  };

  const std::vector<SetupSpec> grid{
      {"ser_finetune", "1", "SER fine-tune of the base (reference)",
       [&](const fs::path&) { return ws.finetune_prefix(Task::Ser, Domain::In); }},
      {"mtl", "1", "joint SER+ASR training from the base", mtl_setup(false)},
      {"mtl_static_init", "1", "joint training from base + 0.5 (asr + ser)", mtl_setup(true)},
      {"setup1_frozen", "2", "frozen base, no task vector", merge_setup(VectorSet::None, Strategy::AdaptiveLayerwise, Domain::In)},
      {"setup2_asr", "2", "ASR vector, layer-wise coefficients", merge_setup(VectorSet::Asr, Strategy::AdaptiveLayerwise, Domain::In)},
      {"setup3_ser", "2", "SER vector, layer-wise coefficients", merge_setup(VectorSet::Ser, Strategy::AdaptiveLayerwise, Domain::In)},
      {"setup4_dual", "2", "ASR + SER vectors, layer-wise coefficients",
       merge_setup(VectorSet::Dual, Strategy::AdaptiveLayerwise, Domain::In)},
      {"dual_ood_asr", "3", "out-of-domain ASR vector + SER vector, layer-wise",
       merge_setup(VectorSet::Dual, Strategy::AdaptiveLayerwise, Domain::Out)},
      {"static_global", "4", "ASR + SER vectors, fixed global coefficient 0.5",
       merge_setup(VectorSet::Dual, Strategy::StaticGlobal, Domain::In)},
      {"adaptive_global", "4", "ASR + SER vectors, one trained coefficient per vector",
       merge_setup(VectorSet::Dual, Strategy::AdaptiveGlobal, Domain::In)},
  };

  SuiteReport report;
  for (const auto& spec : grid) {
    SetupResult r{spec.name, spec.part, spec.description, false, "", nlohmann::json::object()};
    const fs::path dir = ws.path("suite/" + spec.name);
    try {
      ws.log("suite: " + spec.name);
      const fs::path model = spec.run(dir);
      r.metrics = cmd_eval(ws, model, std::nullopt, dir / "report.json").at("metrics");
      r.ok = true;
    } catch (const std::exception& e) {
      r.error = error_type_name(e) + ": " + e.what();
      ws.log("suite: " + spec.name + " failed: " + r.error);
    }
    report.setups.push_back(std::move(r));
    ckpt::write_text_file(ws.path("report.json"), report.to_json().dump(2) + "\n");
  }
  ckpt::write_text_file(ws.path("report.txt"), report.to_table());
  return report;
}

}  // namespace tmerge::cli
