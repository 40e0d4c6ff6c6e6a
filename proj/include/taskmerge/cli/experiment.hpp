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

#pragma once

// Experiment directory layout (relative to output_dir):
//
//   config.json                     resolved config, written by every verb
//   log.txt                         timestamped progress; the only file with times
//   base.*                          random-init backbone
//   data/corpus_{in,out}.*          synthetic corpora
//   models/ft_<task>_<domain>.*     fine-tuned checkpoints (+ .metrics.csv)
//   vectors/tv_<task>_<domain>.*    task vectors
//   models/mtl[_static_init].*      joint-training checkpoints (+ .metrics.csv)
//   merge/                          train-merge output for the configured setup
//   suite/<setup>/                  one directory per run-suite row
//   report.json, report.txt         run-suite comparison table

#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskmerge/checkpoint/checkpoint.hpp"
#include "taskmerge/metrics/metrics.hpp"
#include "taskmerge/synth/synthdata.hpp"
#include "taskmerge/taskvec/taskvec.hpp"
#include "taskmerge/train/train.hpp"

namespace tmerge::cli {

enum class VectorSet { None, Asr, Ser, Dual };
enum class Domain { In, Out };

std::string vector_set_name(VectorSet v);
VectorSet parse_vector_set(const std::string& s);
std::string domain_name(Domain d);
Domain parse_domain(const std::string& s);

struct ExperimentConfig {
  ckpt::ModelConfig model;
  train::TrainConfig train;
  synth::SynthConfig synth;
  taskvec::Strategy strategy = taskvec::Strategy::AdaptiveLayerwise;
  VectorSet vectors = VectorSet::Dual;
  Domain domain = Domain::In;
  std::string output_dir = "runs/default";
  std::uint64_t base_seed = 7;
  double ood_shift = 1.0;                // domain_shift of the out-of-domain corpus
  std::optional<double> mtl_backbone_multiplier;  // unset: train.dlr_backbone_multiplier
  std::optional<double> adaltm_lr;                // coefficient-training lr; unset: train.lr
  metrics::BootstrapConfig bootstrap;

  /// Cross-section checks (model and synth shapes agree) on top of each section's own.
  void validate() const;
  nlohmann::json to_json() const;
  /// Strict: unknown keys anywhere are a ValidationError.
  static ExperimentConfig from_json(const nlohmann::json& j);
};

/// Sets `dotted.path` in `doc` to `value` (parsed as JSON, else taken as a
/// string). Intermediate objects must already exist.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Default config as JSON, then the file at `config_path` merged over it,
/// then each override. Validated.
ExperimentConfig resolve_config(const std::optional<std::filesystem::path>& config_path,
                                const std::vector<std::string>& overrides);

class Workspace {
 public:
  explicit Workspace(ExperimentConfig cfg);

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path path(const std::string& relative) const { return dir_ / relative; }

  void write_config() const;
  void log(const std::string& line) const;

  synth::SynthConfig synth_config(Domain d) const;
  std::filesystem::path corpus_prefix(Domain d) const;
  std::filesystem::path finetune_prefix(train::Task t, Domain d) const;
  std::filesystem::path vector_prefix(train::Task t, Domain d) const;

  /// Loads an artifact; IoError naming the verb that produces it when absent.
  ckpt::LayeredCheckpoint load_base() const;
  synth::Corpus load_corpus(Domain d) const;
  ckpt::LayeredCheckpoint load_finetuned(train::Task t, Domain d) const;
  taskvec::TaskVector load_vector(train::Task t, Domain d) const;
  /// Vectors of a set; the ASR vector comes from `asr_domain`.
  std::vector<taskvec::TaskVector> load_vectors(VectorSet set, Domain asr_domain) const;

 private:
  ExperimentConfig cfg_;
  std::filesystem::path dir_;
};

// ---- verbs ------------------------------------------------------------------

void cmd_init_base(const Workspace& ws);
void cmd_gen_data(const Workspace& ws, Domain d);
void cmd_finetune(const Workspace& ws, train::Task task, Domain d);
void cmd_extract(const Workspace& ws, train::Task task, Domain d);
void cmd_extract_paths(const std::filesystem::path& ft, const std::filesystem::path& base,
                       const std::filesystem::path& out);
/// base + vectors of the configured set with the given coefficients; head
/// entries of `head_from` (if any) are attached.
void cmd_merge(const Workspace& ws, const taskvec::MergeCoefficients& coeffs,
               const std::optional<std::filesystem::path>& head_from, const std::filesystem::path& out);
void cmd_train_mtl(const Workspace& ws, bool static_init, const std::filesystem::path& out_prefix);
void cmd_train_merge(const Workspace& ws, VectorSet set, taskvec::Strategy strategy, Domain asr_domain,
                     const std::filesystem::path& out_dir);
/// Test-split report of a checkpoint (with `head_from` heads attached when given).
nlohmann::json cmd_eval(const Workspace& ws, const std::filesystem::path& model,
                        const std::optional<std::filesystem::path>& head_from, const std::filesystem::path& out);
void cmd_export_coeffs(const std::filesystem::path& trajectory, const std::filesystem::path& csv);

// ---- serialization helpers ----------------------------------------------------

/// Coefficient trajectory document: vector tasks plus one entry per snapshot.
nlohmann::json trajectory_json(const std::vector<std::string>& vector_tasks,
                               const std::vector<train::CoefficientSnapshot>& snapshots);
/// step,layer,lambda_asr,lambda_ser,alpha_agg: L+1 rows per step; fields of
/// absent vectors and alpha at layer 0 stay empty.
std::string coefficients_csv(const nlohmann::json& trajectory);

// ---- suite ------------------------------------------------------------------

struct SetupResult {
  std::string name;
  std::string part;
  std::string description;
  bool ok = false;
  std::string error;
  nlohmann::json metrics;  // metric -> {point, ci_lo, ci_hi}
};

struct SuiteReport {
  std::vector<SetupResult> setups;
  bool ok() const;
  const SetupResult& at(const std::string& name) const;
  nlohmann::json to_json() const;
  std::string to_table() const;
};

/// Every prerequisite verb, then the comparison grid. A failing setup is
/// recorded and the rest still run.
SuiteReport run_suite(const Workspace& ws);

// ---- entry point ----------------------------------------------------------------

/// Class name used in machine-readable error reports.
std::string error_type_name(const std::exception& e);

/// Parses argv and dispatches; returns the process exit code.
int run(int argc, const char* const* argv);

}  // namespace tmerge::cli
