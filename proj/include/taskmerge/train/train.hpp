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

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskmerge/checkpoint/checkpoint.hpp"
#include "taskmerge/metrics/metrics.hpp"
#include "taskmerge/num/graph.hpp"
#include "taskmerge/synth/synthdata.hpp"
#include "taskmerge/taskvec/taskvec.hpp"

namespace tmerge::train {

struct TrainConfig {
  double lr = 1e-4;
  int batch_size = 32;
  int epochs = 100;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  double dlr_backbone_multiplier = 0.1;
  double mtl_loss_mix = 0.5;
  double cb_beta = 0.9999;
  double label_smoothing = 0.1;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// ---- losses ---------------------------------------------------------------

/// Effective-number weights (1 - beta) / (1 - beta^n_c), scaled to mean 1.
/// Zero counts are treated as 1; equal counts give exactly 1 everywhere.
std::vector<double> class_balance_weights(const std::vector<long>& counts, double beta);

/// -sum_c w_c * soft_label_c * log_softmax(logits)_c for logits [1, C].
/// ValidationError when soft_label is negative or does not sum to 1.
num::Var class_balanced_soft_ce(const num::Var& logits, const std::vector<double>& soft_label,
                                const std::vector<double>& weights);

/// Mean over frames of -log_softmax(frame_logits)[t, labels[t]].
num::Var asr_frame_ce(const num::Var& frame_logits, const std::vector<int>& labels);

/// (1 - eps) * soft_label + eps / C.
std::vector<double> smoothed_target(const std::vector<double>& soft_label, double eps);

/// Token label of every front-end output frame: output frame t takes the
/// label of input frame t * stride + kernel / 2.
std::vector<int> output_frame_labels(const ckpt::ModelConfig& cfg, const std::vector<int>& input_labels);

/// Training emotion counts (argmax class per utterance).
std::vector<long> emotion_counts(const std::vector<synth::Utterance>& utts, int num_classes);

// ---- optimizer --------------------------------------------------------------

struct TrainableParam {
  num::Tensor value;
  double lr_multiplier = 1.0;
  bool decay = true;
};
using TrainableSet = std::map<std::string, TrainableParam>;
using GradMap = std::map<std::string, num::Tensor>;

struct OptimizerState {
  std::map<std::string, num::Tensor> m;
  std::map<std::string, num::Tensor> v;
  long step = 0;
};

/// AdamW with decoupled decay: p -= lr * mult * wd * p, then the
/// bias-corrected Adam step scaled by lr * mult. Parameters without a gradient
/// entry are left alone.
void optimizer_step(TrainableSet& params, const GradMap& grads, OptimizerState& state, const TrainConfig& cfg);

// ---- histories --------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  std::optional<double> train_loss;  // absent at epoch 0
  double valid_loss = 0.0;
  std::map<std::string, double> valid_metrics;
};

struct History {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;

  /// epoch,split,loss,uar,precision,macro_f1,token_error_rate; one train and
  /// one valid row per epoch, empty fields where a value does not apply.
  std::string to_csv() const;
  std::vector<double> valid_losses() const;
};

/// Index of the smallest loss; ties go to the earliest. ValidationError on empty input.
std::size_t select_checkpoint(const std::vector<double>& valid_losses);

using EpochHook = std::function<void(const EpochRecord&)>;

// ---- evaluation -------------------------------------------------------------

struct LossSetup {
  std::vector<double> class_weights;
  double label_smoothing = 0.0;
};

struct SplitOutputs {
  std::vector<metrics::UtteranceResult> results;
  std::vector<double> ser_loss;  // per utterance, empty without an SER head
  std::vector<double> asr_loss;  // per utterance, empty without an ASR head
  bool has_ser = false;
  bool has_asr = false;

  double mean_ser_loss() const;
  double mean_asr_loss() const;
};

/// Constant-weight forward of `model` (backbone plus whichever heads it
/// carries) over `utts`, one graph per utterance, parallel over utterances.
SplitOutputs run_model(const ckpt::LayeredCheckpoint& model, const std::vector<synth::Utterance>& utts,
                       const LossSetup& loss);

namespace serial {
/// Single-threaded loop over the same per-utterance body.
SplitOutputs run_model(const ckpt::LayeredCheckpoint& model, const std::vector<synth::Utterance>& utts,
                       const LossSetup& loss);
}

/// Test-set report with bootstrap intervals.
metrics::EvalReport evaluate_model(const ckpt::LayeredCheckpoint& model, const std::vector<synth::Utterance>& utts,
                                   const metrics::BootstrapConfig& boot);

// ---- procedures -------------------------------------------------------------

enum class Task { Ser, Asr };
std::string task_name(Task t);
Task parse_task(const std::string& name);

/// Fresh head tensors for `task`, seeded from `seed` and the task name.
ckpt::ParamMap init_head(const ckpt::ModelConfig& cfg, Task task, std::uint64_t seed);

struct TrainResult {
  ckpt::LayeredCheckpoint model;  // best epoch
  History history;
};

/// Backbone at lr * dlr_backbone_multiplier, fresh task head at lr.
TrainResult finetune_task(const ckpt::LayeredCheckpoint& base, const synth::Corpus& corpus, Task task,
                          const TrainConfig& cfg, const EpochHook& hook = {});

/// Joint loss mix * L_ser + (1 - mix) * L_asr with both heads fresh. The
/// backbone runs at lr * backbone_multiplier (cfg.dlr_backbone_multiplier
/// when unset). mix 1 and mix 0 drop the other task entirely.
TrainResult train_mtl(const ckpt::LayeredCheckpoint& init, const synth::Corpus& corpus, const TrainConfig& cfg,
                      std::optional<double> backbone_multiplier = std::nullopt, const EpochHook& hook = {});

struct CoefficientSnapshot {
  int step = 0;  // epoch; 0 is the initialization
  taskvec::MergeCoefficients coeffs;
  std::vector<double> alpha;  // softmax of the aggregation weights
};

struct AdaLtmResult {
  taskvec::MergeCoefficients coeffs;  // best epoch
  ckpt::ParamMap head;                // agg.raw, ser.weight, ser.bias at the best epoch
  ckpt::LayeredCheckpoint model;      // merged backbone + head
  History history;
  std::vector<CoefficientSnapshot> snapshots;
};

/// Trains only the merge coefficients, the aggregation weights and the SER
/// head; base and task vectors stay frozen and are fingerprinted before and
/// after (FreezeViolation on drift). With no vectors or a static strategy the
/// merged backbone is fixed and its hidden states are computed once.
AdaLtmResult train_adaltm(const ckpt::LayeredCheckpoint& base, const std::vector<taskvec::TaskVector>& tvs,
                          const synth::Corpus& corpus, taskvec::Strategy strategy, const TrainConfig& cfg,
                          const EpochHook& hook = {});

/// Gradients of one mini-batch SER loss through the merged model, by
/// parameter name ("lambda/<v>/<i>" for coefficient i of vector v, head
/// names otherwise). Used by gradient checks.
struct AdaLtmBatchLoss {
  double loss = 0.0;
  GradMap grads;
};
AdaLtmBatchLoss adaltm_batch_loss(const ckpt::LayeredCheckpoint& base, const std::vector<taskvec::TaskVector>& tvs,
                                  const taskvec::MergeCoefficients& coeffs, const ckpt::ParamMap& head,
                                  const std::vector<synth::Utterance>& batch, const LossSetup& loss);

/// "lambda/<v>/<i>"
std::string coefficient_name(std::size_t v, std::size_t i);

}  // namespace tmerge::train
