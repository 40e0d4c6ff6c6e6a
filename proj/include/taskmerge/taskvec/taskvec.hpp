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

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskmerge/checkpoint/checkpoint.hpp"
#include "taskmerge/num/graph.hpp"

namespace tmerge::taskvec {

/// Backbone residuals ft - base, tagged with the backbone fingerprint of base.
struct TaskVector {
  ckpt::ParamMap deltas;
  std::string base_fingerprint;
  std::string task;

  std::string fingerprint() const { return ckpt::fingerprint(deltas); }
  /// Largest |delta| over every element; 0 for an empty vector.
  double max_abs() const;
};

/// Throws CompatibilityError naming the first mismatching backbone entry.
TaskVector extract_task_vector(const ckpt::LayeredCheckpoint& ft, const ckpt::LayeredCheckpoint& base);

enum class Strategy { StaticGlobal, AdaptiveGlobal, AdaptiveLayerwise };

std::string strategy_name(Strategy s);
/// "static_global" | "adaptive_global" | "adaptive_layerwise"; ValidationError otherwise.
Strategy parse_strategy(const std::string& name);

/// One coefficient row per task vector: a single shared value for the global
/// strategies, L+1 values (layer 0 = front-end) for the layer-wise one.
struct MergeCoefficients {
  Strategy strategy = Strategy::AdaptiveLayerwise;
  std::vector<std::vector<double>> lambdas;

  static constexpr double kInit = 0.5;

  static MergeCoefficients init(Strategy strategy, std::size_t num_vectors, int num_layers,
                                double value = kInit);

  bool trainable() const { return strategy != Strategy::StaticGlobal; }
  /// Coefficient that vector v applies at `layer`.
  double at(std::size_t v, int layer) const;
  /// Arity check: throws ValidationError.
  void validate(std::size_t num_vectors, int num_layers) const;

  nlohmann::json to_json() const;
  static MergeCoefficients from_json(const nlohmann::json& j);
};

/// base + sum_v lambda_v(l) * delta_v on every backbone tensor; head entries of
/// base pass through untouched. Throws StaleVectorError when a vector was not
/// extracted from this base and ValidationError on an arity mismatch.
ckpt::LayeredCheckpoint merge_layerwise(const ckpt::LayeredCheckpoint& base, const std::vector<TaskVector>& tvs,
                                        const MergeCoefficients& coeffs);
ckpt::LayeredCheckpoint merge_static_global(const ckpt::LayeredCheckpoint& base,
                                            const std::vector<TaskVector>& tvs, double lambda);
ckpt::LayeredCheckpoint merge_adaptive_global(const ckpt::LayeredCheckpoint& base,
                                              const std::vector<TaskVector>& tvs, const MergeCoefficients& coeffs);

/// Same result as merge_layerwise, computed with the single-threaded kernels.
namespace serial {
ckpt::LayeredCheckpoint merge_layerwise(const ckpt::LayeredCheckpoint& base, const std::vector<TaskVector>& tvs,
                                        const MergeCoefficients& coeffs);
}

/// Coefficients as graph leaves, one row per vector (trainable unless StaticGlobal).
using CoefficientVars = std::vector<std::vector<num::Var>>;
CoefficientVars bind_coefficients(num::Graph& g, const MergeCoefficients& coeffs);
/// Current values read back from bound leaves (used after an optimizer step).
MergeCoefficients read_coefficients(const MergeCoefficients& like, const CoefficientVars& vars);

/// Merged backbone recorded on `g`: base and deltas enter as constants, so
/// only the coefficient leaves receive gradients. Values are bit-identical to
/// merge_layerwise.
num::VarMap merge_on_graph(num::Graph& g, const ckpt::LayeredCheckpoint& base, const std::vector<TaskVector>& tvs,
                           const MergeCoefficients& coeffs, const CoefficientVars& vars);

/// Throws StaleVectorError unless every vector was extracted from `base`.
void check_fresh(const ckpt::LayeredCheckpoint& base, const std::vector<TaskVector>& tvs);

struct LayerDiagnostics {
  int layer = 0;
  double norm_a = 0.0;
  double norm_b = 0.0;
  double cosine = 0.0;  // 0 when either norm vanishes
};

struct VectorDiagnostics {
  std::vector<LayerDiagnostics> layers;  // ascending layer index
  LayerDiagnostics total;                // layer = -1
  nlohmann::json to_json() const;
};

VectorDiagnostics vector_diagnostics(const TaskVector& a, const TaskVector& b);

void save_task_vector(const TaskVector& tv, const std::filesystem::path& prefix);
TaskVector load_task_vector(const std::filesystem::path& prefix);

}  // namespace tmerge::taskvec
