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

#include "taskmerge/taskvec/taskvec.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "taskmerge/checkpoint/archive.hpp"
#include "taskmerge/errors.hpp"
#include "taskmerge/json_util.hpp"
#include "taskmerge/num/kernels.hpp"
#include "taskmerge/num/ops.hpp"

namespace tmerge::taskvec {

namespace k = num::kernels;
using ckpt::LayeredCheckpoint;
using ckpt::ParamMap;

double TaskVector::max_abs() const {
  double m = 0.0;
  for (const auto& [_, e] : deltas)
    for (double v : e.tensor.data()) m = std::max(m, std::abs(v));
  return m;
}

TaskVector extract_task_vector(const LayeredCheckpoint& ft, const LayeredCheckpoint& base) {
  const ParamMap fb = ft.backbone();
  const ParamMap bb = base.backbone();
  if (auto why = ckpt::incompatibility(fb, bb)) {
    throw CompatibilityError("cannot extract task vector: " + *why);
  }
  TaskVector tv;
  tv.task = ft.task();
  tv.base_fingerprint = ckpt::fingerprint(bb);
  for (const auto& [name, e] : fb) {
    tv.deltas.emplace(name, ckpt::ParamEntry{k::sub(e.tensor, bb.at(name).tensor), e.layer});
  }
  return tv;
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::StaticGlobal:
      return "static_global";
    case Strategy::AdaptiveGlobal:
      return "adaptive_global";
    case Strategy::AdaptiveLayerwise:
      return "adaptive_layerwise";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  for (auto s : {Strategy::StaticGlobal, Strategy::AdaptiveGlobal, Strategy::AdaptiveLayerwise})
    if (strategy_name(s) == name) return s;
  throw ValidationError("unknown merge strategy '" + name +
                        "' (expected static_global, adaptive_global or adaptive_layerwise)");
}

MergeCoefficients MergeCoefficients::init(Strategy strategy, std::size_t num_vectors, int num_layers, double value) {
  MergeCoefficients c;
  c.strategy = strategy;
  const std::size_t arity = strategy == Strategy::AdaptiveLayerwise ? static_cast<std::size_t>(num_layers) + 1 : 1;
  c.lambdas.assign(num_vectors, std::vector<double>(arity, value));
  return c;
}

double MergeCoefficients::at(std::size_t v, int layer) const {
  const auto& row = lambdas.at(v);
  return row.size() == 1 ? row[0] : row.at(static_cast<std::size_t>(layer));
}

void MergeCoefficients::validate(std::size_t num_vectors, int num_layers) const {
  if (lambdas.size() != num_vectors) {
    throw ValidationError("merge coefficients: " + std::to_string(lambdas.size()) + " rows for " +
                          std::to_string(num_vectors) + " task vectors");
  }
  const std::size_t want = strategy == Strategy::AdaptiveLayerwise ? static_cast<std::size_t>(num_layers) + 1 : 1;
  for (const auto& row : lambdas) {
    if (row.size() != want) {
      throw ValidationError("merge coefficients: strategy " + strategy_name(strategy) + " needs " +
                            std::to_string(want) + " values per vector, got " + std::to_string(row.size()));
    }
    for (double v : row)
      if (!std::isfinite(v)) throw ValidationError("merge coefficients must be finite");
  }
}

nlohmann::json MergeCoefficients::to_json() const {
  return {{"strategy", strategy_name(strategy)}, {"lambdas", lambdas}};
}

MergeCoefficients MergeCoefficients::from_json(const nlohmann::json& j) {
  json_util::require_keys(j, {"strategy", "lambdas"}, "coefficients");
  MergeCoefficients c;
  std::string s = strategy_name(c.strategy);
  json_util::read_opt(j, "strategy", s, "coefficients");
  c.strategy = parse_strategy(s);
  json_util::read_opt(j, "lambdas", c.lambdas, "coefficients");
  return c;
}

void check_fresh(const LayeredCheckpoint& base, const std::vector<TaskVector>& tvs) {
  const std::string fp = base.backbone_fingerprint();
  for (const auto& tv : tvs) {
    if (tv.base_fingerprint != fp) {
      throw StaleVectorError("task vector '" + tv.task + "' was extracted from base " +
                             tv.base_fingerprint.substr(0, 12) + ", not " + fp.substr(0, 12));
    }
  }
}

namespace {

void check_merge_inputs(const LayeredCheckpoint& base, const std::vector<TaskVector>& tvs,
                        const MergeCoefficients& coeffs) {
  check_fresh(base, tvs);
  coeffs.validate(tvs.size(), base.max_layer());
}

template <typename Combine>
LayeredCheckpoint merge_with(const LayeredCheckpoint& base, const std::vector<TaskVector>& tvs,
                             const MergeCoefficients& coeffs, Combine combine) {
  check_merge_inputs(base, tvs, coeffs);
  LayeredCheckpoint out = base;
  out.set_task("merged");
  std::vector<double> c(tvs.size());
  std::vector<const num::Tensor*> d(tvs.size());
  for (const auto& [name, e] : base.params()) {
    if (e.layer < 0) continue;
    for (std::size_t v = 0; v < tvs.size(); ++v) {
      c[v] = coeffs.at(v, e.layer);
      d[v] = &tvs[v].deltas.at(name).tensor;
    }
    out.set(name, combine(e.tensor, std::span<const double>(c), std::span<const num::Tensor* const>(d)));
  }
  return out;
}

}  // namespace

LayeredCheckpoint merge_layerwise(const LayeredCheckpoint& base, const std::vector<TaskVector>& tvs,
                                  const MergeCoefficients& coeffs) {
  return merge_with(base, tvs, coeffs, [](const auto& b, auto c, auto d) { return k::affine_combine(b, c, d); });
}

LayeredCheckpoint serial::merge_layerwise(const LayeredCheckpoint& base, const std::vector<TaskVector>& tvs,
                                          const MergeCoefficients& coeffs) {
  return merge_with(base, tvs, coeffs,
                    [](const auto& b, auto c, auto d) { return k::serial::affine_combine(b, c, d); });
}

LayeredCheckpoint merge_static_global(const LayeredCheckpoint& base, const std::vector<TaskVector>& tvs,
                                      double lambda) {
  auto coeffs = MergeCoefficients::init(Strategy::StaticGlobal, tvs.size(), base.max_layer(), lambda);
  return merge_layerwise(base, tvs, coeffs);
}

LayeredCheckpoint merge_adaptive_global(const LayeredCheckpoint& base, const std::vector<TaskVector>& tvs,
                                        const MergeCoefficients& coeffs) {
  if (coeffs.strategy == Strategy::AdaptiveLayerwise) {
    throw ValidationError("merge_adaptive_global needs one shared coefficient per vector");
  }
  return merge_layerwise(base, tvs, coeffs);
}

CoefficientVars bind_coefficients(num::Graph& g, const MergeCoefficients& coeffs) {
  CoefficientVars vars;
  for (const auto& row : coeffs.lambdas) {
    auto& out = vars.emplace_back();
    for (double v : row) out.push_back(g.parameter(num::Tensor::scalar(v), coeffs.trainable()));
  }
  return vars;
}

MergeCoefficients read_coefficients(const MergeCoefficients& like, const CoefficientVars& vars) {
  MergeCoefficients c = like;
  for (std::size_t v = 0; v < vars.size(); ++v)
    for (std::size_t i = 0; i < vars[v].size(); ++i) c.lambdas.at(v).at(i) = vars[v][i].value().item();
  return c;
}

num::VarMap merge_on_graph(num::Graph& g, const LayeredCheckpoint& base, const std::vector<TaskVector>& tvs,
                           const MergeCoefficients& coeffs, const CoefficientVars& vars) {
  check_merge_inputs(base, tvs, coeffs);
  num::VarMap out;
  for (const auto& [name, e] : base.params()) {
    if (e.layer < 0) continue;
    num::Var acc = g.constant(e.tensor);
    for (std::size_t v = 0; v < tvs.size(); ++v) {
      const auto& row = vars.at(v);
      const num::Var& lam = row.size() == 1 ? row[0] : row.at(static_cast<std::size_t>(e.layer));
      acc = num::add(acc, num::scale_by(lam, g.constant(tvs[v].deltas.at(name).tensor)));
    }
    out.emplace(name, acc);
  }
  return out;
}

nlohmann::json VectorDiagnostics::to_json() const {
  auto row = [](const LayerDiagnostics& d) {
    return nlohmann::json{{"layer", d.layer}, {"norm_a", d.norm_a}, {"norm_b", d.norm_b}, {"cosine", d.cosine}};
  };
  nlohmann::json j = {{"layers", nlohmann::json::array()}, {"total", row(total)}};
  for (const auto& d : layers) j["layers"].push_back(row(d));
  return j;
}

VectorDiagnostics vector_diagnostics(const TaskVector& a, const TaskVector& b) {
  if (auto why = ckpt::incompatibility(a.deltas, b.deltas)) {
    throw CompatibilityError("task vectors differ: " + *why);
  }
  struct Acc {
    double aa = 0.0, bb = 0.0, ab = 0.0;
  };
  std::map<int, Acc> per_layer;
  Acc total;
  for (const auto& [name, e] : a.deltas) {
    const auto x = e.tensor.data();
    const auto y = b.deltas.at(name).tensor.data();
    Acc& acc = per_layer[e.layer];
    for (std::size_t i = 0; i < x.size(); ++i) {
      acc.aa += x[i] * x[i];
      acc.bb += y[i] * y[i];
      acc.ab += x[i] * y[i];
    }
  }
  auto finish = [](int layer, const Acc& acc) {
    LayerDiagnostics d;
    d.layer = layer;
    d.norm_a = std::sqrt(acc.aa);
    d.norm_b = std::sqrt(acc.bb);
    d.cosine = (d.norm_a == 0.0 || d.norm_b == 0.0) ? 0.0 : acc.ab / (d.norm_a * d.norm_b);
    return d;
  };
  VectorDiagnostics out;
  for (const auto& [layer, acc] : per_layer) {
    out.layers.push_back(finish(layer, acc));
    total.aa += acc.aa;
    total.bb += acc.bb;
    total.ab += acc.ab;
  }
  out.total = finish(-1, total);
  return out;
}

void save_task_vector(const TaskVector& tv, const std::filesystem::path& prefix) {
  ckpt::Archive ar;
  ar.kind = "task_vector";
  ar.tensors = tv.deltas;
  ar.meta = {{"task", tv.task}};
  ar.extra = {{"base_fingerprint", tv.base_fingerprint}};
  ckpt::write_archive(prefix, ar);
}

TaskVector load_task_vector(const std::filesystem::path& prefix) {
  ckpt::Archive ar = ckpt::read_archive(prefix);
  const std::string where = ckpt::archive_paths(prefix).manifest.string();
  if (ar.kind != "task_vector") {
    throw FormatError(where + ": expected kind 'task_vector', found '" + ar.kind + "'");
  }
  if (!ar.extra.contains("base_fingerprint") || !ar.extra["base_fingerprint"].is_string()) {
    throw FormatError(where + ": missing base_fingerprint");
  }
  TaskVector tv;
  tv.deltas = std::move(ar.tensors);
  tv.base_fingerprint = ar.extra["base_fingerprint"].get<std::string>();
  tv.task = ar.meta.value("task", std::string());
  for (const auto& [name, e] : tv.deltas)
    if (e.layer < 0) throw FormatError(where + ": task vector holds head parameter '" + name + "'");
  return tv;
}

}  // namespace tmerge::taskvec
