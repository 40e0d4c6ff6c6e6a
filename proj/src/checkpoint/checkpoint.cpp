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

#include "taskmerge/checkpoint/checkpoint.hpp"

#include <algorithm>

#include "taskmerge/checkpoint/archive.hpp"
#include "taskmerge/checkpoint/sha256.hpp"
#include "taskmerge/errors.hpp"
#include "taskmerge/num/rng.hpp"

namespace tmerge::ckpt {

std::string fingerprint(const ParamMap& params) {
  Sha256 h;
  h.update_u64(params.size());
  for (const auto& [name, entry] : params) {
    h.update_u64(name.size());
    h.update(name);
    h.update_u64(static_cast<std::uint64_t>(static_cast<std::int64_t>(entry.layer)));
    h.update_u64(entry.tensor.rank());
    for (std::size_t d : entry.tensor.shape()) h.update_u64(d);
    for (double v : entry.tensor.data()) h.update_f64(v);
  }
  return h.hex_digest();
}

LayeredCheckpoint::LayeredCheckpoint(ModelConfig config, std::string task)
    : config_(std::move(config)), task_(std::move(task)) {}

void LayeredCheckpoint::set(const std::string& name, num::Tensor tensor, int layer) {
  if (layer < kHeadLayer) throw ValidationError("parameter '" + name + "' has invalid layer index");
  auto it = params_.find(name);
  if (it != params_.end() && it->second.layer != layer) {
    throw ValidationError("parameter '" + name + "' already assigned to layer " + std::to_string(it->second.layer));
  }
  params_[name] = ParamEntry{std::move(tensor), layer};
}

void LayeredCheckpoint::set(const std::string& name, num::Tensor tensor) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  if (it->second.tensor.shape() != tensor.shape()) {
    throw ShapeError("parameter '" + name + "' is " + num::shape_str(it->second.tensor.shape()) +
                     ", replacement is " + num::shape_str(tensor.shape()));
  }
  it->second.tensor = std::move(tensor);
}

const num::Tensor& LayeredCheckpoint::tensor(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("checkpoint has no parameter '" + name + "'");
  return it->second.tensor;
}

int LayeredCheckpoint::layer(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("checkpoint has no parameter '" + name + "'");
  return it->second.layer;
}

int LayeredCheckpoint::max_layer() const {
  int m = kHeadLayer;
  for (const auto& [_, e] : params_) m = std::max(m, e.layer);
  return m;
}

ParamMap LayeredCheckpoint::backbone() const {
  ParamMap out;
  for (const auto& [name, e] : params_)
    if (e.layer >= 0) out.emplace(name, e);
  return out;
}

ParamMap LayeredCheckpoint::head() const {
  ParamMap out;
  for (const auto& [name, e] : params_)
    if (e.layer < 0) out.emplace(name, e);
  return out;
}

std::optional<std::string> incompatibility(const ParamMap& a, const ParamMap& b) {
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() || ib != b.end()) {
    if (ib == b.end() || (ia != a.end() && ia->first < ib->first)) {
      return "parameter '" + ia->first + "' missing from the second checkpoint";
    }
    if (ia == a.end() || ib->first < ia->first) {
      return "parameter '" + ib->first + "' missing from the first checkpoint";
    }
    if (ia->second.tensor.shape() != ib->second.tensor.shape()) {
      return "parameter '" + ia->first + "' shape " + num::shape_str(ia->second.tensor.shape()) + " vs " +
             num::shape_str(ib->second.tensor.shape());
    }
    if (ia->second.layer != ib->second.layer) {
      return "parameter '" + ia->first + "' layer " + std::to_string(ia->second.layer) + " vs " +
             std::to_string(ib->second.layer);
    }
    ++ia;
    ++ib;
  }
  return std::nullopt;
}

bool merge_compatible(const LayeredCheckpoint& a, const LayeredCheckpoint& b) {
  return !incompatibility(a.params(), b.params()).has_value();
}

ArchivePaths archive_paths(const std::filesystem::path& prefix) {
  return {std::filesystem::path(prefix.string() + ".manifest.json"), std::filesystem::path(prefix.string() + ".bin")};
}

void save_checkpoint(const LayeredCheckpoint& ckpt, const std::filesystem::path& prefix, Dtype dtype) {
  Archive ar;
  ar.kind = "checkpoint";
  ar.dtype = dtype;
  ar.tensors = ckpt.params();
  ar.meta = {{"task", ckpt.task()}, {"config_hash", ckpt.config().hash()}, {"config", ckpt.config().to_json()}};
  write_archive(prefix, ar);
}

LayeredCheckpoint load_checkpoint(const std::filesystem::path& prefix) {
  Archive ar = read_archive(prefix);
  if (ar.kind != "checkpoint") {
    throw FormatError(archive_paths(prefix).manifest.string() + ": expected kind 'checkpoint', found '" + ar.kind + "'");
  }
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(ar.meta.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(archive_paths(prefix).manifest.string() + ": bad meta.config: " + e.what());
  }
  if (ar.meta.value("config_hash", std::string()) != cfg.hash()) {
    throw CorruptionError(archive_paths(prefix).manifest.string() + ": config_hash does not match meta.config");
  }
  LayeredCheckpoint ckpt(cfg, ar.meta.value("task", std::string()));
  for (auto& [name, e] : ar.tensors) ckpt.set(name, e.tensor, e.layer);
  return ckpt;
}

ParamMap init_params(const std::vector<ParamSpec>& specs, const ModelConfig&, std::uint64_t seed) {
  ParamMap out;
  const num::Rng root(seed, num::Rng::hash_label("init"));
  for (const auto& s : specs) {
    std::vector<double> v(num::shape_numel(s.shape), s.init_fill);
    if (s.init_std > 0.0) {
      num::Rng rng = root.fork(s.name);
      for (double& x : v) x = s.init_std * rng.normal();
    }
    out.emplace(s.name, ParamEntry{num::Tensor(s.shape, std::move(v)), s.layer});
  }
  return out;
}

LayeredCheckpoint init_backbone(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  LayeredCheckpoint ckpt(cfg, "base");
  for (auto& [name, e] : init_params(backbone_specs(cfg), cfg, seed)) ckpt.set(name, e.tensor, e.layer);
  return ckpt;
}

}  // namespace tmerge::ckpt
