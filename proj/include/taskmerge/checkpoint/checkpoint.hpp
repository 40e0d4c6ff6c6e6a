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
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "taskmerge/checkpoint/model_config.hpp"
#include "taskmerge/num/tensor.hpp"

namespace tmerge::ckpt {

struct ParamEntry {
  num::Tensor tensor;
  int layer = kHeadLayer;
};

using ParamMap = std::map<std::string, ParamEntry>;

/// SHA-256 over names, shapes, layer indices and raw f64 bytes, in name order.
std::string fingerprint(const ParamMap& params);

/// Named parameter tensors with their layer partition.
///
/// Layer 0 is the front-end, 1..L the encoder blocks and kHeadLayer the
/// task-specific group that merging leaves alone.
class LayeredCheckpoint {
 public:
  LayeredCheckpoint() = default;
  LayeredCheckpoint(ModelConfig config, std::string task);

  /// Insert or replace. Replacing keeps the name's layer and must keep its shape.
  void set(const std::string& name, num::Tensor tensor, int layer);
  void set(const std::string& name, num::Tensor tensor);
  void erase(const std::string& name) { params_.erase(name); }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const num::Tensor& tensor(const std::string& name) const;
  int layer(const std::string& name) const;
  const ParamMap& params() const { return params_; }
  std::size_t size() const { return params_.size(); }

  const ModelConfig& config() const { return config_; }
  const std::string& task() const { return task_; }
  void set_task(std::string task) { task_ = std::move(task); }

  /// Highest layer index present (L).
  int max_layer() const;
  /// Backbone (layer >= 0) entries only.
  ParamMap backbone() const;
  ParamMap head() const;

  std::string fingerprint() const { return ckpt::fingerprint(params_); }
  std::string backbone_fingerprint() const { return ckpt::fingerprint(backbone()); }
  std::string head_fingerprint() const { return ckpt::fingerprint(head()); }

 private:
  ModelConfig config_;
  std::string task_;
  ParamMap params_;
};

/// First difference in names, shapes or layer maps, or nullopt when the two
/// are merge-compatible. With backbone_only, head entries are ignored.
std::optional<std::string> incompatibility(const ParamMap& a, const ParamMap& b);
bool merge_compatible(const LayeredCheckpoint& a, const LayeredCheckpoint& b);

enum class Dtype { F64, F32 };

/// `<prefix>.manifest.json` + `<prefix>.bin`.
struct ArchivePaths {
  std::filesystem::path manifest;
  std::filesystem::path blob;
};
ArchivePaths archive_paths(const std::filesystem::path& prefix);

void save_checkpoint(const LayeredCheckpoint& ckpt, const std::filesystem::path& prefix,
                     Dtype dtype = Dtype::F64);
LayeredCheckpoint load_checkpoint(const std::filesystem::path& prefix);

/// Fresh backbone parameters for `cfg`, seeded per parameter name.
LayeredCheckpoint init_backbone(const ModelConfig& cfg, std::uint64_t seed);
/// Fresh tensors for the given specs (heads), seeded per parameter name.
ParamMap init_params(const std::vector<ParamSpec>& specs, const ModelConfig& cfg, std::uint64_t seed);

}  // namespace tmerge::ckpt
