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
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskmerge/num/tensor.hpp"

namespace tmerge::ckpt {

/// Shape of the encoder and its task heads.
struct ModelConfig {
  int num_layers = 6;
  int model_dim = 64;
  int heads = 4;
  int ffn_dim = 128;
  int input_dim = 20;
  int frontend_kernel = 3;
  int frontend_stride = 1;
  int max_frames = 64;
  int vocab_size = 12;  // token 0 is the blank
  int num_classes = 8;

  /// Throws ValidationError.
  void validate() const;
  nlohmann::json to_json() const;
  /// Strict: unknown keys are a ValidationError; missing keys keep defaults.
  static ModelConfig from_json(const nlohmann::json& j);
  /// SHA-256 of the canonical JSON form.
  std::string hash() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Layer index of head / task-specific parameters; never merged.
inline constexpr int kHeadLayer = -1;

struct ParamSpec {
  std::string name;
  num::Shape shape;
  int layer;
  double init_std = 0.0;   // > 0: N(0, init_std^2)
  double init_fill = 0.0;  // used when init_std == 0
};

/// Backbone parameters: layer 0 is the front-end (conv + positions), 1..L the encoder blocks.
std::vector<ParamSpec> backbone_specs(const ModelConfig& cfg);
/// Weighted-sum aggregation + SER head ("agg.raw", "ser.weight", "ser.bias").
std::vector<ParamSpec> ser_head_specs(const ModelConfig& cfg);
/// Frame-level ASR head ("asr.weight", "asr.bias").
std::vector<ParamSpec> asr_head_specs(const ModelConfig& cfg);

/// Layer index of every parameter name a model built from `cfg` can carry.
std::map<std::string, int> partition_layers(const ModelConfig& cfg);

/// Parameter name for block `layer` (1-based), e.g. block_param(3, "attn.wq").
std::string block_param(int layer, const std::string& leaf);

}  // namespace tmerge::ckpt
