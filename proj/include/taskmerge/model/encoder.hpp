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

// Front-end (1-D conv + learned positions) followed by L pre-norm transformer
// blocks. One utterance per call; a batch shares the bound weight leaves.

#include <cstddef>
#include <vector>

#include "taskmerge/checkpoint/checkpoint.hpp"
#include "taskmerge/num/graph.hpp"

namespace tmerge::model {

inline constexpr double kLayerNormEps = 1e-5;

/// H^(0)..H^(L) of one utterance, each [frames, d].
struct HiddenStack {
  std::vector<num::Var> states;

  std::size_t num_layers() const { return states.empty() ? 0 : states.size() - 1; }
  std::size_t frames() const { return states.empty() ? 0 : states.front().shape()[0]; }
};

/// Every entry of `params` as a graph leaf.
num::VarMap bind_params(num::Graph& g, const ckpt::ParamMap& params, bool trainable);

/// Checks that `w` holds every backbone tensor of `cfg` with the right shape.
void check_backbone(const ckpt::ModelConfig& cfg, const num::VarMap& w);

/// Output frames of the front-end for `frames_in` input frames.
std::size_t frontend_frames(const ckpt::ModelConfig& cfg, std::size_t frames_in);

/// features[frames_in, input_dim] -> [frames, d]. Throws ShapeError for
/// sequences shorter than the kernel or longer than max_frames after the conv.
num::Var frontend(const ckpt::ModelConfig& cfg, const num::Var& features, const num::VarMap& w);

/// One pre-norm block (1-based `layer`): bidirectional multi-head attention
/// and a GELU FFN, each behind a residual connection.
num::Var transformer_block(const ckpt::ModelConfig& cfg, const num::Var& h, const num::VarMap& w, int layer);

HiddenStack encode(const ckpt::ModelConfig& cfg, const num::Var& features, const num::VarMap& w);

/// Convenience: constant-weight forward of a checkpoint on one utterance.
std::vector<num::Tensor> encode_values(const ckpt::LayeredCheckpoint& weights, const num::Tensor& features);

}  // namespace tmerge::model
