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

#include <vector>

#include "taskmerge/model/encoder.hpp"
#include "taskmerge/num/graph.hpp"

namespace tmerge::model {

/// softmax(raw) over the L encoder layers.
num::Var aggregation_weights(const num::Var& raw);
std::vector<double> aggregation_weights(const num::Tensor& raw);

/// sum_{l=1..L} softmax(raw)_l * H^(l); H^(0) does not take part.
/// Throws ShapeError when raw does not hold exactly L entries.
num::Var weighted_sum(const HiddenStack& stack, const num::Var& raw);

/// Mean over frames then linear: [frames, d] -> [1, num_classes].
num::Var ser_forward(const num::Var& h_out, const num::VarMap& w);
/// Per-frame linear: [frames, d] -> [frames, vocab].
num::Var asr_forward(const num::Var& h_last, const num::VarMap& w);

/// Per-frame argmax (ties to the lowest id), repeats collapsed, blanks (0) dropped.
std::vector<int> greedy_decode(const num::Tensor& frame_logits);
/// Collapse step alone, on already-chosen frame ids.
std::vector<int> collapse_frames(const std::vector<int>& frame_ids);
/// Row-wise argmax, ties to the lowest index.
std::vector<int> argmax_rows(const num::Tensor& logits);

}  // namespace tmerge::model
