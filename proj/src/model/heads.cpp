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

#include "taskmerge/model/heads.hpp"

#include "taskmerge/errors.hpp"
#include "taskmerge/num/kernels.hpp"
#include "taskmerge/num/ops.hpp"

namespace tmerge::model {

using num::Var;

namespace {

const Var& get(const num::VarMap& w, const std::string& name) {
  auto it = w.find(name);
  if (it == w.end()) throw ValidationError("weights lack head parameter '" + name + "'");
  return it->second;
}

}  // namespace

Var aggregation_weights(const Var& raw) { return num::softmax(raw, 0); }

std::vector<double> aggregation_weights(const num::Tensor& raw) {
  return num::kernels::softmax(raw, 0).to_vector();
}

Var weighted_sum(const HiddenStack& stack, const Var& raw) {
  const std::size_t layers = stack.num_layers();
  if (raw.value().rank() != 1 || raw.shape()[0] != layers || layers == 0) {
    throw ShapeError("aggregation weights " + num::shape_str(raw.shape()) + " do not match " +
                     std::to_string(layers) + " encoder layers");
  }
  const Var alpha = aggregation_weights(raw);
  Var out;
  for (std::size_t l = 1; l <= layers; ++l) {
    const Var term = num::scale_by(num::slice(alpha, 0, l - 1, l), stack.states[l]);
    out = out.valid() ? num::add(out, term) : term;
  }
  return out;
}

Var ser_forward(const Var& h_out, const num::VarMap& w) {
  if (h_out.value().rank() != 2 || h_out.shape()[0] == 0) {
    throw ShapeError("ser_forward needs [frames >= 1, d], got " + num::shape_str(h_out.shape()));
  }
  return num::add_bias(num::matmul(num::mean_rows(h_out), get(w, "ser.weight")), get(w, "ser.bias"));
}

Var asr_forward(const Var& h_last, const num::VarMap& w) {
  return num::add_bias(num::matmul(h_last, get(w, "asr.weight")), get(w, "asr.bias"));
}

std::vector<int> argmax_rows(const num::Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows needs a matrix, got " + num::shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  const auto x = logits.data();
  std::vector<int> out(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (x[r * cols + c] > x[r * cols + best]) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> collapse_frames(const std::vector<int>& frame_ids) {
  std::vector<int> out;
  int prev = -1;
  for (int id : frame_ids) {
    if (id != prev && id != 0) out.push_back(id);
    prev = id;
  }
  return out;
}

std::vector<int> greedy_decode(const num::Tensor& frame_logits) {
  if (frame_logits.rank() != 2 || frame_logits.dim(1) < 2) {
    throw ShapeError("greedy_decode needs [frames, vocab >= 2], got " + num::shape_str(frame_logits.shape()));
  }
  return collapse_frames(argmax_rows(frame_logits));
}

}  // namespace tmerge::model
