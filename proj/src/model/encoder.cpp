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

#include "taskmerge/model/encoder.hpp"

#include <cmath>

#include "taskmerge/errors.hpp"
#include "taskmerge/num/kernels.hpp"
#include "taskmerge/num/ops.hpp"

namespace tmerge::model {

using ckpt::block_param;
using num::Var;

namespace {

const Var& get(const num::VarMap& w, const std::string& name) {
  auto it = w.find(name);
  if (it == w.end()) throw ValidationError("weights lack parameter '" + name + "'");
  return it->second;
}

Var linear(const Var& x, const Var& weight, const Var& bias) { return num::add_bias(num::matmul(x, weight), bias); }

}  // namespace

num::VarMap bind_params(num::Graph& g, const ckpt::ParamMap& params, bool trainable) {
  num::VarMap out;
  for (const auto& [name, e] : params) out.emplace(name, g.parameter(e.tensor, trainable));
  return out;
}

void check_backbone(const ckpt::ModelConfig& cfg, const num::VarMap& w) {
  for (const auto& spec : ckpt::backbone_specs(cfg)) {
    const Var& v = get(w, spec.name);
    if (v.shape() != spec.shape) {
      throw ShapeError("parameter '" + spec.name + "' is " + num::shape_str(v.shape()) + ", config expects " +
                       num::shape_str(spec.shape));
    }
  }
}

std::size_t frontend_frames(const ckpt::ModelConfig& cfg, std::size_t frames_in) {
  return num::kernels::conv1d_frames(frames_in, static_cast<std::size_t>(cfg.frontend_kernel),
                                     static_cast<std::size_t>(cfg.frontend_stride));
}

Var frontend(const ckpt::ModelConfig& cfg, const Var& features, const num::VarMap& w) {
  if (features.value().rank() != 2 || features.shape()[1] != static_cast<std::size_t>(cfg.input_dim)) {
    throw ShapeError("features must be [frames, " + std::to_string(cfg.input_dim) + "], got " +
                     num::shape_str(features.shape()));
  }
  const std::size_t frames = frontend_frames(cfg, features.shape()[0]);
  if (frames > static_cast<std::size_t>(cfg.max_frames)) {
    throw ShapeError("front-end yields " + std::to_string(frames) + " frames, max_frames is " +
                     std::to_string(cfg.max_frames));
  }
  Var h = num::conv1d(features, get(w, "frontend.conv.weight"), static_cast<std::size_t>(cfg.frontend_stride));
  h = num::add_bias(h, get(w, "frontend.conv.bias"));
  return num::add(h, num::slice(get(w, "frontend.pos"), 0, 0, frames));
}

Var transformer_block(const ckpt::ModelConfig& cfg, const Var& h, const num::VarMap& w, int layer) {
  auto p = [&](const char* leaf) -> const Var& { return get(w, block_param(layer, leaf)); };
  const auto d = static_cast<std::size_t>(cfg.model_dim);
  const auto heads = static_cast<std::size_t>(cfg.heads);
  const std::size_t dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  const Var x = num::layer_norm(h, p("ln1.gamma"), p("ln1.beta"), kLayerNormEps);
  const Var q = linear(x, p("attn.wq"), p("attn.bq"));
  const Var kk = linear(x, p("attn.wk"), p("attn.bk"));
  const Var v = linear(x, p("attn.wv"), p("attn.bv"));
  std::vector<Var> per_head;
  per_head.reserve(heads);
  for (std::size_t i = 0; i < heads; ++i) {
    const Var qh = num::slice(q, 1, i * dh, (i + 1) * dh);
    const Var kh = num::slice(kk, 1, i * dh, (i + 1) * dh);
    const Var vh = num::slice(v, 1, i * dh, (i + 1) * dh);
    const Var scores = num::scale(num::matmul(qh, num::transpose(kh)), inv_sqrt_dh);
    per_head.push_back(num::matmul(num::softmax(scores, 1), vh));
  }
  const Var attn = heads == 1 ? per_head.front() : num::concat(per_head, 1);
  const Var h1 = num::add(h, linear(attn, p("attn.wo"), p("attn.bo")));

  const Var y = num::layer_norm(h1, p("ln2.gamma"), p("ln2.beta"), kLayerNormEps);
  const Var ff = linear(num::gelu(linear(y, p("ffn.w1"), p("ffn.b1"))), p("ffn.w2"), p("ffn.b2"));
  return num::add(h1, ff);
}

HiddenStack encode(const ckpt::ModelConfig& cfg, const Var& features, const num::VarMap& w) {
  HiddenStack stack;
  stack.states.reserve(static_cast<std::size_t>(cfg.num_layers) + 1);
  stack.states.push_back(frontend(cfg, features, w));
  for (int l = 1; l <= cfg.num_layers; ++l) stack.states.push_back(transformer_block(cfg, stack.states.back(), w, l));
  return stack;
}

std::vector<num::Tensor> encode_values(const ckpt::LayeredCheckpoint& weights, const num::Tensor& features) {
  num::Graph g;
  const auto w = bind_params(g, weights.backbone(), false);
  check_backbone(weights.config(), w);
  const auto stack = encode(weights.config(), g.constant(features), w);
  std::vector<num::Tensor> out;
  for (const Var& s : stack.states) out.push_back(s.value());
  return out;
}

}  // namespace tmerge::model
