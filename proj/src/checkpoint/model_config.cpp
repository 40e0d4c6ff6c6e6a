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

#include "taskmerge/checkpoint/model_config.hpp"

#include <cmath>

#include "taskmerge/checkpoint/sha256.hpp"
#include "taskmerge/errors.hpp"
#include "taskmerge/json_util.hpp"

namespace tmerge::ckpt {

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw ValidationError(std::string("model.") + what + " must be >= 1");
  };
  positive(num_layers, "num_layers");
  positive(model_dim, "model_dim");
  positive(heads, "heads");
  positive(ffn_dim, "ffn_dim");
  positive(input_dim, "input_dim");
  positive(frontend_kernel, "frontend_kernel");
  positive(frontend_stride, "frontend_stride");
  positive(max_frames, "max_frames");
  positive(num_classes, "num_classes");
  if (model_dim % heads != 0) throw ValidationError("model.model_dim must be divisible by model.heads");
  if (vocab_size < 2) throw ValidationError("model.vocab_size must be >= 2 (blank + one token)");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"num_layers", num_layers},   {"model_dim", model_dim},         {"heads", heads},
          {"ffn_dim", ffn_dim},         {"input_dim", input_dim},         {"frontend_kernel", frontend_kernel},
          {"frontend_stride", frontend_stride}, {"max_frames", max_frames}, {"vocab_size", vocab_size},
          {"num_classes", num_classes}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  const std::string ctx = "model";
  json_util::require_keys(j,
                          {"num_layers", "model_dim", "heads", "ffn_dim", "input_dim", "frontend_kernel",
                           "frontend_stride", "max_frames", "vocab_size", "num_classes"},
                          ctx);
  ModelConfig c;
  json_util::read_opt(j, "num_layers", c.num_layers, ctx);
  json_util::read_opt(j, "model_dim", c.model_dim, ctx);
  json_util::read_opt(j, "heads", c.heads, ctx);
  json_util::read_opt(j, "ffn_dim", c.ffn_dim, ctx);
  json_util::read_opt(j, "input_dim", c.input_dim, ctx);
  json_util::read_opt(j, "frontend_kernel", c.frontend_kernel, ctx);
  json_util::read_opt(j, "frontend_stride", c.frontend_stride, ctx);
  json_util::read_opt(j, "max_frames", c.max_frames, ctx);
  json_util::read_opt(j, "vocab_size", c.vocab_size, ctx);
  json_util::read_opt(j, "num_classes", c.num_classes, ctx);
  c.validate();
  return c;
}

std::string ModelConfig::hash() const { return sha256_hex(to_json().dump()); }

std::string block_param(int layer, const std::string& leaf) {
  return "blocks." + std::to_string(layer) + "." + leaf;
}

std::vector<ParamSpec> backbone_specs(const ModelConfig& cfg) {
  const auto d = static_cast<std::size_t>(cfg.model_dim);
  const auto f = static_cast<std::size_t>(cfg.ffn_dim);
  const auto k = static_cast<std::size_t>(cfg.frontend_kernel);
  const auto in = static_cast<std::size_t>(cfg.input_dim);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_scale = 1.0 / std::sqrt(2.0 * cfg.num_layers);

  std::vector<ParamSpec> specs{
      {"frontend.conv.weight", {k, in, d}, 0, 1.0 / std::sqrt(static_cast<double>(k * in))},
      {"frontend.conv.bias", {d}, 0},
      {"frontend.pos", {static_cast<std::size_t>(cfg.max_frames), d}, 0, 0.1},
  };
  for (int l = 1; l <= cfg.num_layers; ++l) {
    auto add = [&](const std::string& leaf, num::Shape shape, double std_dev, double fill = 0.0) {
      specs.push_back({block_param(l, leaf), std::move(shape), l, std_dev, fill});
    };
    add("ln1.gamma", {d}, 0.0, 1.0);
    add("ln1.beta", {d}, 0.0);
    add("attn.wq", {d, d}, sd);
    add("attn.bq", {d}, 0.0);
    add("attn.wk", {d, d}, sd);
    add("attn.bk", {d}, 0.0);
    add("attn.wv", {d, d}, sd);
    add("attn.bv", {d}, 0.0);
    add("attn.wo", {d, d}, sd * out_scale);
    add("attn.bo", {d}, 0.0);
    add("ln2.gamma", {d}, 0.0, 1.0);
    add("ln2.beta", {d}, 0.0);
    add("ffn.w1", {d, f}, sd);
    add("ffn.b1", {f}, 0.0);
    add("ffn.w2", {f, d}, out_scale / std::sqrt(static_cast<double>(f)));
    add("ffn.b2", {d}, 0.0);
  }
  return specs;
}

std::vector<ParamSpec> ser_head_specs(const ModelConfig& cfg) {
  const auto d = static_cast<std::size_t>(cfg.model_dim);
  const auto c = static_cast<std::size_t>(cfg.num_classes);
  return {
      {"agg.raw", {static_cast<std::size_t>(cfg.num_layers)}, kHeadLayer},
      {"ser.weight", {d, c}, kHeadLayer, 0.1 / std::sqrt(static_cast<double>(d))},
      {"ser.bias", {c}, kHeadLayer},
  };
}

std::vector<ParamSpec> asr_head_specs(const ModelConfig& cfg) {
  const auto d = static_cast<std::size_t>(cfg.model_dim);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  return {
      {"asr.weight", {d, v}, kHeadLayer, 0.1 / std::sqrt(static_cast<double>(d))},
      {"asr.bias", {v}, kHeadLayer},
  };
}

std::map<std::string, int> partition_layers(const ModelConfig& cfg) {
  std::map<std::string, int> out;
  for (const auto& group : {backbone_specs(cfg), ser_head_specs(cfg), asr_head_specs(cfg)})
    for (const auto& s : group) out.emplace(s.name, s.layer);
  return out;
}

}  // namespace tmerge::ckpt
