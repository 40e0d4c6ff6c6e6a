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

#include "taskmerge/synth/synthdata.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include "taskmerge/checkpoint/archive.hpp"
#include "taskmerge/errors.hpp"
#include "taskmerge/json_util.hpp"
#include "taskmerge/num/rng.hpp"

namespace tmerge::synth {

namespace {

using Matrix = std::vector<std::vector<double>>;

/// `count` orthonormal Gaussian directions in `dims` dimensions, scaled.
Matrix orthonormal_rows(num::Rng& rng, int count, int dims, double scale) {
  Matrix rows;
  while (static_cast<int>(rows.size()) < count) {
    std::vector<double> v(static_cast<std::size_t>(dims));
    for (double& x : v) x = rng.normal();
    for (const auto& r : rows) {
      double dot = 0.0;
      for (int i = 0; i < dims; ++i) dot += v[i] * r[i] / (scale * scale);
      for (int i = 0; i < dims; ++i) v[i] -= dot * r[i];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;
    for (double& x : v) x *= scale / norm;
    rows.push_back(std::move(v));
  }
  return rows;
}

std::string index_name(const std::string& split, std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return split + "/" + buf;
}

Utterance make_utterance(const SynthConfig& cfg, const SynthParams& p, num::Rng rng,
                         const std::vector<double>& cdf) {
  const int frames = cfg.frames_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.frames_max - cfg.frames_min + 1)));
  Utterance u;

  const double draw = rng.uniform();
  u.emotion = static_cast<int>(cdf.size()) - 1;
  for (std::size_t c = 0; c < cdf.size(); ++c) {
    if (draw < cdf[c]) {
      u.emotion = static_cast<int>(c);
      break;
    }
  }
  const int c = u.emotion;
  const int neighbour = (c + 1) % cfg.num_classes;

  u.frame_tokens.assign(static_cast<std::size_t>(frames), 0);
  int t = static_cast<int>(rng.below(2));
  while (t < frames) {
    const int token = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.vocab_size - 1)));
    const int dur = 2 + static_cast<int>(rng.below(3));
    for (int k = 0; k < dur && t < frames; ++k, ++t) u.frame_tokens[static_cast<std::size_t>(t)] = token;
    t += 1 + static_cast<int>(rng.below(2));
  }

  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double prosody_gain = 1.0 - 0.5 * cfg.conflict;
  const double mix = 0.5 * cfg.conflict;
  const int td = cfg.token_dims();
  std::vector<double> x(static_cast<std::size_t>(frames * cfg.input_dim), 0.0);
  for (int f = 0; f < frames; ++f) {
    double* row = x.data() + static_cast<std::size_t>(f * cfg.input_dim);
    const auto token = static_cast<std::size_t>(u.frame_tokens[static_cast<std::size_t>(f)]);
    const auto& tmpl = p.token_templates[token];
    const auto& ghost = p.token_templates[static_cast<std::size_t>(p.emotion_partners[c][token])];
    for (int i = 0; i < td; ++i) row[i] = (1.0 - mix) * tmpl[i] + mix * ghost[i];
    if (p.emotion_present) {
      const double env = cfg.envelope_scale * std::sin(2.0 * std::numbers::pi * f / p.envelope_periods[c] + phase);
      for (int i = 0; i < cfg.prosody_dims; ++i) {
        row[td + i] = prosody_gain * (p.emotion_offsets[c][i] + env * p.emotion_offsets[neighbour][i]);
      }
    }
    for (int i = 0; i < cfg.input_dim; ++i) row[i] += cfg.noise_std * rng.normal();
  }
  u.features = num::Tensor({static_cast<std::size_t>(frames), static_cast<std::size_t>(cfg.input_dim)}, std::move(x));

  u.soft_label.assign(static_cast<std::size_t>(cfg.num_classes), 0.0);
  u.soft_label[static_cast<std::size_t>(c)] += 1.0 - cfg.annotator_mix;
  u.soft_label[static_cast<std::size_t>(neighbour)] += cfg.annotator_mix;
  return u;
}

}  // namespace

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("synth." + m); };
  if (num_train < 1 || num_valid < 1 || num_test < 1) fail("num_train/num_valid/num_test must be >= 1");
  if (frames_min < 1 || frames_max < frames_min) fail("frames range must satisfy 1 <= frames_min <= frames_max");
  if (prosody_dims < 1 || input_dim <= prosody_dims) fail("input_dim must exceed prosody_dims >= 1");
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (vocab_size - 1 > token_dims()) {
    fail("vocab_size - 1 = " + std::to_string(vocab_size - 1) + " token templates do not fit in " +
         std::to_string(token_dims()) + " token dimensions");
  }
  if (num_classes > prosody_dims) {
    fail("num_classes = " + std::to_string(num_classes) + " emotion offsets do not fit in " +
         std::to_string(prosody_dims) + " prosody dimensions");
  }
  if (!(conflict >= 0.0 && conflict <= 1.0)) fail("conflict must lie in [0, 1]");
  if (!(domain_shift >= 0.0)) fail("domain_shift must be >= 0");
  if (!(noise_std >= 0.0)) fail("noise_std must be >= 0");
  if (!(template_scale > 0.0) || !(emotion_scale >= 0.0) || !(envelope_scale >= 0.0)) fail("scales must be >= 0");
  if (!(annotator_mix >= 0.0 && annotator_mix <= 1.0)) fail("annotator_mix must lie in [0, 1]");
  if (class_prior.size() != static_cast<std::size_t>(num_classes)) {
    fail("class_prior needs " + std::to_string(num_classes) + " entries");
  }
  double total = 0.0;
  for (double p : class_prior) {
    if (!(p >= 0.0)) fail("class_prior entries must be >= 0");
    total += p;
  }
  if (!(total > 0.0)) fail("class_prior must have positive mass");
}

nlohmann::json SynthConfig::to_json() const {
  return {{"num_train", num_train},       {"num_valid", num_valid},         {"num_test", num_test},
          {"frames_min", frames_min},     {"frames_max", frames_max},       {"input_dim", input_dim},
          {"prosody_dims", prosody_dims}, {"vocab_size", vocab_size},       {"num_classes", num_classes},
          {"conflict", conflict},         {"domain_shift", domain_shift},   {"noise_std", noise_std},
          {"template_scale", template_scale}, {"emotion_scale", emotion_scale},
          {"envelope_scale", envelope_scale}, {"annotator_mix", annotator_mix},
          {"class_prior", class_prior},   {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  const std::string ctx = "synth";
  json_util::require_keys(j,
                          {"num_train", "num_valid", "num_test", "frames_min", "frames_max", "input_dim",
                           "prosody_dims", "vocab_size", "num_classes", "conflict", "domain_shift", "noise_std",
                           "template_scale", "emotion_scale", "envelope_scale", "annotator_mix", "class_prior",
                           "seed"},
                          ctx);
  SynthConfig c;
  json_util::read_opt(j, "num_train", c.num_train, ctx);
  json_util::read_opt(j, "num_valid", c.num_valid, ctx);
  json_util::read_opt(j, "num_test", c.num_test, ctx);
  json_util::read_opt(j, "frames_min", c.frames_min, ctx);
  json_util::read_opt(j, "frames_max", c.frames_max, ctx);
  json_util::read_opt(j, "input_dim", c.input_dim, ctx);
  json_util::read_opt(j, "prosody_dims", c.prosody_dims, ctx);
  json_util::read_opt(j, "vocab_size", c.vocab_size, ctx);
  json_util::read_opt(j, "num_classes", c.num_classes, ctx);
  json_util::read_opt(j, "conflict", c.conflict, ctx);
  json_util::read_opt(j, "domain_shift", c.domain_shift, ctx);
  json_util::read_opt(j, "noise_std", c.noise_std, ctx);
  json_util::read_opt(j, "template_scale", c.template_scale, ctx);
  json_util::read_opt(j, "emotion_scale", c.emotion_scale, ctx);
  json_util::read_opt(j, "envelope_scale", c.envelope_scale, ctx);
  json_util::read_opt(j, "annotator_mix", c.annotator_mix, ctx);
  json_util::read_opt(j, "class_prior", c.class_prior, ctx);
  json_util::read_opt(j, "seed", c.seed, ctx);
  c.validate();
  return c;
}

std::vector<int> Utterance::transcript() const {
  std::vector<int> out;
  int prev = -1;
  for (int id : frame_tokens) {
    if (id != prev && id != 0) out.push_back(id);
    prev = id;
  }
  return out;
}

const std::vector<Utterance>& Corpus::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "valid") return valid;
  if (name == "test") return test;
  throw ValidationError("unknown split '" + name + "' (expected train, valid or test)");
}

SynthParams synth_params(const SynthConfig& cfg) {
  cfg.validate();
  const num::Rng root(cfg.seed, num::Rng::hash_label("synth-params"));
  SynthParams p;
  num::Rng tr = root.fork("templates");
  p.token_templates = orthonormal_rows(tr, cfg.vocab_size - 1, cfg.token_dims(), cfg.template_scale);
  p.token_templates.insert(p.token_templates.begin(), std::vector<double>(static_cast<std::size_t>(cfg.token_dims()), 0.0));

  // Sattolo shuffle: a single cycle over the non-blank tokens (no fixed points once vocab_size >= 3).
  num::Rng mr = root.fork("partners");
  p.emotion_partners.assign(static_cast<std::size_t>(cfg.num_classes), {});
  for (auto& m : p.emotion_partners) {
    m.resize(static_cast<std::size_t>(cfg.vocab_size));
    std::iota(m.begin(), m.end(), 0);
    for (std::size_t i = m.size() - 1; i > 1; --i) std::swap(m[i], m[1 + mr.below(i - 1)]);
  }

  num::Rng orr = root.fork("offsets");
  p.emotion_offsets = orthonormal_rows(orr, cfg.num_classes, cfg.prosody_dims, cfg.emotion_scale > 0 ? cfg.emotion_scale : 1.0);
  if (cfg.emotion_scale == 0.0)
    for (auto& o : p.emotion_offsets) std::fill(o.begin(), o.end(), 0.0);

  num::Rng pr = root.fork("periods");
  for (int c = 0; c < cfg.num_classes; ++c) p.envelope_periods.push_back(pr.uniform(6.0, 24.0));

  if (cfg.domain_shift > 0.0) {
    num::Rng sr = root.fork("shift");
    for (std::size_t v = 1; v < p.token_templates.size(); ++v)
      for (double& x : p.token_templates[v]) x += cfg.domain_shift * cfg.template_scale * sr.normal() / std::sqrt(cfg.token_dims());
    p.emotion_present = false;
  }
  return p;
}

Corpus generate_corpus(const SynthConfig& cfg) {
  const SynthParams p = synth_params(cfg);
  std::vector<double> cdf(cfg.class_prior.size());
  std::partial_sum(cfg.class_prior.begin(), cfg.class_prior.end(), cdf.begin());
  for (double& v : cdf) v /= cdf.back();

  Corpus corpus;
  corpus.config = cfg.to_json();
  auto fill = [&](const std::string& split, int count, std::vector<Utterance>& out) {
    const num::Rng split_rng(cfg.seed, num::Rng::hash_label("utterances/" + split));
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) out.push_back(make_utterance(cfg, p, split_rng.fork(static_cast<std::uint64_t>(i)), cdf));
  };
  fill("train", cfg.num_train, corpus.train);
  fill("valid", cfg.num_valid, corpus.valid);
  fill("test", cfg.num_test, corpus.test);
  return corpus;
}

nlohmann::json CorpusStats::to_json() const {
  nlohmann::json hist = nlohmann::json::object();
  for (const auto& [frames, n] : frames_histogram) hist[std::to_string(frames)] = n;
  return {{"class_counts", class_counts}, {"token_frames", token_frames}, {"frames_histogram", hist}};
}

CorpusStats corpus_stats(const Corpus& corpus, int num_classes, int vocab_size) {
  CorpusStats s;
  for (const char* name : {"train", "valid", "test"}) {
    auto& counts = s.class_counts[name];
    counts.assign(static_cast<std::size_t>(num_classes), 0);
    for (const auto& u : corpus.split(name)) counts.at(static_cast<std::size_t>(u.emotion)) += 1;
  }
  s.token_frames.assign(static_cast<std::size_t>(vocab_size), 0);
  for (const auto& u : corpus.train) {
    for (int id : u.frame_tokens) s.token_frames.at(static_cast<std::size_t>(id)) += 1;
    s.frames_histogram[static_cast<int>(u.frame_tokens.size())] += 1;
  }
  return s;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& prefix) {
  ckpt::Archive ar;
  ar.kind = "corpus";
  nlohmann::json labels = nlohmann::json::object();
  for (const char* name : {"train", "valid", "test"}) {
    auto& arr = labels[name] = nlohmann::json::array();
    const auto& split = corpus.split(name);
    for (std::size_t i = 0; i < split.size(); ++i) {
      const auto& u = split[i];
      ar.tensors.emplace(index_name(name, i), ckpt::ParamEntry{u.features, 0});
      arr.push_back({{"emotion", u.emotion}, {"soft_label", u.soft_label}, {"frame_tokens", u.frame_tokens}});
    }
  }
  ar.meta = {{"task", "corpus"}};
  ar.extra = {{"synth_config", corpus.config}, {"labels", std::move(labels)}};
  ckpt::write_archive(prefix, ar);
}

Corpus load_corpus(const std::filesystem::path& prefix) {
  ckpt::Archive ar = ckpt::read_archive(prefix);
  const std::string where = ckpt::archive_paths(prefix).manifest.string();
  if (ar.kind != "corpus") throw FormatError(where + ": expected kind 'corpus', found '" + ar.kind + "'");
  Corpus corpus;
  try {
    corpus.config = ar.extra.at("synth_config");
    const auto& labels = ar.extra.at("labels");
    for (const char* name : {"train", "valid", "test"}) {
      auto& out = std::string(name) == "train" ? corpus.train : std::string(name) == "valid" ? corpus.valid : corpus.test;
      const auto& arr = labels.at(name);
      for (std::size_t i = 0; i < arr.size(); ++i) {
        Utterance u;
        auto it = ar.tensors.find(index_name(name, i));
        if (it == ar.tensors.end()) throw FormatError(where + ": missing features for " + index_name(name, i));
        u.features = it->second.tensor;
        u.emotion = arr[i].at("emotion").get<int>();
        u.soft_label = arr[i].at("soft_label").get<std::vector<double>>();
        u.frame_tokens = arr[i].at("frame_tokens").get<std::vector<int>>();
        if (u.features.rank() != 2 || u.frame_tokens.size() != u.features.dim(0)) {
          throw FormatError(where + ": labels of " + index_name(name, i) + " do not match its frames");
        }
        out.push_back(std::move(u));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": malformed corpus labels: " + e.what());
  }
  return corpus;
}

}  // namespace tmerge::synth
