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

// Synthetic two-task corpus. Each frame is [token dims | prosody dims]:
//
//   token dims    template of the frame's token (blank = 0) blended with the
//                 template of an emotion-specific partner token, weight
//                 conflict / 2
//   prosody dims  class offset plus a slow sinusoid along a neighbouring class
//                 direction, scaled by (1 - conflict / 2)
//
// plus isotropic Gaussian noise. Tokens last 2-4 frames and are separated by
// 1-2 blank frames.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "taskmerge/num/tensor.hpp"

namespace tmerge::synth {

struct SynthConfig {
  int num_train = 400;
  int num_valid = 120;
  int num_test = 200;
  int frames_min = 16;
  int frames_max = 28;
  int input_dim = 20;
  int prosody_dims = 8;
  int vocab_size = 12;  // including blank 0
  int num_classes = 8;
  double conflict = 0.6;
  double domain_shift = 0.0;
  double noise_std = 0.5;
  double template_scale = 1.0;
  double emotion_scale = 0.5;
  double envelope_scale = 0.4;
  double annotator_mix = 0.1;
  std::vector<double> class_prior{0.25, 0.2, 0.15, 0.12, 0.1, 0.08, 0.06, 0.04};
  std::uint64_t seed = 1234;

  int token_dims() const { return input_dim - prosody_dims; }
  /// Throws ValidationError for out-of-range values or impossible layouts.
  void validate() const;
  nlohmann::json to_json() const;
  /// Strict: unknown keys are a ValidationError.
  static SynthConfig from_json(const nlohmann::json& j);
};

struct Utterance {
  num::Tensor features;          // [frames, input_dim]
  std::vector<int> frame_tokens;  // one id per input frame, 0 = blank
  int emotion = 0;
  std::vector<double> soft_label;  // sums to 1

  /// Tokens with blanks removed and runs collapsed.
  std::vector<int> transcript() const;
};

struct Corpus {
  std::vector<Utterance> train, valid, test;
  nlohmann::json config;  // SynthConfig that produced it

  const std::vector<Utterance>& split(const std::string& name) const;
};

/// Distribution parameters derived from the config (no utterance sampling).
struct SynthParams {
  std::vector<std::vector<double>> token_templates;  // [vocab][token_dims]; row 0 = 0
  std::vector<std::vector<int>> emotion_partners;     // [classes][vocab]; blank maps to blank
  std::vector<std::vector<double>> emotion_offsets;  // [classes][prosody_dims]
  std::vector<double> envelope_periods;              // [classes], in frames
  bool emotion_present = true;

  bool operator==(const SynthParams&) const = default;
};

SynthParams synth_params(const SynthConfig& cfg);

/// Pure function of cfg: same config, bit-identical corpus.
Corpus generate_corpus(const SynthConfig& cfg);

struct CorpusStats {
  std::map<std::string, std::vector<int>> class_counts;  // per split
  std::vector<long> token_frames;                        // frames per token id (train)
  std::map<int, int> frames_histogram;                   // input frames -> utterances (train)
  nlohmann::json to_json() const;
};

CorpusStats corpus_stats(const Corpus& corpus, int num_classes, int vocab_size);

void save_corpus(const Corpus& corpus, const std::filesystem::path& prefix);
Corpus load_corpus(const std::filesystem::path& prefix);

}  // namespace tmerge::synth
