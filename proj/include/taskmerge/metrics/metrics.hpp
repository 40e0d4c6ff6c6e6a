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
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

namespace tmerge::metrics {

/// Rows are reference classes, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 0);

  void add(int reference, int predicted, long count = 1);
  long at(int reference, int predicted) const;
  int num_classes() const { return n_; }
  long total() const;
  long support(int c) const;    // row sum
  long predicted(int c) const;  // column sum

  nlohmann::json to_json() const;

 private:
  int n_;
  std::vector<long> counts_;
};

/// Mean recall over classes with support. ValidationError on an empty matrix.
double uar(const ConfusionMatrix& cm);
/// Unweighted means over classes that occur in the references or the
/// predictions; a zero denominator counts as 0. Empty matrix gives 0.
double precision_macro(const ConfusionMatrix& cm);
double macro_f1(const ConfusionMatrix& cm);

/// Unit-cost edit distance.
std::size_t levenshtein(const std::vector<int>& a, const std::vector<int>& b);
/// levenshtein / max(1, |ref|).
double token_error_rate(const std::vector<int>& hyp, const std::vector<int>& ref);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Metric of a resample given as indices into the record list.
using ResampleMetric = std::function<double(const std::vector<std::size_t>& indices)>;

/// Percentile interval over `n_resamples` resamples with replacement of n
/// records; endpoint k is the ceil(q * R)-th order statistic. Resample r draws
/// from its own seed-derived stream, so the result is independent of threads.
Interval bootstrap_ci(std::size_t n, const ResampleMetric& metric, int n_resamples = 1000, double level = 0.95,
                      std::uint64_t seed = 0);

/// Per-utterance outcome; token fields stay empty when the model has no ASR head.
struct UtteranceResult {
  int emotion = 0;
  int predicted = 0;
  std::vector<int> ref_tokens;
  std::vector<int> hyp_tokens;
};

struct MetricValue {
  double point = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
};

struct EvalReport {
  std::map<std::string, MetricValue> metrics;  // uar, precision, macro_f1[, token_error_rate]
  ConfusionMatrix confusion;
  nlohmann::json to_json() const;
};

struct BootstrapConfig {
  int n_resamples = 1000;
  double level = 0.95;
  std::uint64_t seed = 0;
};

/// Point values only (no resampling), same keys as EvalReport::metrics.
std::map<std::string, double> point_metrics(const std::vector<UtteranceResult>& records, int num_classes,
                                            bool with_emotion, bool with_tokens);

/// Corpus-level metrics over `records`. Emotion metrics are reported when
/// `with_emotion`; token_error_rate (sum of edit distances over sum of
/// reference lengths) when `with_tokens`.
EvalReport evaluate(const std::vector<UtteranceResult>& records, int num_classes, bool with_emotion,
                    bool with_tokens, const BootstrapConfig& boot);

}  // namespace tmerge::metrics
