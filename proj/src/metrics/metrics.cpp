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

#include "taskmerge/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "taskmerge/errors.hpp"
#include "taskmerge/num/rng.hpp"

namespace tmerge::metrics {

ConfusionMatrix::ConfusionMatrix(int num_classes) : n_(num_classes) {
  if (num_classes < 0) throw ValidationError("confusion matrix needs num_classes >= 0");
  counts_.assign(static_cast<std::size_t>(n_) * static_cast<std::size_t>(n_), 0);
}

void ConfusionMatrix::add(int reference, int predicted, long count) {
  if (reference < 0 || reference >= n_ || predicted < 0 || predicted >= n_) {
    throw ValidationError("class id out of range: reference " + std::to_string(reference) + ", predicted " +
                          std::to_string(predicted) + " with " + std::to_string(n_) + " classes");
  }
  if (count < 0) throw ValidationError("confusion counts must be nonnegative");
  counts_[static_cast<std::size_t>(reference * n_ + predicted)] += count;
}

long ConfusionMatrix::at(int reference, int predicted) const {
  return counts_.at(static_cast<std::size_t>(reference * n_ + predicted));
}

long ConfusionMatrix::total() const {
  long t = 0;
  for (long c : counts_) t += c;
  return t;
}

long ConfusionMatrix::support(int c) const {
  long s = 0;
  for (int p = 0; p < n_; ++p) s += at(c, p);
  return s;
}

long ConfusionMatrix::predicted(int c) const {
  long s = 0;
  for (int r = 0; r < n_; ++r) s += at(r, c);
  return s;
}

nlohmann::json ConfusionMatrix::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < n_; ++r) {
    std::vector<long> row;
    for (int p = 0; p < n_; ++p) row.push_back(at(r, p));
    rows.push_back(row);
  }
  return rows;
}

double uar(const ConfusionMatrix& cm) {
  double sum = 0.0;
  int classes = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    const long s = cm.support(c);
    if (s == 0) continue;
    sum += static_cast<double>(cm.at(c, c)) / static_cast<double>(s);
    ++classes;
  }
  if (classes == 0) throw ValidationError("uar of an empty confusion matrix");
  return sum / classes;
}

namespace {

template <typename PerClass>
double macro_over_present(const ConfusionMatrix& cm, PerClass per_class) {
  double sum = 0.0;
  int classes = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    if (cm.support(c) == 0 && cm.predicted(c) == 0) continue;
    sum += per_class(c);
    ++classes;
  }
  return classes == 0 ? 0.0 : sum / classes;
}

double ratio(long num, long den) { return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den); }

}  // namespace

double precision_macro(const ConfusionMatrix& cm) {
  return macro_over_present(cm, [&](int c) { return ratio(cm.at(c, c), cm.predicted(c)); });
}

double macro_f1(const ConfusionMatrix& cm) {
  return macro_over_present(cm, [&](int c) {
    const double p = ratio(cm.at(c, c), cm.predicted(c));
    const double r = ratio(cm.at(c, c), cm.support(c));
    return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
  });
}

std::size_t levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double token_error_rate(const std::vector<int>& hyp, const std::vector<int>& ref) {
  return static_cast<double>(levenshtein(hyp, ref)) / static_cast<double>(std::max<std::size_t>(1, ref.size()));
}

Interval bootstrap_ci(std::size_t n, const ResampleMetric& metric, int n_resamples, double level,
                      std::uint64_t seed) {
  if (n == 0) throw ValidationError("bootstrap needs at least one record");
  if (n_resamples < 1) throw ValidationError("bootstrap needs n_resamples >= 1");
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("bootstrap level must lie in (0, 1)");
  const num::Rng root(seed, num::Rng::hash_label("bootstrap"));
  std::vector<double> stats(static_cast<std::size_t>(n_resamples));
#pragma omp parallel for schedule(static) if (n_resamples * n >= 4096)
  for (int r = 0; r < n_resamples; ++r) {
    num::Rng rng = root.fork(static_cast<std::uint64_t>(r));
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.below(n));
    stats[static_cast<std::size_t>(r)] = metric(idx);
  }
  std::sort(stats.begin(), stats.end());
  auto order_stat = [&](double q) {
    const auto k = static_cast<long>(std::ceil(q * n_resamples - 1e-9));
    return stats[static_cast<std::size_t>(std::clamp<long>(k, 1, n_resamples) - 1)];
  };
  const double tail = (1.0 - level) / 2.0;
  return {order_stat(tail), order_stat(1.0 - tail)};
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, v] : metrics) j[name] = {{"point", v.point}, {"ci_lo", v.ci_lo}, {"ci_hi", v.ci_hi}};
  return {{"metrics", j}, {"confusion_matrix", confusion.to_json()}};
}

std::map<std::string, double> point_metrics(const std::vector<UtteranceResult>& records, int num_classes,
                                            bool with_emotion, bool with_tokens) {
  if (records.empty()) throw ValidationError("point_metrics needs at least one utterance");
  ConfusionMatrix cm(num_classes);
  std::size_t edits = 0, len = 0;
  for (const auto& r : records) {
    if (with_emotion) cm.add(r.emotion, r.predicted);
    if (with_tokens) {
      edits += levenshtein(r.hyp_tokens, r.ref_tokens);
      len += r.ref_tokens.size();
    }
  }
  std::map<std::string, double> out;
  if (with_emotion) {
    out["uar"] = uar(cm);
    out["precision"] = precision_macro(cm);
    out["macro_f1"] = macro_f1(cm);
  }
  if (with_tokens) out["token_error_rate"] = static_cast<double>(edits) / static_cast<double>(std::max<std::size_t>(1, len));
  return out;
}

EvalReport evaluate(const std::vector<UtteranceResult>& records, int num_classes, bool with_emotion,
                    bool with_tokens, const BootstrapConfig& boot) {
  if (records.empty()) throw ValidationError("evaluate needs at least one utterance");
  std::vector<std::size_t> edits(records.size()), ref_len(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (with_tokens) {
      edits[i] = levenshtein(records[i].hyp_tokens, records[i].ref_tokens);
      ref_len[i] = records[i].ref_tokens.size();
    }
  }
  auto cm_of = [&](const std::vector<std::size_t>& idx) {
    ConfusionMatrix cm(num_classes);
    for (std::size_t i : idx) cm.add(records[i].emotion, records[i].predicted);
    return cm;
  };
  auto ter_of = [&](const std::vector<std::size_t>& idx) {
    std::size_t e = 0, len = 0;
    for (std::size_t i : idx) {
      e += edits[i];
      len += ref_len[i];
    }
    return static_cast<double>(e) / static_cast<double>(std::max<std::size_t>(1, len));
  };

  std::vector<std::size_t> all(records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

  EvalReport report;
  if (with_emotion) report.confusion = cm_of(all);
  auto add = [&](const std::string& name, const ResampleMetric& fn, std::uint64_t salt) {
    const Interval ci = bootstrap_ci(records.size(), fn, boot.n_resamples, boot.level, boot.seed ^ salt);
    report.metrics[name] = MetricValue{fn(all), ci.lo, ci.hi};
  };
  if (with_emotion) {
    add("uar", [&](const auto& idx) { return uar(cm_of(idx)); }, 0);
    add("precision", [&](const auto& idx) { return precision_macro(cm_of(idx)); }, 1);
    add("macro_f1", [&](const auto& idx) { return macro_f1(cm_of(idx)); }, 2);
  }
  if (with_tokens) add("token_error_rate", ter_of, 3);
  return report;
}

}  // namespace tmerge::metrics
