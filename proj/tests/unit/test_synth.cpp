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

#include <Eigen/Dense>
#include <cmath>

#include "doctest.h"
#include "taskmerge/errors.hpp"
#include "taskmerge/synth/synthdata.hpp"
#include "test_util.hpp"

using namespace tmerge;
using namespace tmerge::synth;

namespace {

SynthConfig small(double conflict, double noise) {
  SynthConfig c;
  c.num_train = 200;
  c.num_valid = 10;
  c.num_test = 200;
  c.conflict = conflict;
  c.noise_std = noise;
  return c;
}

// Least-squares linear classifier with a bias column, fit on one set of rows
// and scored on another.
struct LeastSquares {
  Eigen::MatrixXd w;

  LeastSquares(const Eigen::MatrixXd& x, const std::vector<int>& y, int classes) {
    Eigen::MatrixXd t = Eigen::MatrixXd::Zero(x.rows(), classes);
    for (Eigen::Index i = 0; i < x.rows(); ++i) t(i, y[static_cast<std::size_t>(i)]) = 1.0;
    w = with_bias(x).completeOrthogonalDecomposition().solve(t);
  }

  static Eigen::MatrixXd with_bias(const Eigen::MatrixXd& x) {
    Eigen::MatrixXd b(x.rows(), x.cols() + 1);
    b << x, Eigen::VectorXd::Ones(x.rows());
    return b;
  }

  double accuracy(const Eigen::MatrixXd& x, const std::vector<int>& y) const {
    const Eigen::MatrixXd s = with_bias(x) * w;
    std::size_t hit = 0;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      Eigen::Index arg;
      s.row(i).maxCoeff(&arg);
      hit += static_cast<int>(arg) == y[static_cast<std::size_t>(i)];
    }
    return static_cast<double>(hit) / static_cast<double>(y.size());
  }
};

void frame_rows(const std::vector<Utterance>& utts, Eigen::MatrixXd& x, std::vector<int>& y) {
  std::size_t rows = 0;
  for (const auto& u : utts) rows += u.frame_tokens.size();
  const auto dim = static_cast<Eigen::Index>(utts.front().features.shape()[1]);
  x.resize(static_cast<Eigen::Index>(rows), dim);
  y.clear();
  Eigen::Index r = 0;
  for (const auto& u : utts) {
    for (std::size_t f = 0; f < u.frame_tokens.size(); ++f, ++r) {
      for (Eigen::Index d = 0; d < dim; ++d) x(r, d) = u.features.at(f, static_cast<std::size_t>(d));
      y.push_back(u.frame_tokens[f]);
    }
  }
}

void pooled_rows(const std::vector<Utterance>& utts, Eigen::MatrixXd& x, std::vector<int>& y) {
  const auto dim = static_cast<Eigen::Index>(utts.front().features.shape()[1]);
  x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(utts.size()), dim);
  y.clear();
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const auto frames = utts[i].frame_tokens.size();
    for (std::size_t f = 0; f < frames; ++f)
      for (Eigen::Index d = 0; d < dim; ++d) x(static_cast<Eigen::Index>(i), d) += utts[i].features.at(f, static_cast<std::size_t>(d));
    x.row(static_cast<Eigen::Index>(i)) /= static_cast<double>(frames);
    y.push_back(utts[i].emotion);
  }
}

struct OracleScores {
  double token = 0.0;
  double emotion = 0.0;
};

OracleScores oracle_scores(const Corpus& c, const SynthConfig& cfg) {
  Eigen::MatrixXd xtr, xte;
  std::vector<int> ytr, yte;
  frame_rows(c.train, xtr, ytr);
  frame_rows(c.test, xte, yte);
  OracleScores s;
  s.token = LeastSquares(xtr, ytr, cfg.vocab_size).accuracy(xte, yte);
  pooled_rows(c.train, xtr, ytr);
  pooled_rows(c.test, xte, yte);
  s.emotion = LeastSquares(xtr, ytr, cfg.num_classes).accuracy(xte, yte);
  return s;
}

}  // namespace

TEST_CASE("config validation rejects impossible layouts and out-of-range values") {
  CHECK_NOTHROW(SynthConfig{}.validate());
  auto bad = [](auto mutate) {
    SynthConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), ValidationError);
  };
  bad([](SynthConfig& c) { c.vocab_size = 14; });  // 13 templates, 12 token dims
  bad([](SynthConfig& c) { c.prosody_dims = 6; });
  bad([](SynthConfig& c) { c.conflict = 1.01; });
  bad([](SynthConfig& c) { c.conflict = -0.1; });
  bad([](SynthConfig& c) { c.domain_shift = -1.0; });
  bad([](SynthConfig& c) { c.frames_max = c.frames_min - 1; });
  bad([](SynthConfig& c) { c.class_prior.pop_back(); });
  bad([](SynthConfig& c) { c.num_test = 0; });
  CHECK_THROWS_AS(SynthConfig::from_json({{"conflcit", 0.5}}), ValidationError);
  CHECK(SynthConfig::from_json(SynthConfig{}.to_json()).to_json() == SynthConfig{}.to_json());
}

TEST_CASE("same config gives bit-identical corpora") {
  const auto cfg = small(0.6, 0.5);
  const auto a = generate_corpus(cfg), b = generate_corpus(cfg);
  for (const char* split : {"train", "valid", "test"}) {
    const auto& sa = a.split(split);
    const auto& sb = b.split(split);
    REQUIRE(sa.size() == sb.size());
    for (std::size_t i = 0; i < sa.size(); ++i) {
      CHECK(sa[i].features.bitwise_equal(sb[i].features));
      CHECK(sa[i].frame_tokens == sb[i].frame_tokens);
      CHECK(sa[i].soft_label == sb[i].soft_label);
    }
  }
  auto other = cfg;
  other.seed += 1;
  CHECK_FALSE(generate_corpus(other).train[0].features.bitwise_equal(a.train[0].features));
}

TEST_CASE("splits are drawn from distinct streams") {
  const auto c = generate_corpus(small(0.6, 0.5));
  CHECK_FALSE(c.train[0].features.bitwise_equal(c.valid[0].features));
  CHECK_FALSE(c.train[0].features.bitwise_equal(c.test[0].features));
  CHECK_THROWS_AS(c.split("dev"), ValidationError);
}

TEST_CASE("zero domain shift leaves distribution parameters unchanged") {
  SynthConfig in = small(0.6, 0.5), out = in;
  out.domain_shift = 0.0;
  CHECK(synth_params(in) == synth_params(out));
  out.domain_shift = 1.0;
  const auto shifted = synth_params(out);
  CHECK_FALSE(shifted.emotion_present);
  CHECK(shifted.token_templates[0] == synth_params(in).token_templates[0]);
  CHECK(shifted.token_templates[1] != synth_params(in).token_templates[1]);
}

TEST_CASE("partner tables are single cycles over the non-blank tokens") {
  for (std::uint64_t seed : {1ull, 2ull, 99ull}) {
    for (int vocab : {3, 7, 12}) {
      SynthConfig cfg = small(0.6, 0.5);
      cfg.seed = seed;
      cfg.vocab_size = vocab;
      const auto p = synth_params(cfg);
      REQUIRE(p.emotion_partners.size() == static_cast<std::size_t>(cfg.num_classes));
      for (const auto& row : p.emotion_partners) {
        REQUIRE(row.size() == static_cast<std::size_t>(vocab));
        CHECK(row[0] == 0);
        int t = 1, steps = 0;
        do {
          t = row[static_cast<std::size_t>(t)];
          ++steps;
        } while (t != 1 && steps <= vocab);
        CHECK(steps == vocab - 1);
      }
    }
  }
}

TEST_CASE("utterance invariants hold on every split") {
  SynthConfig cfg = small(0.6, 0.5);
  cfg.annotator_mix = 0.3;
  const auto c = generate_corpus(cfg);
  for (const char* split : {"train", "valid", "test"}) {
    for (const auto& u : c.split(split)) {
      const auto frames = u.frame_tokens.size();
      CHECK(frames >= static_cast<std::size_t>(cfg.frames_min));
      CHECK(frames <= static_cast<std::size_t>(cfg.frames_max));
      CHECK(u.features.shape() == num::Shape{frames, static_cast<std::size_t>(cfg.input_dim)});
      double s = 0.0;
      for (double p : u.soft_label) s += p;
      CHECK(s == doctest::Approx(1.0).epsilon(1e-15));
      CHECK(u.soft_label[static_cast<std::size_t>(u.emotion)] == 0.7);
      for (int t : u.frame_tokens) CHECK((t >= 0 && t < cfg.vocab_size));
      CHECK(!u.transcript().empty());
    }
  }
}

TEST_CASE("without conflict or noise, least-squares classifiers solve both tasks") {
  const auto cfg = small(0.0, 0.0);
  const auto s = oracle_scores(generate_corpus(cfg), cfg);
  CHECK(s.token == 1.0);
  CHECK(s.emotion == 1.0);
}

TEST_CASE("raising conflict lowers the joint least-squares accuracy on both tasks") {
  OracleScores prev{2.0, 2.0};
  for (double conflict : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const auto cfg = small(conflict, 0.5);
    const auto s = oracle_scores(generate_corpus(cfg), cfg);
    MESSAGE("conflict " << conflict << " token " << s.token << " emotion " << s.emotion);
    CHECK(s.token < prev.token);
    CHECK(s.emotion < prev.emotion);
    prev = s;
  }
}

TEST_CASE("class counts sit inside a binomial interval of the prior") {
  SynthConfig cfg;
  cfg.num_train = 4000;
  cfg.num_valid = 1;
  cfg.num_test = 1;
  cfg.frames_min = 1;
  cfg.frames_max = 2;
  cfg.class_prior = {0.5};
  for (int i = 0; i < 7; ++i) cfg.class_prior.push_back(0.5 / 7.0);
  const auto stats = corpus_stats(generate_corpus(cfg), cfg.num_classes, cfg.vocab_size);
  const auto& counts = stats.class_counts.at("train");
  long total = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    const double p = cfg.class_prior[c], n = cfg.num_train;
    const double sd = std::sqrt(n * p * (1.0 - p));
    CHECK(std::abs(counts[c] - n * p) <= 4.0 * sd);
    total += counts[c];
  }
  CHECK(total == cfg.num_train);
}

TEST_CASE("corpus stats tally splits, token frames and lengths") {
  const auto cfg = small(0.6, 0.5);
  const auto c = generate_corpus(cfg);
  const auto stats = corpus_stats(c, cfg.num_classes, cfg.vocab_size);
  for (const char* split : {"train", "valid", "test"}) {
    long total = 0;
    for (int n : stats.class_counts.at(split)) total += n;
    CHECK(total == static_cast<long>(c.split(split).size()));
  }
  long frames = 0, hist_frames = 0;
  for (const auto& u : c.train) frames += static_cast<long>(u.frame_tokens.size());
  long token_total = 0;
  for (long n : stats.token_frames) token_total += n;
  for (const auto& [len, n] : stats.frames_histogram) hist_frames += static_cast<long>(len) * n;
  CHECK(token_total == frames);
  CHECK(hist_frames == frames);
  CHECK(stats.token_frames.size() == static_cast<std::size_t>(cfg.vocab_size));
}

TEST_CASE("save and load round-trip a corpus exactly") {
  testing::TempDir dir("synth");
  SynthConfig cfg = small(0.6, 0.5);
  cfg.num_train = 12;
  cfg.num_test = 5;
  const auto c = generate_corpus(cfg);
  save_corpus(c, dir / "corpus");
  const auto back = load_corpus(dir / "corpus");
  CHECK(back.config == c.config);
  for (const char* split : {"train", "valid", "test"}) {
    REQUIRE(back.split(split).size() == c.split(split).size());
    for (std::size_t i = 0; i < c.split(split).size(); ++i) {
      CHECK(back.split(split)[i].features.bitwise_equal(c.split(split)[i].features));
      CHECK(back.split(split)[i].frame_tokens == c.split(split)[i].frame_tokens);
      CHECK(back.split(split)[i].emotion == c.split(split)[i].emotion);
      CHECK(back.split(split)[i].soft_label == c.split(split)[i].soft_label);
    }
  }
  CHECK_THROWS(load_corpus(dir / "missing"));
}
