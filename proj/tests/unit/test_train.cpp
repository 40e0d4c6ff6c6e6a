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

#include <cmath>

#include <omp.h>

#include "doctest.h"
#include "taskmerge/errors.hpp"
#include "taskmerge/model/heads.hpp"
#include "taskmerge/num/ops.hpp"
#include "taskmerge/train/train.hpp"
#include "test_util.hpp"

using namespace tmerge;
using namespace tmerge::train;
using tmerge::testing::random_tensor;

namespace {

ckpt::ModelConfig tiny_model() {
  ckpt::ModelConfig m;
  m.num_layers = 2;
  m.model_dim = 8;
  m.heads = 2;
  m.ffn_dim = 16;
  m.input_dim = 10;
  m.frontend_kernel = 3;
  m.max_frames = 16;
  m.vocab_size = 5;
  m.num_classes = 3;
  return m;
}

synth::SynthConfig tiny_synth() {
  synth::SynthConfig s;
  s.num_train = 30;
  s.num_valid = 15;
  s.num_test = 15;
  s.frames_min = 8;
  s.frames_max = 12;
  s.input_dim = 10;
  s.prosody_dims = 4;
  s.vocab_size = 5;
  s.num_classes = 3;
  s.class_prior = {0.5, 0.3, 0.2};
  s.noise_std = 0.3;
  s.emotion_scale = 1.0;
  s.template_scale = 2.0;
  return s;
}

TrainConfig quick_train(int epochs) {
  TrainConfig t;
  t.lr = 1e-2;
  t.epochs = epochs;
  t.batch_size = 8;
  t.seed = 3;
  return t;
}

// Scalar oracle for the effective-number weights.
std::vector<double> cb_oracle(const std::vector<long>& counts, double beta) {
  std::vector<double> raw;
  double sum = 0.0;
  for (long n : counts) {
    const double w = (1.0 - beta) / (1.0 - std::pow(beta, static_cast<double>(n)));
    raw.push_back(w);
    sum += w;
  }
  for (double& w : raw) w = w * static_cast<double>(counts.size()) / sum;
  return raw;
}

double soft_ce_oracle(const std::vector<double>& logits, const std::vector<double>& target,
                      const std::vector<double>& weights) {
  double mx = logits[0];
  for (double x : logits) mx = std::max(mx, x);
  double z = 0.0;
  for (double x : logits) z += std::exp(x - mx);
  double loss = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) loss -= weights[c] * target[c] * (logits[c] - mx - std::log(z));
  return loss;
}

double cb_loss_value(const std::vector<double>& logits, const std::vector<double>& target,
                     const std::vector<double>& weights) {
  num::Graph g;
  const auto x = g.constant(num::Tensor({1, logits.size()}, logits));
  return class_balanced_soft_ce(x, target, weights).value().item();
}

}  // namespace

TEST_CASE("train config validates invariants and rejects unknown keys") {
  CHECK_NOTHROW(TrainConfig{}.validate());
  TrainConfig t;
  t.lr = 0.0;
  CHECK_THROWS_AS(t.validate(), ValidationError);
  t = {};
  t.mtl_loss_mix = 1.5;
  CHECK_THROWS_AS(t.validate(), ValidationError);
  t = {};
  t.cb_beta = 1.0;
  CHECK_THROWS_AS(t.validate(), ValidationError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"learning_rate", 1e-3}}), ValidationError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"epochs", "ten"}}), ValidationError);
  const auto back = TrainConfig::from_json(TrainConfig{}.to_json());
  CHECK(back.to_json() == TrainConfig{}.to_json());
  CHECK(TrainConfig{}.lr == 1e-4);
  CHECK(TrainConfig{}.batch_size == 32);
  CHECK(TrainConfig{}.epochs == 100);
}

TEST_CASE("class-balance weights follow the effective-number formula") {
  for (double beta : {0.0, 0.9, 0.999}) {
    const auto w = class_balance_weights({10, 1000}, beta);
    const auto oracle = cb_oracle({10, 1000}, beta);
    for (std::size_t c = 0; c < 2; ++c) CHECK(std::abs(w[c] - oracle[c]) <= 1e-12);
    if (beta > 0.0) CHECK(w[0] > w[1]);
  }
  for (double x : class_balance_weights({10, 1000}, 0.0)) CHECK(x == 1.0);
  for (double x : class_balance_weights({37, 37, 37}, 0.9999)) CHECK(x == 1.0);
  const auto zero = class_balance_weights({0, 1, 5}, 0.9);
  CHECK(zero[0] == zero[1]);
  CHECK_THROWS_AS(class_balance_weights({}, 0.5), ValidationError);
  CHECK_THROWS_AS(class_balance_weights({1, 2}, 1.0), ValidationError);
}

TEST_CASE("uniform counts reduce the class-balanced loss to plain soft cross entropy") {
  const std::vector<double> logits{0.3, -1.2, 2.0, 0.1};
  const std::vector<double> target{0.1, 0.2, 0.6, 0.1};
  const auto w = class_balance_weights({50, 50, 50, 50}, 0.9999);
  const std::vector<double> ones(4, 1.0);
  CHECK(cb_loss_value(logits, target, w) == cb_loss_value(logits, target, ones));
  CHECK(cb_loss_value(logits, target, ones) == doctest::Approx(soft_ce_oracle(logits, target, ones)).epsilon(1e-12));
  const auto skewed = class_balance_weights({5, 50, 500, 20}, 0.99);
  CHECK(cb_loss_value(logits, target, skewed) ==
        doctest::Approx(soft_ce_oracle(logits, target, skewed)).epsilon(1e-12));
}

TEST_CASE("class-balanced loss rejects labels that are not distributions") {
  const std::vector<double> logits{0.0, 1.0, 2.0};
  const std::vector<double> ones(3, 1.0);
  CHECK_THROWS_AS(cb_loss_value(logits, {0.5, 0.2, 0.2}, ones), ValidationError);
  CHECK_THROWS_AS(cb_loss_value(logits, {1.2, -0.2, 0.0}, ones), ValidationError);
  CHECK_THROWS_AS(cb_loss_value(logits, {0.5, 0.5}, ones), ValidationError);
}

TEST_CASE("class-balanced loss gradient matches finite differences") {
  num::Rng rng(8);
  const std::vector<double> target{0.05, 0.8, 0.1, 0.05};
  const auto w = class_balance_weights({3, 40, 12, 7}, 0.99);
  const double err = testing::gradient_check(
      [&](num::Graph&, const std::vector<num::Var>& v) { return class_balanced_soft_ce(v[0], target, w); },
      {random_tensor(rng, {1, 4}, -2, 2)});
  CHECK(err <= 1e-7);
}

TEST_CASE("smoothed targets spread epsilon uniformly") {
  const auto t = smoothed_target({0.9, 0.1, 0.0, 0.0}, 0.1);
  CHECK(t[0] == doctest::Approx(0.835));
  CHECK(t[2] == doctest::Approx(0.025));
  double s = 0.0;
  for (double x : t) s += x;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(smoothed_target({0.0, 1.0}, 0.0) == std::vector<double>{0.0, 1.0});
}

TEST_CASE("frame cross entropy: one-hot, uniform and hand-summed cases") {
  num::Graph g;
  const std::vector<int> labels{0, 2, 1};
  std::vector<double> sharp(9, -40.0);
  for (std::size_t t = 0; t < 3; ++t) sharp[t * 3 + static_cast<std::size_t>(labels[t])] = 40.0;
  CHECK(asr_frame_ce(g.constant(num::Tensor({3, 3}, sharp)), labels).value().item() < 1e-30);
  CHECK(asr_frame_ce(g.constant(num::Tensor::zeros({3, 3})), labels).value().item() ==
        doctest::Approx(std::log(3.0)).epsilon(1e-15));

  num::Rng rng(4);
  const auto x = random_tensor(rng, {4, 5}, -3, 3);
  const std::vector<int> y{4, 0, 0, 2};
  double oracle = 0.0;
  for (std::size_t t = 0; t < 4; ++t) {
    double z = 0.0;
    for (std::size_t v = 0; v < 5; ++v) z += std::exp(x.at(t, v));
    oracle += std::log(z) - x.at(t, static_cast<std::size_t>(y[t]));
  }
  CHECK(asr_frame_ce(g.constant(x), y).value().item() == doctest::Approx(oracle / 4.0).epsilon(1e-12));
  CHECK_THROWS_AS(asr_frame_ce(g.constant(x), {4, 0, 0, 5}), ValidationError);
  CHECK_THROWS_AS(asr_frame_ce(g.constant(x), {4, 0}), ShapeError);
}

TEST_CASE("output frame labels use the kernel centre") {
  auto m = tiny_model();
  CHECK(output_frame_labels(m, {1, 2, 3, 4, 5}) == std::vector<int>{2, 3, 4});
  m.frontend_kernel = 4;
  m.frontend_stride = 2;
  CHECK(output_frame_labels(m, {0, 1, 2, 3, 4, 5, 6, 7}) == std::vector<int>{2, 4, 6});
}

TEST_CASE("optimizer: zero gradient without decay leaves parameters bitwise unchanged") {
  num::Rng rng(1);
  TrainableSet p{{"w", {random_tensor(rng, {3, 2}), 1.0, true}}};
  const auto before = p.at("w").value;
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  OptimizerState st;
  optimizer_step(p, {{"w", num::Tensor::zeros({3, 2})}}, st, cfg);
  CHECK(p.at("w").value.bitwise_equal(before));
  CHECK(st.step == 1);
}

TEST_CASE("optimizer: first step on a scalar with unit gradient moves by lr") {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.0;
  TrainableSet p{{"x", {num::Tensor::scalar(2.0), 1.0, true}}};
  OptimizerState st;
  optimizer_step(p, {{"x", num::Tensor::scalar(1.0)}}, st, cfg);
  // m_hat = v_hat = 1 after bias correction.
  CHECK(p.at("x").value.item() == doctest::Approx(2.0 - cfg.lr / (1.0 + cfg.eps)).epsilon(1e-15));
}

TEST_CASE("optimizer: decay is decoupled from the moments") {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  TrainableSet p{{"w", {num::Tensor::scalar(4.0), 1.0, true}}, {"raw", {num::Tensor::scalar(4.0), 1.0, false}}};
  OptimizerState st;
  optimizer_step(p, {{"w", num::Tensor::scalar(0.0)}, {"raw", num::Tensor::scalar(0.0)}}, st, cfg);
  CHECK(p.at("w").value.item() == 4.0 - 0.1 * 0.5 * 4.0);
  CHECK(p.at("raw").value.item() == 4.0);
  CHECK(st.m.at("w").item() == 0.0);
}

TEST_CASE("optimizer: a zero learning-rate multiplier freezes a group") {
  num::Rng rng(2);
  TrainableSet p{{"backbone", {random_tensor(rng, {4}), 0.0, true}}, {"head", {random_tensor(rng, {4}), 1.0, true}}};
  const auto bb = p.at("backbone").value, hd = p.at("head").value;
  OptimizerState st;
  optimizer_step(p, {{"backbone", random_tensor(rng, {4})}, {"head", random_tensor(rng, {4})}}, st, TrainConfig{});
  CHECK(p.at("backbone").value.bitwise_equal(bb));
  CHECK_FALSE(p.at("head").value.bitwise_equal(hd));
  CHECK_THROWS_AS(optimizer_step(p, {{"head", num::Tensor::zeros({5})}}, st, TrainConfig{}), ShapeError);
}

TEST_CASE("select_checkpoint picks the earliest minimum") {
  CHECK(select_checkpoint({5, 4, 3, 2, 1}) == 4);
  CHECK(select_checkpoint({5, 4, 4, 1, 3, 6, 6, 1, 2}) == 3);
  CHECK_THROWS_AS(select_checkpoint({}), ValidationError);
  num::Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> h(1 + rng.below(20));
    for (double& x : h) x = static_cast<double>(rng.below(5));
    std::size_t oracle = 0;
    for (std::size_t i = 0; i < h.size(); ++i)
      if (h[i] < h[oracle]) oracle = i;
    CHECK(select_checkpoint(h) == oracle);
  }
}

TEST_CASE("history csv has one valid row per epoch and train rows after epoch 0") {
  History h;
  h.epochs.push_back({0, std::nullopt, 1.5, {{"uar", 0.25}}});
  h.epochs.push_back({1, 1.25, 1.0, {{"uar", 0.5}, {"token_error_rate", 0.75}}});
  CHECK(h.to_csv() ==
        "epoch,split,loss,uar,precision,macro_f1,token_error_rate\n"
        "0,valid,1.5,0.25,,,\n"
        "1,train,1.25,,,,\n"
        "1,valid,1,0.5,,,0.75\n");
}

TEST_CASE("zero epochs of fine-tuning leave the backbone untouched") {
  const auto corpus = synth::generate_corpus(tiny_synth());
  const auto base = ckpt::init_backbone(tiny_model(), 1);
  const auto res = finetune_task(base, corpus, Task::Ser, quick_train(0));
  CHECK(res.model.backbone_fingerprint() == base.backbone_fingerprint());
  CHECK(res.history.epochs.size() == 1);
  CHECK(res.model.contains("ser.weight"));
  CHECK_FALSE(res.model.contains("asr.weight"));
  synth::Corpus empty = corpus;
  empty.train.clear();
  CHECK_THROWS_AS(finetune_task(base, empty, Task::Ser, quick_train(1)), ValidationError);
}

TEST_CASE("SER fine-tuning beats chance and ASR fine-tuning beats the all-blank decoder") {
  const auto corpus = synth::generate_corpus(tiny_synth());
  const auto base = ckpt::init_backbone(tiny_model(), 1);
  const auto ser = finetune_task(base, corpus, Task::Ser, quick_train(20));
  const auto& best = ser.history.epochs.at(static_cast<std::size_t>(ser.history.best_epoch));
  CHECK(best.valid_metrics.at("uar") > 1.0 / 3.0 + 0.2);

  auto cfg = quick_train(20);
  cfg.dlr_backbone_multiplier = 1.0;
  const auto asr = finetune_task(base, corpus, Task::Asr, cfg);
  // An all-blank decode deletes every reference token: error rate 1.
  const auto& abest = asr.history.epochs.at(static_cast<std::size_t>(asr.history.best_epoch));
  CHECK(abest.valid_metrics.at("token_error_rate") < 1.0);
  CHECK(abest.valid_metrics.count("uar") == 0);
}

TEST_CASE("joint training with mix 1 or 0 reproduces the single-task fine-tune") {
  const auto corpus = synth::generate_corpus(tiny_synth());
  const auto base = ckpt::init_backbone(tiny_model(), 1);
  for (double mix : {1.0, 0.0}) {
    auto cfg = quick_train(2);
    cfg.mtl_loss_mix = mix;
    const auto mtl = train_mtl(base, corpus, cfg);
    const auto ft = finetune_task(base, corpus, mix == 1.0 ? Task::Ser : Task::Asr, cfg);
    CHECK(mtl.model.fingerprint() == ft.model.fingerprint());
    CHECK(mtl.history.to_csv() == ft.history.to_csv());
  }
}

TEST_CASE("joint training at mix 0.5 carries both heads and reports both tasks") {
  const auto corpus = synth::generate_corpus(tiny_synth());
  const auto base = ckpt::init_backbone(tiny_model(), 1);
  const auto mtl = train_mtl(base, corpus, quick_train(1), 1.0);
  CHECK(mtl.model.contains("ser.weight"));
  CHECK(mtl.model.contains("asr.weight"));
  CHECK(mtl.history.epochs.back().valid_metrics.count("uar") == 1);
  CHECK(mtl.history.epochs.back().valid_metrics.count("token_error_rate") == 1);
  CHECK(mtl.model.task() == "mtl");
}

namespace {

struct MergeFixture {
  synth::Corpus corpus = synth::generate_corpus(tiny_synth());
  ckpt::LayeredCheckpoint base = ckpt::init_backbone(tiny_model(), 1);
  std::vector<taskvec::TaskVector> tvs;

  MergeFixture() {
    auto cfg = quick_train(2);
    cfg.dlr_backbone_multiplier = 1.0;
    tvs.push_back(taskvec::extract_task_vector(finetune_task(base, corpus, Task::Asr, cfg).model, base));
    tvs.push_back(taskvec::extract_task_vector(finetune_task(base, corpus, Task::Ser, cfg).model, base));
  }
};

}  // namespace

TEST_CASE("coefficient training keeps base and vectors bitwise frozen") {
  MergeFixture f;
  const auto base_fp = f.base.fingerprint();
  const auto fp0 = f.tvs[0].fingerprint(), fp1 = f.tvs[1].fingerprint();
  const auto res = train_adaltm(f.base, f.tvs, f.corpus, taskvec::Strategy::AdaptiveLayerwise, quick_train(2));
  CHECK(f.base.fingerprint() == base_fp);
  CHECK(f.tvs[0].fingerprint() == fp0);
  CHECK(f.tvs[1].fingerprint() == fp1);
  REQUIRE(res.snapshots.size() == 3);
  for (const auto& row : res.snapshots.front().coeffs.lambdas) {
    CHECK(row.size() == 3);
    for (double l : row) CHECK(l == 0.5);
  }
  CHECK(res.snapshots.back().coeffs.lambdas != res.snapshots.front().coeffs.lambdas);
  CHECK(res.model.backbone_fingerprint() ==
        taskvec::merge_layerwise(f.base, f.tvs, res.coeffs).backbone_fingerprint());
}

TEST_CASE("tampering with a frozen tensor during coefficient training is a hard failure") {
  MergeFixture f;
  const auto& t = f.tvs[1].deltas.begin()->second.tensor;
  auto tamper = [&](const EpochRecord& r) {
    if (r.epoch == 1) const_cast<double*>(t.data().data())[0] += 1.0;
  };
  CHECK_THROWS_AS(train_adaltm(f.base, f.tvs, f.corpus, taskvec::Strategy::AdaptiveLayerwise, quick_train(1), tamper),
                  FreezeViolation);
}

TEST_CASE("zero task vectors give exactly zero coefficient gradients") {
  const auto corpus = synth::generate_corpus(tiny_synth());
  const auto base = ckpt::init_backbone(tiny_model(), 1);
  const auto zero = taskvec::extract_task_vector(base, base);
  const std::vector<taskvec::TaskVector> tvs{zero, zero};
  const auto coeffs = taskvec::MergeCoefficients::init(taskvec::Strategy::AdaptiveLayerwise, 2, 2);
  const auto head = init_head(base.config(), Task::Ser, 1);
  const LossSetup loss{std::vector<double>(3, 1.0), 0.1};
  const std::vector<synth::Utterance> batch(corpus.train.begin(), corpus.train.begin() + 4);
  const auto step = adaltm_batch_loss(base, tvs, coeffs, head, batch, loss);
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t i = 0; i < 3; ++i) CHECK(step.grads.at(coefficient_name(v, i)).item() == 0.0);
  const auto res = train_adaltm(base, tvs, corpus, taskvec::Strategy::AdaptiveLayerwise, quick_train(2));
  for (const auto& snap : res.snapshots)
    for (const auto& row : snap.coeffs.lambdas)
      for (double l : row) CHECK(l == 0.5);
}

TEST_CASE("static global coefficients never move while aggregation and head train") {
  MergeFixture f;
  const auto res = train_adaltm(f.base, f.tvs, f.corpus, taskvec::Strategy::StaticGlobal, quick_train(2));
  for (const auto& snap : res.snapshots) CHECK(snap.coeffs.lambdas == std::vector<std::vector<double>>{{0.5}, {0.5}});
  CHECK(res.snapshots.front().alpha != res.snapshots.back().alpha);
  CHECK(res.model.backbone_fingerprint() == taskvec::merge_static_global(f.base, f.tvs, 0.5).backbone_fingerprint());
}

TEST_CASE("coefficient, aggregation and head gradients match central differences") {
  MergeFixture f;
  auto coeffs = taskvec::MergeCoefficients::init(taskvec::Strategy::AdaptiveLayerwise, 2, 2);
  coeffs.lambdas = {{0.3, 0.7, 0.45}, {0.6, 0.2, 0.9}};
  auto head = init_head(f.base.config(), Task::Ser, 5);
  num::Rng rng(12);
  head.at("agg.raw").tensor = random_tensor(rng, {2});
  const LossSetup loss{class_balance_weights(emotion_counts(f.corpus.train, 3), 0.99), 0.1};
  const std::vector<synth::Utterance> batch(f.corpus.train.begin(), f.corpus.train.begin() + 3);
  const auto an = adaltm_batch_loss(f.base, f.tvs, coeffs, head, batch, loss);
  const double h = 1e-5;

  std::vector<double> fd, bp;
  for (std::size_t v = 0; v < 2; ++v) {
    for (std::size_t i = 0; i < 3; ++i) {
      auto plus = coeffs, minus = coeffs;
      plus.lambdas[v][i] += h;
      minus.lambdas[v][i] -= h;
      fd.push_back((adaltm_batch_loss(f.base, f.tvs, plus, head, batch, loss).loss -
                    adaltm_batch_loss(f.base, f.tvs, minus, head, batch, loss).loss) /
                   (2 * h));
      bp.push_back(an.grads.at(coefficient_name(v, i)).item());
    }
  }
  CHECK(testing::relative_error(bp, fd) <= 1e-5);

  for (const auto& [name, e] : head) {
    std::vector<double> hfd, hbp = an.grads.at(name).to_vector();
    for (std::size_t k = 0; k < e.tensor.numel(); ++k) {
      auto plus = head, minus = head;
      auto vp = e.tensor.to_vector(), vm = e.tensor.to_vector();
      vp[k] += h;
      vm[k] -= h;
      plus.at(name).tensor = num::Tensor(e.tensor.shape(), vp);
      minus.at(name).tensor = num::Tensor(e.tensor.shape(), vm);
      hfd.push_back((adaltm_batch_loss(f.base, f.tvs, coeffs, plus, batch, loss).loss -
                     adaltm_batch_loss(f.base, f.tvs, coeffs, minus, batch, loss).loss) /
                    (2 * h));
    }
    CHECK_MESSAGE(testing::relative_error(hbp, hfd) <= 1e-5, name);
  }
}

TEST_CASE("coefficient training is deterministic for a fixed seed") {
  MergeFixture f;
  const auto a = train_adaltm(f.base, f.tvs, f.corpus, taskvec::Strategy::AdaptiveLayerwise, quick_train(2));
  const auto b = train_adaltm(f.base, f.tvs, f.corpus, taskvec::Strategy::AdaptiveLayerwise, quick_train(2));
  CHECK(a.coeffs.lambdas == b.coeffs.lambdas);
  CHECK(a.history.to_csv() == b.history.to_csv());
  CHECK(a.model.fingerprint() == b.model.fingerprint());
}

TEST_CASE("frozen baseline trains only aggregation and head on the bare base") {
  const auto corpus = synth::generate_corpus(tiny_synth());
  const auto base = ckpt::init_backbone(tiny_model(), 1);
  const auto res = train_adaltm(base, {}, corpus, taskvec::Strategy::AdaptiveLayerwise, quick_train(3));
  CHECK(res.coeffs.lambdas.empty());
  CHECK(res.model.backbone_fingerprint() == base.backbone_fingerprint());
  CHECK(res.history.epochs.size() == 4);
}

TEST_CASE("stale vectors are refused before training starts") {
  MergeFixture f;
  const auto other = ckpt::init_backbone(tiny_model(), 2);
  CHECK_THROWS_AS(train_adaltm(other, f.tvs, f.corpus, taskvec::Strategy::AdaptiveLayerwise, quick_train(1)),
                  StaleVectorError);
}

TEST_CASE("evaluation runs every head a checkpoint carries") {
  const auto corpus = synth::generate_corpus(tiny_synth());
  auto model = ckpt::init_backbone(tiny_model(), 1);
  for (const auto& [name, e] : init_head(model.config(), Task::Asr, 1)) model.set(name, e.tensor, e.layer);
  const auto out = run_model(model, corpus.valid, {std::vector<double>(3, 1.0), 0.0});
  CHECK_FALSE(out.has_ser);
  CHECK(out.has_asr);
  CHECK(out.asr_loss.size() == corpus.valid.size());
  CHECK(out.results[0].ref_tokens == corpus.valid[0].transcript());
  const auto report = evaluate_model(model, corpus.test, {50, 0.95, 1});
  CHECK(report.metrics.count("token_error_rate") == 1);
  CHECK(report.metrics.count("uar") == 0);
}

TEST_CASE("parallel batch evaluation matches the serial loop bitwise") {
  const auto corpus = synth::generate_corpus(tiny_synth());
  const auto mtl = train_mtl(ckpt::init_backbone(tiny_model(), 1), corpus, quick_train(1), 1.0).model;
  const LossSetup loss{class_balance_weights(emotion_counts(corpus.train, 3), 0.99), 0.1};
  const auto ref = serial::run_model(mtl, corpus.valid, loss);
  const int saved = omp_get_max_threads();
  omp_set_num_threads(4);
  const auto par = run_model(mtl, corpus.valid, loss);
  omp_set_num_threads(saved);
  CHECK(par.ser_loss == ref.ser_loss);
  CHECK(par.asr_loss == ref.asr_loss);
  for (std::size_t i = 0; i < ref.results.size(); ++i) {
    CHECK(par.results[i].predicted == ref.results[i].predicted);
    CHECK(par.results[i].hyp_tokens == ref.results[i].hyp_tokens);
  }
}
