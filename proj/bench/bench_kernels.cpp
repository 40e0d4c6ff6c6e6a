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

// Serial reference vs OpenMP kernels: matmul, task-vector merge, batch eval.

#include <benchmark/benchmark.h>

#include "taskmerge/checkpoint/checkpoint.hpp"
#include "taskmerge/num/kernels.hpp"
#include "taskmerge/num/rng.hpp"
#include "taskmerge/synth/synthdata.hpp"
#include "taskmerge/taskvec/taskvec.hpp"
#include "taskmerge/train/train.hpp"

using namespace tmerge;

namespace {

num::Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  num::Rng rng(seed);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return num::Tensor({rows, cols}, std::move(v));
}

taskvec::TaskVector perturbed_vector(const ckpt::LayeredCheckpoint& base, const std::string& task, std::uint64_t seed) {
  num::Rng rng(seed);
  auto ft = base;
  for (const auto& [name, e] : base.params()) {
    if (e.layer < 0) continue;
    auto v = e.tensor.to_vector();
    for (double& x : v) x += 1e-3 * rng.normal();
    ft.set(name, num::Tensor(e.tensor.shape(), std::move(v)), e.layer);
  }
  auto tv = taskvec::extract_task_vector(ft, base);
  tv.task = task;
  return tv;
}

struct MergeInputs {
  ckpt::LayeredCheckpoint base = ckpt::init_backbone(ckpt::ModelConfig{}, 7);
  std::vector<taskvec::TaskVector> tvs{perturbed_vector(base, "asr", 1), perturbed_vector(base, "ser", 2)};
  taskvec::MergeCoefficients coeffs =
      taskvec::MergeCoefficients::init(taskvec::Strategy::AdaptiveLayerwise, 2, ckpt::ModelConfig{}.num_layers);
};

const MergeInputs& merge_inputs() {
  static const MergeInputs in;
  return in;
}

struct EvalInputs {
  synth::Corpus corpus;
  ckpt::LayeredCheckpoint model;
  train::LossSetup loss{std::vector<double>(8, 1.0), 0.0};

  EvalInputs() {
    synth::SynthConfig sc;
    sc.num_train = 1;
    sc.num_valid = 64;
    sc.num_test = 1;
    corpus = synth::generate_corpus(sc);
    model = ckpt::init_backbone(ckpt::ModelConfig{}, 7);
    for (auto task : {train::Task::Ser, train::Task::Asr})
      for (const auto& [name, e] : train::init_head(model.config(), task, 3)) model.set(name, e.tensor, e.layer);
  }
};

const EvalInputs& eval_inputs() {
  static const EvalInputs in;
  return in;
}

void BM_MatmulSerial(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(num::kernels::serial::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

void BM_MatmulParallel(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(num::kernels::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

void BM_MergeSerial(benchmark::State& state) {
  const auto& in = merge_inputs();
  for (auto _ : state) benchmark::DoNotOptimize(taskvec::serial::merge_layerwise(in.base, in.tvs, in.coeffs));
}

void BM_MergeParallel(benchmark::State& state) {
  const auto& in = merge_inputs();
  for (auto _ : state) benchmark::DoNotOptimize(taskvec::merge_layerwise(in.base, in.tvs, in.coeffs));
}

void BM_BatchEvalSerial(benchmark::State& state) {
  const auto& in = eval_inputs();
  for (auto _ : state) benchmark::DoNotOptimize(train::serial::run_model(in.model, in.corpus.valid, in.loss));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(in.corpus.valid.size()));
}

void BM_BatchEvalParallel(benchmark::State& state) {
  const auto& in = eval_inputs();
  for (auto _ : state) benchmark::DoNotOptimize(train::run_model(in.model, in.corpus.valid, in.loss));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(in.corpus.valid.size()));
}

}  // namespace

BENCHMARK(BM_MatmulSerial)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_MatmulParallel)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_MergeSerial)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_MergeParallel)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_BatchEvalSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BatchEvalParallel)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
