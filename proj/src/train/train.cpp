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

#include "taskmerge/train/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <sstream>

#include "taskmerge/errors.hpp"
#include "taskmerge/json_util.hpp"
#include "taskmerge/model/encoder.hpp"
#include "taskmerge/model/heads.hpp"
#include "taskmerge/num/ops.hpp"
#include "taskmerge/num/rng.hpp"

namespace tmerge::train {

using num::Tensor;
using num::Var;

// ---- config -----------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ValidationError("train config: " + what); };
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be > 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (epochs < 0) fail("epochs must be >= 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) fail("eps must be > 0");
  if (!(dlr_backbone_multiplier >= 0.0)) fail("dlr_backbone_multiplier must be >= 0");
  if (!(mtl_loss_mix >= 0.0 && mtl_loss_mix <= 1.0)) fail("mtl_loss_mix must lie in [0, 1]");
  if (!(cb_beta >= 0.0 && cb_beta < 1.0)) fail("cb_beta must lie in [0, 1)");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) fail("label_smoothing must lie in [0, 1)");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"weight_decay", weight_decay},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"seed", seed},
          {"dlr_backbone_multiplier", dlr_backbone_multiplier},
          {"mtl_loss_mix", mtl_loss_mix},
          {"cb_beta", cb_beta},
          {"label_smoothing", label_smoothing}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  const std::string ctx = "train";
  json_util::require_keys(j,
                          {"lr", "batch_size", "epochs", "weight_decay", "beta1", "beta2", "eps", "seed",
                           "dlr_backbone_multiplier", "mtl_loss_mix", "cb_beta", "label_smoothing"},
                          ctx);
  TrainConfig c;
  json_util::read_opt(j, "lr", c.lr, ctx);
  json_util::read_opt(j, "batch_size", c.batch_size, ctx);
  json_util::read_opt(j, "epochs", c.epochs, ctx);
  json_util::read_opt(j, "weight_decay", c.weight_decay, ctx);
  json_util::read_opt(j, "beta1", c.beta1, ctx);
  json_util::read_opt(j, "beta2", c.beta2, ctx);
  json_util::read_opt(j, "eps", c.eps, ctx);
  json_util::read_opt(j, "seed", c.seed, ctx);
  json_util::read_opt(j, "dlr_backbone_multiplier", c.dlr_backbone_multiplier, ctx);
  json_util::read_opt(j, "mtl_loss_mix", c.mtl_loss_mix, ctx);
  json_util::read_opt(j, "cb_beta", c.cb_beta, ctx);
  json_util::read_opt(j, "label_smoothing", c.label_smoothing, ctx);
  c.validate();
  return c;
}

// ---- losses -----------------------------------------------------------------

std::vector<double> class_balance_weights(const std::vector<long>& counts, double beta) {
  if (counts.empty()) throw ValidationError("class_balance_weights needs at least one class");
  if (!(beta >= 0.0 && beta < 1.0)) throw ValidationError("class-balance beta must lie in [0, 1)");
  std::vector<double> w(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] < 0) throw ValidationError("class counts must be nonnegative");
    const double n = static_cast<double>(std::max<long>(counts[c], 1));
    w[c] = (1.0 - beta) / (1.0 - std::pow(beta, n));
  }
  if (std::all_of(w.begin(), w.end(), [&](double x) { return x == w.front(); })) {
    return std::vector<double>(w.size(), 1.0);
  }
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
  for (double& x : w) x /= mean;
  return w;
}

Var class_balanced_soft_ce(const Var& logits, const std::vector<double>& soft_label,
                           const std::vector<double>& weights) {
  if (logits.value().rank() != 2 || logits.shape()[0] != 1) {
    throw ShapeError("class_balanced_soft_ce needs logits [1, C], got " + num::shape_str(logits.shape()));
  }
  const std::size_t c = logits.shape()[1];
  if (soft_label.size() != c || weights.size() != c) {
    throw ValidationError("soft label / weights length does not match " + std::to_string(c) + " classes");
  }
  double total = 0.0;
  for (double p : soft_label) {
    if (!(p >= 0.0)) throw ValidationError("soft label has a negative or NaN entry");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("soft label sums to " + std::to_string(total) + ", not 1");
  std::vector<double> coef(c);
  for (std::size_t i = 0; i < c; ++i) coef[i] = weights[i] * soft_label[i];
  num::Graph& g = logits.graph();
  const Var lsm = num::log_softmax(logits, 1);
  return num::scale(num::sum(num::mul(lsm, g.constant(Tensor({1, c}, std::move(coef))))), -1.0);
}

Var asr_frame_ce(const Var& frame_logits, const std::vector<int>& labels) {
  if (frame_logits.value().rank() != 2) {
    throw ShapeError("asr_frame_ce needs [frames, vocab], got " + num::shape_str(frame_logits.shape()));
  }
  const std::size_t t = frame_logits.shape()[0], v = frame_logits.shape()[1];
  if (labels.size() != t) {
    throw ShapeError("asr_frame_ce: " + std::to_string(labels.size()) + " labels for " + std::to_string(t) +
                     " frames");
  }
  if (t == 0) throw ShapeError("asr_frame_ce needs at least one frame");
  std::vector<double> onehot(t * v, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= v) {
      throw ValidationError("token label " + std::to_string(labels[i]) + " outside vocabulary of " +
                            std::to_string(v));
    }
    onehot[i * v + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  num::Graph& g = frame_logits.graph();
  const Var lsm = num::log_softmax(frame_logits, 1);
  return num::scale(num::sum(num::mul(lsm, g.constant(Tensor({t, v}, std::move(onehot))))),
                    -1.0 / static_cast<double>(t));
}

std::vector<double> smoothed_target(const std::vector<double>& soft_label, double eps) {
  if (!(eps >= 0.0 && eps < 1.0)) throw ValidationError("label smoothing must lie in [0, 1)");
  std::vector<double> out(soft_label.size());
  const double spread = eps / static_cast<double>(soft_label.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - eps) * soft_label[i] + spread;
  return out;
}

std::vector<int> output_frame_labels(const ckpt::ModelConfig& cfg, const std::vector<int>& input_labels) {
  const std::size_t frames = model::frontend_frames(cfg, input_labels.size());
  std::vector<int> out(frames);
  const auto stride = static_cast<std::size_t>(cfg.frontend_stride);
  const auto center = static_cast<std::size_t>(cfg.frontend_kernel / 2);
  for (std::size_t t = 0; t < frames; ++t) out[t] = input_labels.at(t * stride + center);
  return out;
}

std::vector<long> emotion_counts(const std::vector<synth::Utterance>& utts, int num_classes) {
  std::vector<long> counts(static_cast<std::size_t>(num_classes), 0);
  for (const auto& u : utts) {
    if (u.emotion < 0 || u.emotion >= num_classes) throw ValidationError("emotion label out of range");
    counts[static_cast<std::size_t>(u.emotion)] += 1;
  }
  return counts;
}

// ---- optimizer --------------------------------------------------------------

void optimizer_step(TrainableSet& params, const GradMap& grads, OptimizerState& state, const TrainConfig& cfg) {
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    if (g.shape() != p.value.shape()) {
      throw ShapeError("gradient of '" + name + "' is " + num::shape_str(g.shape()) + ", parameter is " +
                       num::shape_str(p.value.shape()));
    }
    const std::size_t n = g.numel();
    auto m_it = state.m.find(name);
    if (m_it == state.m.end()) m_it = state.m.emplace(name, Tensor::zeros(g.shape())).first;
    auto v_it = state.v.find(name);
    if (v_it == state.v.end()) v_it = state.v.emplace(name, Tensor::zeros(g.shape())).first;
    const auto pd = p.value.data(), gd = g.data(), md = m_it->second.data(), vd = v_it->second.data();
    std::vector<double> np(n), nm(n), nv(n);
    const double lr = cfg.lr * p.lr_multiplier;
    const double decay = p.decay ? lr * cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nm[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
      nv[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
      const double decayed = pd[i] - decay * pd[i];
      np[i] = decayed - lr * (nm[i] / bc1) / (std::sqrt(nv[i] / bc2) + cfg.eps);
    }
    p.value = Tensor(g.shape(), std::move(np));
    m_it->second = Tensor(g.shape(), std::move(nm));
    v_it->second = Tensor(g.shape(), std::move(nv));
  }
}

// ---- histories --------------------------------------------------------------

namespace {

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

}  // namespace

std::string History::to_csv() const {
  std::ostringstream os;
  os << "epoch,split,loss,uar,precision,macro_f1,token_error_rate\n";
  for (const auto& r : epochs) {
    if (r.train_loss) os << r.epoch << ",train," << fmt(*r.train_loss) << ",,,,\n";
    os << r.epoch << ",valid," << fmt(r.valid_loss);
    for (const char* key : {"uar", "precision", "macro_f1", "token_error_rate"}) {
      os << ',';
      auto it = r.valid_metrics.find(key);
      if (it != r.valid_metrics.end()) os << fmt(it->second);
    }
    os << '\n';
  }
  return os.str();
}

std::vector<double> History::valid_losses() const {
  std::vector<double> out;
  for (const auto& r : epochs) out.push_back(r.valid_loss);
  return out;
}

std::size_t select_checkpoint(const std::vector<double>& valid_losses) {
  if (valid_losses.empty()) throw ValidationError("select_checkpoint needs a nonempty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < valid_losses.size(); ++i)
    if (valid_losses[i] < valid_losses[best]) best = i;
  return best;
}

// ---- evaluation -------------------------------------------------------------

double SplitOutputs::mean_ser_loss() const {
  return ser_loss.empty() ? 0.0 : std::accumulate(ser_loss.begin(), ser_loss.end(), 0.0) / ser_loss.size();
}

double SplitOutputs::mean_asr_loss() const {
  return asr_loss.empty() ? 0.0 : std::accumulate(asr_loss.begin(), asr_loss.end(), 0.0) / asr_loss.size();
}

namespace {

// Runs fn(i) for i in [0, n) across threads and rethrows the first failure.
template <typename Fn>
void parallel_for(std::size_t n, Fn fn) {
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      fn(i);
    } catch (...) {
#pragma omp critical(taskmerge_parallel_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

LossSetup plain_loss(int num_classes) { return {std::vector<double>(static_cast<std::size_t>(num_classes), 1.0), 0.0}; }

Var ser_loss_of(const Var& logits, const synth::Utterance& u, const LossSetup& loss) {
  return class_balanced_soft_ce(logits, smoothed_target(u.soft_label, loss.label_smoothing), loss.class_weights);
}

void require_splits(const synth::Corpus& corpus) {
  if (corpus.train.empty()) throw ValidationError("training split is empty");
  if (corpus.valid.empty()) throw ValidationError("validation split is empty");
}

}  // namespace

namespace {

SplitOutputs prepare_outputs(const ckpt::LayeredCheckpoint& model, std::size_t n) {
  SplitOutputs out;
  out.has_ser = model.contains("ser.weight");
  out.has_asr = model.contains("asr.weight");
  out.results.resize(n);
  if (out.has_ser) out.ser_loss.resize(n);
  if (out.has_asr) out.asr_loss.resize(n);
  return out;
}

void run_one(const ckpt::LayeredCheckpoint& model, const synth::Utterance& u, const LossSetup& loss,
             SplitOutputs& out, std::size_t i) {
  const auto& cfg = model.config();
  num::Graph g;
  const auto w = model::bind_params(g, model.params(), false);
  const auto stack = model::encode(cfg, g.constant(u.features), w);
  auto& r = out.results[i];
  r.emotion = u.emotion;
  if (out.has_ser) {
    const Var logits = model::ser_forward(model::weighted_sum(stack, w.at("agg.raw")), w);
    r.predicted = model::argmax_rows(logits.value()).front();
    out.ser_loss[i] = ser_loss_of(logits, u, loss).value().item();
  }
  if (out.has_asr) {
    const Var logits = model::asr_forward(stack.states.back(), w);
    r.ref_tokens = u.transcript();
    r.hyp_tokens = model::greedy_decode(logits.value());
    out.asr_loss[i] = asr_frame_ce(logits, output_frame_labels(cfg, u.frame_tokens)).value().item();
  }
}

}  // namespace

SplitOutputs run_model(const ckpt::LayeredCheckpoint& model, const std::vector<synth::Utterance>& utts,
                       const LossSetup& loss) {
  auto out = prepare_outputs(model, utts.size());
  parallel_for(utts.size(), [&](std::size_t i) { run_one(model, utts[i], loss, out, i); });
  return out;
}

namespace serial {
SplitOutputs run_model(const ckpt::LayeredCheckpoint& model, const std::vector<synth::Utterance>& utts,
                       const LossSetup& loss) {
  auto out = prepare_outputs(model, utts.size());
  for (std::size_t i = 0; i < utts.size(); ++i) run_one(model, utts[i], loss, out, i);
  return out;
}
}  // namespace serial

metrics::EvalReport evaluate_model(const ckpt::LayeredCheckpoint& model, const std::vector<synth::Utterance>& utts,
                                   const metrics::BootstrapConfig& boot) {
  const auto out = run_model(model, utts, plain_loss(model.config().num_classes));
  return metrics::evaluate(out.results, model.config().num_classes, out.has_ser, out.has_asr, boot);
}

// ---- procedures -------------------------------------------------------------

std::string task_name(Task t) { return t == Task::Ser ? "ser" : "asr"; }

Task parse_task(const std::string& name) {
  if (name == "ser") return Task::Ser;
  if (name == "asr") return Task::Asr;
  throw ValidationError("unknown task '" + name + "' (expected ser or asr)");
}

ckpt::ParamMap init_head(const ckpt::ModelConfig& cfg, Task task, std::uint64_t seed) {
  const auto specs = task == Task::Ser ? ckpt::ser_head_specs(cfg) : ckpt::asr_head_specs(cfg);
  return ckpt::init_params(specs, cfg, num::Rng(seed, num::Rng::hash_label("head/" + task_name(task))).next_u64());
}

namespace {

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  num::Rng(seed, num::Rng::hash_label("batches")).fork(static_cast<std::uint64_t>(epoch)).shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(batch_size))));
  }
  return out;
}

Var mean_of(const std::vector<Var>& terms) {
  Var acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = num::add(acc, terms[i]);
  return num::scale(acc, 1.0 / static_cast<double>(terms.size()));
}

// Model training with backbone and heads as leaves; ser_w / asr_w weight the
// two task losses (0 drops a task).
TrainResult train_model(ckpt::LayeredCheckpoint model, const synth::Corpus& corpus, const TrainConfig& cfg,
                        double backbone_multiplier, double ser_w, double asr_w, const EpochHook& hook) {
  cfg.validate();
  require_splits(corpus);
  const auto& mcfg = model.config();
  const LossSetup loss{class_balance_weights(emotion_counts(corpus.train, mcfg.num_classes), cfg.cb_beta),
                       cfg.label_smoothing};
  const bool use_ser = ser_w > 0.0, use_asr = asr_w > 0.0;

  std::vector<std::vector<int>> frame_labels;
  if (use_asr)
    for (const auto& u : corpus.train) frame_labels.push_back(output_frame_labels(mcfg, u.frame_tokens));

  auto validate_model = [&](int epoch, std::optional<double> train_loss) {
    const auto out = run_model(model, corpus.valid, loss);
    EpochRecord r;
    r.epoch = epoch;
    r.train_loss = train_loss;
    r.valid_loss = (use_ser ? ser_w * out.mean_ser_loss() : 0.0) + (use_asr ? asr_w * out.mean_asr_loss() : 0.0);
    r.valid_metrics = metrics::point_metrics(out.results, mcfg.num_classes, use_ser, use_asr);
    return r;
  };

  TrainResult result;
  result.model = model;
  result.history.epochs.push_back(validate_model(0, std::nullopt));
  if (hook) hook(result.history.epochs.back());

  TrainableSet trainable;
  for (const auto& [name, e] : model.params()) {
    trainable[name] = {e.tensor, e.layer >= 0 ? backbone_multiplier : 1.0, name != "agg.raw"};
  }
  OptimizerState opt;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (const auto& batch : epoch_batches(corpus.train.size(), cfg.batch_size, cfg.seed, epoch)) {
      num::Graph g;
      num::VarMap w;
      for (const auto& [name, p] : trainable) w.emplace(name, g.parameter(p.value, true));
      std::vector<Var> terms;
      for (std::size_t i : batch) {
        const auto& u = corpus.train[i];
        const auto stack = model::encode(mcfg, g.constant(u.features), w);
        Var term;
        if (use_ser) {
          const Var l = ser_loss_of(model::ser_forward(model::weighted_sum(stack, w.at("agg.raw")), w), u, loss);
          term = ser_w == 1.0 ? l : num::scale(l, ser_w);
        }
        if (use_asr) {
          Var l = asr_frame_ce(model::asr_forward(stack.states.back(), w), frame_labels[i]);
          if (asr_w != 1.0) l = num::scale(l, asr_w);
          term = term.valid() ? num::add(term, l) : l;
        }
        terms.push_back(term);
      }
      const Var batch_loss = mean_of(terms);
      const auto grads = g.backward(batch_loss);
      GradMap named;
      for (const auto& [name, v] : w) named.emplace(name, grads.of(v));
      optimizer_step(trainable, named, opt, cfg);
      loss_sum += batch_loss.value().item() * static_cast<double>(batch.size());
    }
    for (const auto& [name, p] : trainable) model.set(name, p.value);
    result.history.epochs.push_back(validate_model(epoch, loss_sum / static_cast<double>(corpus.train.size())));
    if (hook) hook(result.history.epochs.back());
    if (select_checkpoint(result.history.valid_losses()) == static_cast<std::size_t>(epoch)) result.model = model;
  }
  result.history.best_epoch = static_cast<int>(select_checkpoint(result.history.valid_losses()));
  return result;
}

ckpt::LayeredCheckpoint with_heads(const ckpt::LayeredCheckpoint& base, const std::vector<ckpt::ParamMap>& heads,
                                   const std::string& task) {
  ckpt::LayeredCheckpoint out(base.config(), task);
  for (const auto& [name, e] : base.backbone()) out.set(name, e.tensor, e.layer);
  for (const auto& h : heads)
    for (const auto& [name, e] : h) out.set(name, e.tensor, e.layer);
  return out;
}

}  // namespace

TrainResult finetune_task(const ckpt::LayeredCheckpoint& base, const synth::Corpus& corpus, Task task,
                          const TrainConfig& cfg, const EpochHook& hook) {
  const auto model = with_heads(base, {init_head(base.config(), task, cfg.seed)}, task_name(task));
  return train_model(model, corpus, cfg, cfg.dlr_backbone_multiplier, task == Task::Ser ? 1.0 : 0.0,
                     task == Task::Asr ? 1.0 : 0.0, hook);
}

TrainResult train_mtl(const ckpt::LayeredCheckpoint& init, const synth::Corpus& corpus, const TrainConfig& cfg,
                      std::optional<double> backbone_multiplier, const EpochHook& hook) {
  cfg.validate();
  const double mix = cfg.mtl_loss_mix;
  std::vector<ckpt::ParamMap> heads;
  if (mix > 0.0) heads.push_back(init_head(init.config(), Task::Ser, cfg.seed));
  if (mix < 1.0) heads.push_back(init_head(init.config(), Task::Asr, cfg.seed));
  const std::string task = mix == 1.0 ? "ser" : mix == 0.0 ? "asr" : "mtl";
  return train_model(with_heads(init, heads, task), corpus, cfg,
                     backbone_multiplier.value_or(cfg.dlr_backbone_multiplier), mix, 1.0 - mix, hook);
}

std::string coefficient_name(std::size_t v, std::size_t i) {
  return "lambda/" + std::to_string(v) + "/" + std::to_string(i);
}

namespace {

Var head_loss(const model::HiddenStack& stack, const num::VarMap& w, const synth::Utterance& u,
              const LossSetup& loss) {
  return ser_loss_of(model::ser_forward(model::weighted_sum(stack, w.at("agg.raw")), w), u, loss);
}

ckpt::LayeredCheckpoint merged_model(const ckpt::LayeredCheckpoint& base, const std::vector<taskvec::TaskVector>& tvs,
                                     const taskvec::MergeCoefficients& coeffs, const ckpt::ParamMap& head) {
  return with_heads(tvs.empty() ? base : taskvec::merge_layerwise(base, tvs, coeffs), {head}, "merged");
}

}  // namespace

AdaLtmBatchLoss adaltm_batch_loss(const ckpt::LayeredCheckpoint& base, const std::vector<taskvec::TaskVector>& tvs,
                                  const taskvec::MergeCoefficients& coeffs, const ckpt::ParamMap& head,
                                  const std::vector<synth::Utterance>& batch, const LossSetup& loss) {
  if (batch.empty()) throw ValidationError("adaltm_batch_loss needs a nonempty batch");
  num::Graph g;
  const auto cvars = taskvec::bind_coefficients(g, coeffs);
  num::VarMap w = tvs.empty() ? model::bind_params(g, base.backbone(), false)
                              : taskvec::merge_on_graph(g, base, tvs, coeffs, cvars);
  num::VarMap head_vars;
  for (const auto& [name, e] : head) {
    head_vars.emplace(name, g.parameter(e.tensor, true));
    w[name] = head_vars.at(name);
  }
  std::vector<Var> terms;
  for (const auto& u : batch) {
    terms.push_back(head_loss(model::encode(base.config(), g.constant(u.features), w), w, u, loss));
  }
  const Var total = mean_of(terms);
  const auto grads = g.backward(total);
  AdaLtmBatchLoss out;
  out.loss = total.value().item();
  for (std::size_t v = 0; v < cvars.size(); ++v)
    for (std::size_t i = 0; i < cvars[v].size(); ++i)
      if (grads.has(cvars[v][i])) out.grads.emplace(coefficient_name(v, i), grads.of(cvars[v][i]));
  for (const auto& [name, var] : head_vars) out.grads.emplace(name, grads.of(var));
  return out;
}

AdaLtmResult train_adaltm(const ckpt::LayeredCheckpoint& base, const std::vector<taskvec::TaskVector>& tvs,
                          const synth::Corpus& corpus, taskvec::Strategy strategy, const TrainConfig& cfg,
                          const EpochHook& hook) {
  cfg.validate();
  require_splits(corpus);
  taskvec::check_fresh(base, tvs);
  const auto& mcfg = base.config();
  const std::string base_fp = base.fingerprint();
  std::vector<std::string> tv_fps;
  for (const auto& tv : tvs) tv_fps.push_back(tv.fingerprint());

  const LossSetup loss{class_balance_weights(emotion_counts(corpus.train, mcfg.num_classes), cfg.cb_beta),
                       cfg.label_smoothing};
  taskvec::MergeCoefficients coeffs = taskvec::MergeCoefficients::init(strategy, tvs.size(), mcfg.num_layers);
  ckpt::ParamMap head = init_head(mcfg, Task::Ser, cfg.seed);
  const bool fixed_backbone = tvs.empty() || !coeffs.trainable();

  // Hidden states of a fixed backbone, computed once per split.
  using Stacks = std::vector<std::vector<Tensor>>;
  auto compute_stacks = [&](const ckpt::LayeredCheckpoint& m, const std::vector<synth::Utterance>& utts) {
    Stacks s(utts.size());
    parallel_for(utts.size(), [&](std::size_t i) { s[i] = model::encode_values(m, utts[i].features); });
    return s;
  };
  Stacks train_stacks, valid_stacks;
  if (fixed_backbone) {
    const auto m = tvs.empty() ? base : taskvec::merge_layerwise(base, tvs, coeffs);
    train_stacks = compute_stacks(m, corpus.train);
    valid_stacks = compute_stacks(m, corpus.valid);
  }
  auto bind_stack = [](num::Graph& g, const std::vector<Tensor>& states) {
    model::HiddenStack s;
    for (const auto& t : states) s.states.push_back(g.constant(t));
    return s;
  };

  auto validate_now = [&](int epoch, std::optional<double> train_loss) {
    EpochRecord r;
    r.epoch = epoch;
    r.train_loss = train_loss;
    std::vector<metrics::UtteranceResult> results(corpus.valid.size());
    std::vector<double> losses(corpus.valid.size());
    if (fixed_backbone) {
      parallel_for(corpus.valid.size(), [&](std::size_t i) {
        num::Graph g;
        const auto w = model::bind_params(g, head, false);
        const Var logits = model::ser_forward(model::weighted_sum(bind_stack(g, valid_stacks[i]), w.at("agg.raw")), w);
        results[i] = {corpus.valid[i].emotion, model::argmax_rows(logits.value()).front(), {}, {}};
        losses[i] = ser_loss_of(logits, corpus.valid[i], loss).value().item();
      });
    } else {
      const auto out = run_model(merged_model(base, tvs, coeffs, head), corpus.valid, loss);
      results = out.results;
      losses = out.ser_loss;
    }
    r.valid_loss = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
    r.valid_metrics = metrics::point_metrics(results, mcfg.num_classes, true, false);
    return r;
  };
  auto snapshot = [&](int step) {
    return CoefficientSnapshot{step, coeffs, model::aggregation_weights(head.at("agg.raw").tensor)};
  };

  AdaLtmResult result;
  result.coeffs = coeffs;
  result.head = head;
  result.snapshots.push_back(snapshot(0));
  result.history.epochs.push_back(validate_now(0, std::nullopt));
  if (hook) hook(result.history.epochs.back());

  TrainableSet trainable;
  for (const auto& [name, e] : head) trainable[name] = {e.tensor, 1.0, name != "agg.raw"};
  if (!fixed_backbone) {
    for (std::size_t v = 0; v < coeffs.lambdas.size(); ++v)
      for (std::size_t i = 0; i < coeffs.lambdas[v].size(); ++i)
        trainable[coefficient_name(v, i)] = {Tensor::scalar(coeffs.lambdas[v][i]), 1.0, false};
  }
  OptimizerState opt;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (const auto& batch : epoch_batches(corpus.train.size(), cfg.batch_size, cfg.seed, epoch)) {
      AdaLtmBatchLoss step;
      if (fixed_backbone) {
        num::Graph g;
        num::VarMap w;
        for (const auto& [name, e] : head) w.emplace(name, g.parameter(e.tensor, true));
        std::vector<Var> terms;
        for (std::size_t i : batch) terms.push_back(head_loss(bind_stack(g, train_stacks[i]), w, corpus.train[i], loss));
        const Var total = mean_of(terms);
        const auto grads = g.backward(total);
        step.loss = total.value().item();
        for (const auto& [name, v] : w) step.grads.emplace(name, grads.of(v));
      } else {
        std::vector<synth::Utterance> utts;
        utts.reserve(batch.size());
        for (std::size_t i : batch) utts.push_back(corpus.train[i]);
        step = adaltm_batch_loss(base, tvs, coeffs, head, utts, loss);
      }
      optimizer_step(trainable, step.grads, opt, cfg);
      for (auto& [name, e] : head) e.tensor = trainable.at(name).value;
      if (!fixed_backbone) {
        for (std::size_t v = 0; v < coeffs.lambdas.size(); ++v)
          for (std::size_t i = 0; i < coeffs.lambdas[v].size(); ++i)
            coeffs.lambdas[v][i] = trainable.at(coefficient_name(v, i)).value.item();
      }
      loss_sum += step.loss * static_cast<double>(batch.size());
    }
    result.snapshots.push_back(snapshot(epoch));
    result.history.epochs.push_back(validate_now(epoch, loss_sum / static_cast<double>(corpus.train.size())));
    if (hook) hook(result.history.epochs.back());
    if (select_checkpoint(result.history.valid_losses()) == static_cast<std::size_t>(epoch)) {
      result.coeffs = coeffs;
      result.head = head;
    }
  }
  result.history.best_epoch = static_cast<int>(select_checkpoint(result.history.valid_losses()));

  if (base.fingerprint() != base_fp) throw FreezeViolation("base checkpoint changed during coefficient training");
  for (std::size_t v = 0; v < tvs.size(); ++v) {
    if (tvs[v].fingerprint() != tv_fps[v]) {
      throw FreezeViolation("task vector '" + tvs[v].task + "' changed during coefficient training");
    }
  }
  result.model = merged_model(base, tvs, result.coeffs, result.head);
  return result;
}

}  // namespace tmerge::train
