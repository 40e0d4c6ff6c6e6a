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

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#include "taskmerge/checkpoint/archive.hpp"
#include "taskmerge/cli/experiment.hpp"
#include "taskmerge/errors.hpp"
#include "taskmerge/json_util.hpp"
#include "taskmerge/model/encoder.hpp"
#include "taskmerge/model/heads.hpp"

namespace tmerge::cli {

namespace fs = std::filesystem;

std::string vector_set_name(VectorSet v) {
  switch (v) {
    case VectorSet::None: return "none";
    case VectorSet::Asr: return "asr";
    case VectorSet::Ser: return "ser";
    case VectorSet::Dual: return "dual";
  }
  return "dual";
}

VectorSet parse_vector_set(const std::string& s) {
  if (s == "none") return VectorSet::None;
  if (s == "asr") return VectorSet::Asr;
  if (s == "ser") return VectorSet::Ser;
  if (s == "dual") return VectorSet::Dual;
  throw ValidationError("unknown vector set '" + s + "' (expected none, asr, ser or dual)");
}

std::string domain_name(Domain d) { return d == Domain::In ? "in" : "out"; }

Domain parse_domain(const std::string& s) {
  if (s == "in") return Domain::In;
  if (s == "out") return Domain::Out;
  throw ValidationError("unknown domain '" + s + "' (expected in or out)");
}

// ---- config -----------------------------------------------------------------

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  synth.validate();
  auto fail = [](const std::string& m) { throw ValidationError(m); };
  if (model.input_dim != synth.input_dim) fail("model.input_dim must equal synth.input_dim");
  if (model.vocab_size != synth.vocab_size) fail("model.vocab_size must equal synth.vocab_size");
  if (model.num_classes != synth.num_classes) fail("model.num_classes must equal synth.num_classes");
  if (synth.frames_min < model.frontend_kernel) fail("synth.frames_min must be >= model.frontend_kernel");
  if (model::frontend_frames(model, static_cast<std::size_t>(synth.frames_max)) >
      static_cast<std::size_t>(model.max_frames)) {
    fail("synth.frames_max produces more than model.max_frames encoder frames");
  }
  if (output_dir.empty()) fail("output_dir must not be empty");
  if (!(ood_shift > 0.0)) fail("ood_shift must be > 0");
  if (mtl_backbone_multiplier && !(*mtl_backbone_multiplier >= 0.0)) fail("mtl_backbone_multiplier must be >= 0");
  if (adaltm_lr && !(*adaltm_lr > 0.0)) fail("adaltm_lr must be > 0");
  if (bootstrap.n_resamples < 1) fail("bootstrap.n_resamples must be >= 1");
  if (!(bootstrap.level > 0.0 && bootstrap.level < 1.0)) fail("bootstrap.level must lie in (0, 1)");
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"model", model.to_json()},
          {"train", train.to_json()},
          {"synth", synth.to_json()},
          {"strategy", taskvec::strategy_name(strategy)},
          {"vectors", vector_set_name(vectors)},
          {"domain", domain_name(domain)},
          {"output_dir", output_dir},
          {"base_seed", base_seed},
          {"ood_shift", ood_shift},
          {"mtl_backbone_multiplier",
           mtl_backbone_multiplier ? nlohmann::json(*mtl_backbone_multiplier) : nlohmann::json(nullptr)},
          {"adaltm_lr", adaltm_lr ? nlohmann::json(*adaltm_lr) : nlohmann::json(nullptr)},
          {"bootstrap",
           {{"n_resamples", bootstrap.n_resamples}, {"level", bootstrap.level}, {"seed", bootstrap.seed}}}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  const std::string ctx = "config";
  json_util::require_keys(j,
                          {"model", "train", "synth", "strategy", "vectors", "domain", "output_dir", "base_seed",
                           "ood_shift", "mtl_backbone_multiplier", "adaltm_lr", "bootstrap"},
                          ctx);
  ExperimentConfig c;
  if (j.contains("model")) c.model = ckpt::ModelConfig::from_json(j.at("model"));
  if (j.contains("train")) c.train = train::TrainConfig::from_json(j.at("train"));
  if (j.contains("synth")) c.synth = synth::SynthConfig::from_json(j.at("synth"));
  std::string s = taskvec::strategy_name(c.strategy), v = vector_set_name(c.vectors), d = domain_name(c.domain);
  json_util::read_opt(j, "strategy", s, ctx);
  json_util::read_opt(j, "vectors", v, ctx);
  json_util::read_opt(j, "domain", d, ctx);
  c.strategy = taskvec::parse_strategy(s);
  c.vectors = parse_vector_set(v);
  c.domain = parse_domain(d);
  json_util::read_opt(j, "output_dir", c.output_dir, ctx);
  json_util::read_opt(j, "base_seed", c.base_seed, ctx);
  json_util::read_opt(j, "ood_shift", c.ood_shift, ctx);
  if (j.contains("mtl_backbone_multiplier") && !j.at("mtl_backbone_multiplier").is_null()) {
    double m = 0.0;
    json_util::read_opt(j, "mtl_backbone_multiplier", m, ctx);
    c.mtl_backbone_multiplier = m;
  }
  if (j.contains("adaltm_lr") && !j.at("adaltm_lr").is_null()) {
    double lr = 0.0;
    json_util::read_opt(j, "adaltm_lr", lr, ctx);
    c.adaltm_lr = lr;
  }
  if (j.contains("bootstrap")) {
    const auto& b = j.at("bootstrap");
    json_util::require_keys(b, {"n_resamples", "level", "seed"}, "config.bootstrap");
    json_util::read_opt(b, "n_resamples", c.bootstrap.n_resamples, "config.bootstrap");
    json_util::read_opt(b, "level", c.bootstrap.level, "config.bootstrap");
    json_util::read_opt(b, "seed", c.bootstrap.seed, "config.bootstrap");
  }
  c.validate();
  return c;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ValidationError("override '" + assignment + "' must look like dotted.path=value");
  }
  const std::string path = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ValidationError("override path '" + path + "' has an empty component");
    if (!node->is_object()) throw ValidationError("override path '" + path + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    auto it = node->find(key);
    if (it == node->end()) throw ValidationError("override path '" + path + "': unknown key '" + key + "'");
    node = &*it;
    start = dot + 1;
  }
}

ExperimentConfig resolve_config(const std::optional<fs::path>& config_path, const std::vector<std::string>& overrides) {
  nlohmann::json doc = ExperimentConfig{}.to_json();
  if (config_path) {
    const auto file = nlohmann::json::parse(ckpt::read_text_file(*config_path), nullptr, false);
    if (file.is_discarded()) throw ValidationError("config file " + config_path->string() + " is not valid JSON");
    if (!file.is_object()) throw ValidationError("config file " + config_path->string() + " must hold an object");
    // Section objects are merged key by key so a file can set a single field.
    for (const auto& [key, value] : file.items()) {
      if (value.is_object() && doc.contains(key) && doc[key].is_object()) {
        for (const auto& [k2, v2] : value.items()) doc[key][k2] = v2;
      } else {
        doc[key] = value;
      }
    }
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return ExperimentConfig::from_json(doc);
}

// ---- workspace ----------------------------------------------------------------

Workspace::Workspace(ExperimentConfig cfg) : cfg_(std::move(cfg)), dir_(cfg_.output_dir) {
  cfg_.validate();
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw IoError("cannot create experiment directory " + dir_.string() + ": " + ec.message());
}

void Workspace::write_config() const { ckpt::write_text_file(path("config.json"), cfg_.to_json().dump(2) + "\n"); }

void Workspace::log(const std::string& line) const {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &tm);
  std::ofstream(path("log.txt"), std::ios::app) << stamp << ' ' << line << '\n';
  std::cout << line << std::endl;
}

synth::SynthConfig Workspace::synth_config(Domain d) const {
  synth::SynthConfig s = cfg_.synth;
  if (d == Domain::Out) s.domain_shift = cfg_.ood_shift;
  return s;
}

fs::path Workspace::corpus_prefix(Domain d) const { return path("data/corpus_" + domain_name(d)); }

fs::path Workspace::finetune_prefix(train::Task t, Domain d) const {
  return path("models/ft_" + train::task_name(t) + "_" + domain_name(d));
}

fs::path Workspace::vector_prefix(train::Task t, Domain d) const {
  return path("vectors/tv_" + train::task_name(t) + "_" + domain_name(d));
}

namespace {

void require_artifact(const fs::path& prefix, const std::string& producer) {
  if (!fs::exists(ckpt::archive_paths(prefix).manifest)) {
    throw IoError("missing " + ckpt::archive_paths(prefix).manifest.string() + " (run '" + producer + "' first)");
  }
}

fs::path with_suffix(const fs::path& prefix, const std::string& suffix) { return fs::path(prefix.string() + suffix); }

std::string task_flags(train::Task t, Domain d) { return "--task " + train::task_name(t) + " --domain " + domain_name(d); }

ckpt::LayeredCheckpoint attach_head(ckpt::LayeredCheckpoint model, const std::optional<fs::path>& head_from) {
  if (!head_from) return model;
  const auto donor = ckpt::load_checkpoint(*head_from);
  if (!(donor.config() == model.config())) {
    throw CompatibilityError("head checkpoint " + head_from->string() + " has a different model config");
  }
  const auto head = donor.head();
  if (head.empty()) throw ValidationError("checkpoint " + head_from->string() + " carries no head parameters");
  for (const auto& [name, e] : head) model.set(name, e.tensor, e.layer);
  return model;
}

}  // namespace

ckpt::LayeredCheckpoint Workspace::load_base() const {
  require_artifact(path("base"), "init-base");
  return ckpt::load_checkpoint(path("base"));
}

synth::Corpus Workspace::load_corpus(Domain d) const {
  require_artifact(corpus_prefix(d), "gen-data --domain " + domain_name(d));
  return synth::load_corpus(corpus_prefix(d));
}

ckpt::LayeredCheckpoint Workspace::load_finetuned(train::Task t, Domain d) const {
  require_artifact(finetune_prefix(t, d), "finetune " + task_flags(t, d));
  return ckpt::load_checkpoint(finetune_prefix(t, d));
}

taskvec::TaskVector Workspace::load_vector(train::Task t, Domain d) const {
  require_artifact(vector_prefix(t, d), "extract " + task_flags(t, d));
  return taskvec::load_task_vector(vector_prefix(t, d));
}

std::vector<taskvec::TaskVector> Workspace::load_vectors(VectorSet set, Domain asr_domain) const {
  std::vector<taskvec::TaskVector> out;
  if (set == VectorSet::Asr || set == VectorSet::Dual) out.push_back(load_vector(train::Task::Asr, asr_domain));
  if (set == VectorSet::Ser || set == VectorSet::Dual) out.push_back(load_vector(train::Task::Ser, Domain::In));
  return out;
}

// ---- verbs ------------------------------------------------------------------

namespace {

train::EpochHook epoch_logger(const Workspace& ws, const std::string& what) {
  return [&ws, what](const train::EpochRecord& r) {
    std::ostringstream os;
    os << what << " epoch " << r.epoch << " valid_loss " << r.valid_loss;
    for (const auto& [k, v] : r.valid_metrics) os << ' ' << k << ' ' << v;
    ws.log(os.str());
  };
}

}  // namespace

void cmd_init_base(const Workspace& ws) {
  const auto base = ckpt::init_backbone(ws.config().model, ws.config().base_seed);
  ckpt::save_checkpoint(base, ws.path("base"));
  ws.log("init-base: " + std::to_string(base.size()) + " tensors, fingerprint " + base.fingerprint().substr(0, 16));
}

void cmd_gen_data(const Workspace& ws, Domain d) {
  const auto sc = ws.synth_config(d);
  const auto corpus = synth::generate_corpus(sc);
  synth::save_corpus(corpus, ws.corpus_prefix(d));
  const auto stats = synth::corpus_stats(corpus, sc.num_classes, sc.vocab_size);
  ckpt::write_text_file(with_suffix(ws.corpus_prefix(d), ".stats.json"), stats.to_json().dump(2) + "\n");
  ws.log("gen-data " + domain_name(d) + ": " + std::to_string(corpus.train.size()) + "/" +
         std::to_string(corpus.valid.size()) + "/" + std::to_string(corpus.test.size()) + " utterances");
}

void cmd_finetune(const Workspace& ws, train::Task task, Domain d) {
  const auto base = ws.load_base();
  const auto corpus = ws.load_corpus(d);
  const std::string what = "finetune " + train::task_name(task) + "/" + domain_name(d);
  const auto res = train::finetune_task(base, corpus, task, ws.config().train, epoch_logger(ws, what));
  const auto prefix = ws.finetune_prefix(task, d);
  ckpt::save_checkpoint(res.model, prefix);
  ckpt::write_text_file(with_suffix(prefix, ".metrics.csv"), res.history.to_csv());
  ws.log(what + ": best epoch " + std::to_string(res.history.best_epoch));
}

void cmd_extract(const Workspace& ws, train::Task task, Domain d) {
  const auto tv = taskvec::extract_task_vector(ws.load_finetuned(task, d), ws.load_base());
  taskvec::save_task_vector(tv, ws.vector_prefix(task, d));
  ws.log("extract " + train::task_name(task) + "/" + domain_name(d) + ": max |delta| " + std::to_string(tv.max_abs()));
}

void cmd_extract_paths(const fs::path& ft, const fs::path& base, const fs::path& out) {
  const auto tv = taskvec::extract_task_vector(ckpt::load_checkpoint(ft), ckpt::load_checkpoint(base));
  taskvec::save_task_vector(tv, out);
  std::cout << "max_abs_delta " << tv.max_abs() << std::endl;
}

void cmd_merge(const Workspace& ws, const taskvec::MergeCoefficients& coeffs, const std::optional<fs::path>& head_from,
               const fs::path& out) {
  const auto base = ws.load_base();
  const auto tvs = ws.load_vectors(ws.config().vectors, ws.config().domain);
  auto merged = tvs.empty() ? base : taskvec::merge_layerwise(base, tvs, coeffs);
  merged = attach_head(std::move(merged), head_from);
  ckpt::save_checkpoint(merged, out);
  ws.log("merge: wrote " + ckpt::archive_paths(out).manifest.string());
}

void cmd_train_mtl(const Workspace& ws, bool static_init, const fs::path& out_prefix) {
  const auto base = ws.load_base();
  const auto corpus = ws.load_corpus(Domain::In);
  ckpt::LayeredCheckpoint init = base;
  if (static_init) {
    init = taskvec::merge_static_global(base, ws.load_vectors(VectorSet::Dual, Domain::In),
                                        taskvec::MergeCoefficients::kInit);
  }
  const std::string what = static_init ? "train-mtl static-init" : "train-mtl";
  const auto res =
      train::train_mtl(init, corpus, ws.config().train, ws.config().mtl_backbone_multiplier, epoch_logger(ws, what));
  ckpt::save_checkpoint(res.model, out_prefix);
  ckpt::write_text_file(with_suffix(out_prefix, ".metrics.csv"), res.history.to_csv());
  ws.log(what + ": best epoch " + std::to_string(res.history.best_epoch));
}

nlohmann::json trajectory_json(const std::vector<std::string>& vector_tasks,
                               const std::vector<train::CoefficientSnapshot>& snapshots) {
  nlohmann::json snaps = nlohmann::json::array();
  std::string strategy;
  for (const auto& s : snapshots) {
    strategy = taskvec::strategy_name(s.coeffs.strategy);
    snaps.push_back({{"step", s.step}, {"lambdas", s.coeffs.lambdas}, {"alpha", s.alpha}});
  }
  return {{"strategy", strategy}, {"vectors", vector_tasks}, {"snapshots", snaps}};
}

std::string coefficients_csv(const nlohmann::json& trajectory) {
  try {
    const auto tasks = trajectory.at("vectors").get<std::vector<std::string>>();
    auto column_of = [&](const std::string& task) -> int {
      for (std::size_t v = 0; v < tasks.size(); ++v)
        if (tasks[v] == task) return static_cast<int>(v);
      return -1;
    };
    const int asr = column_of("asr"), ser = column_of("ser");
    std::ostringstream os;
    os << "step,layer,lambda_asr,lambda_ser,alpha_agg\n";
    char buf[40];
    auto num = [&](double x) {
      std::snprintf(buf, sizeof buf, "%.10g", x);
      return std::string(buf);
    };
    for (const auto& snap : trajectory.at("snapshots")) {
      const auto lambdas = snap.at("lambdas").get<std::vector<std::vector<double>>>();
      const auto alpha = snap.at("alpha").get<std::vector<double>>();
      const int step = snap.at("step").get<int>();
      auto lambda_at = [&](int v, std::size_t layer) -> std::string {
        if (v < 0) return "";
        const auto& row = lambdas.at(static_cast<std::size_t>(v));
        return num(row.size() == 1 ? row[0] : row.at(layer));
      };
      for (std::size_t layer = 0; layer <= alpha.size(); ++layer) {
        os << step << ',' << layer << ',' << lambda_at(asr, layer) << ',' << lambda_at(ser, layer) << ','
           << (layer == 0 ? "" : num(alpha[layer - 1])) << '\n';
      }
    }
    return os.str();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed coefficient trajectory: ") + e.what());
  }
}

void cmd_train_merge(const Workspace& ws, VectorSet set, taskvec::Strategy strategy, Domain asr_domain,
                     const fs::path& out_dir) {
  const auto base = ws.load_base();
  const auto tvs = ws.load_vectors(set, asr_domain);
  const auto corpus = ws.load_corpus(Domain::In);
  const std::string what = "train-merge " + vector_set_name(set) + "/" + taskvec::strategy_name(strategy) + "/" +
                           domain_name(asr_domain);
  train::TrainConfig cfg = ws.config().train;
  if (ws.config().adaltm_lr) cfg.lr = *ws.config().adaltm_lr;
  const auto res = train::train_adaltm(base, tvs, corpus, strategy, cfg, epoch_logger(ws, what));
  std::vector<std::string> tasks;
  for (const auto& tv : tvs) tasks.push_back(tv.task);
  const auto traj = trajectory_json(tasks, res.snapshots);
  ckpt::save_checkpoint(res.model, out_dir / "model");
  ckpt::write_text_file(out_dir / "metrics.csv", res.history.to_csv());
  ckpt::write_text_file(out_dir / "trajectory.json", traj.dump(2) + "\n");
  ckpt::write_text_file(out_dir / "coefficients.csv", coefficients_csv(traj));
  nlohmann::json best = res.coeffs.to_json();
  best["vectors"] = tasks;
  best["alpha"] = model::aggregation_weights(res.head.at("agg.raw").tensor);
  best["best_epoch"] = res.history.best_epoch;
  ckpt::write_text_file(out_dir / "coefficients.json", best.dump(2) + "\n");
  ws.log(what + ": best epoch " + std::to_string(res.history.best_epoch));
}

nlohmann::json cmd_eval(const Workspace& ws, const fs::path& model, const std::optional<fs::path>& head_from,
                        const fs::path& out) {
  const auto m = attach_head(ckpt::load_checkpoint(model), head_from);
  if (m.head().empty()) throw ValidationError("checkpoint " + model.string() + " has no task head to evaluate");
  const auto corpus = ws.load_corpus(Domain::In);
  const auto report = train::evaluate_model(m, corpus.test, ws.config().bootstrap).to_json();
  ckpt::write_text_file(out, report.dump(2) + "\n");
  return report;
}

void cmd_export_coeffs(const fs::path& trajectory, const fs::path& csv) {
  const auto doc = nlohmann::json::parse(ckpt::read_text_file(trajectory), nullptr, false);
  if (doc.is_discarded()) throw FormatError(trajectory.string() + " is not valid JSON");
  ckpt::write_text_file(csv, coefficients_csv(doc));
}

}  // namespace tmerge::cli
