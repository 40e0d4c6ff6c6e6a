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

#include <bit>
#include <set>

#include "doctest.h"
#include "taskmerge/checkpoint/archive.hpp"
#include "taskmerge/checkpoint/checkpoint.hpp"
#include "taskmerge/checkpoint/sha256.hpp"
#include "taskmerge/errors.hpp"
#include "test_util.hpp"

using namespace tmerge;
using namespace tmerge::ckpt;
using tmerge::testing::random_tensor;
using tmerge::testing::TempDir;

namespace {

LayeredCheckpoint full_model(std::uint64_t seed) {
  ModelConfig cfg;
  auto ckpt = init_backbone(cfg, seed);
  for (auto& [name, e] : init_params(ser_head_specs(cfg), cfg, seed)) ckpt.set(name, e.tensor, e.layer);
  return ckpt;
}

void expect_bitwise_equal(const LayeredCheckpoint& a, const LayeredCheckpoint& b) {
  REQUIRE(a.size() == b.size());
  for (const auto& [name, e] : a.params()) {
    REQUIRE(b.contains(name));
    CHECK(b.layer(name) == e.layer);
    CHECK(b.tensor(name).bitwise_equal(e.tensor));
  }
}

}  // namespace

TEST_CASE("sha256 matches the published test vectors") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("round trip: empty, single tensor, full model") {
  TempDir dir("ckpt_rt");
  SUBCASE("empty") {
    LayeredCheckpoint empty(ModelConfig{}, "empty");
    save_checkpoint(empty, dir / "empty");
    auto back = load_checkpoint(dir / "empty");
    CHECK(back.size() == 0);
    CHECK(back.fingerprint() == empty.fingerprint());
    CHECK(back.task() == "empty");
  }
  SUBCASE("single tensor") {
    LayeredCheckpoint one(ModelConfig{}, "one");
    one.set("w", num::Tensor::matrix({{1.5, -2.0}, {std::nextafter(1.0, 2.0), 1e-300}}), 3);
    save_checkpoint(one, dir / "one");
    auto back = load_checkpoint(dir / "one");
    expect_bitwise_equal(one, back);
    CHECK(back.fingerprint() == one.fingerprint());
  }
  SUBCASE("full model") {
    auto model = full_model(7);
    save_checkpoint(model, dir / "full");
    auto back = load_checkpoint(dir / "full");
    expect_bitwise_equal(model, back);
    CHECK(back.config() == model.config());
    CHECK(back.fingerprint() == model.fingerprint());
  }
}

TEST_CASE("saving twice yields byte-identical files") {
  TempDir dir("ckpt_det");
  auto model = full_model(3);
  save_checkpoint(model, dir / "a");
  save_checkpoint(model, dir / "b");
  CHECK(read_text_file(dir / "a.manifest.json") == read_text_file(dir / "b.manifest.json"));
  CHECK(read_text_file(dir / "a.bin") == read_text_file(dir / "b.bin"));
}

TEST_CASE("manifest carries the documented fields") {
  TempDir dir("ckpt_fields");
  auto model = full_model(1);
  save_checkpoint(model, dir / "m");
  auto j = nlohmann::json::parse(read_text_file(dir / "m.manifest.json"));
  CHECK(j["format_version"] == 1);
  CHECK(j["dtype"] == "f64");
  CHECK(j["kind"] == "checkpoint");
  CHECK(j["meta"]["fingerprint"] == model.fingerprint());
  CHECK(j["meta"]["config_hash"] == model.config().hash());
  CHECK(j["meta"]["task"] == "base");
  std::size_t offset = 0;
  for (const auto& t : j["tensors"]) {
    CHECK(t["offset"].get<std::size_t>() == offset);
    const auto& ref = model.tensor(t["name"].get<std::string>());
    CHECK(t["nbytes"].get<std::size_t>() == ref.numel() * 8);
    CHECK(t["shape"].get<num::Shape>() == ref.shape());
    CHECK(t["layer"].get<int>() == model.layer(t["name"].get<std::string>()));
    offset += t["nbytes"].get<std::size_t>();
  }
  CHECK(std::filesystem::file_size(dir / "m.bin") == offset);
}

TEST_CASE("blob is little-endian f64") {
  TempDir dir("ckpt_le");
  LayeredCheckpoint c(ModelConfig{}, "t");
  c.set("x", num::Tensor::vector({1.0}), 0);
  save_checkpoint(c, dir / "x");
  const std::string blob = read_text_file(dir / "x.bin");
  REQUIRE(blob.size() == 8);
  // 1.0 = 0x3FF0000000000000
  for (int i = 0; i < 6; ++i) CHECK(static_cast<unsigned char>(blob[i]) == 0);
  CHECK(static_cast<unsigned char>(blob[6]) == 0xF0);
  CHECK(static_cast<unsigned char>(blob[7]) == 0x3F);
}

TEST_CASE("f32 storage rounds values and records their fingerprint") {
  TempDir dir("ckpt_f32");
  auto model = full_model(5);
  save_checkpoint(model, dir / "s", Dtype::F32);
  auto back = load_checkpoint(dir / "s");
  for (const auto& [name, e] : model.params()) {
    const auto a = e.tensor.data();
    const auto b = back.tensor(name).data();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == static_cast<double>(static_cast<float>(a[i])));
  }
  CHECK(back.fingerprint() == fingerprint(as_stored(model.params(), Dtype::F32)));
  CHECK(std::filesystem::file_size(dir / "s.bin") * 2 ==
        [&] {
          std::size_t n = 0;
          for (const auto& [_, e] : model.params()) n += e.tensor.numel() * 8;
          return n;
        }());
}

TEST_CASE("load rejects corrupted archives") {
  TempDir dir("ckpt_bad");
  auto model = full_model(9);
  save_checkpoint(model, dir / "m");
  const std::string manifest = read_text_file(dir / "m.manifest.json");
  const std::string blob = read_text_file(dir / "m.bin");

  SUBCASE("truncated blob") {
    write_text_file(dir / "m.bin", blob.substr(0, blob.size() - 8));
    CHECK_THROWS_AS(load_checkpoint(dir / "m"), CorruptionError);
  }
  SUBCASE("flipped payload bit") {
    std::string bad = blob;
    bad[bad.size() / 2] ^= 0x01;
    write_text_file(dir / "m.bin", bad);
    CHECK_THROWS_AS(load_checkpoint(dir / "m"), CorruptionError);
  }
  SUBCASE("shape product disagrees with nbytes") {
    auto j = nlohmann::json::parse(manifest);
    j["tensors"][0]["shape"][0] = j["tensors"][0]["shape"][0].get<std::size_t>() + 1;
    write_text_file(dir / "m.manifest.json", j.dump(2));
    CHECK_THROWS_AS(load_checkpoint(dir / "m"), CorruptionError);
  }
  SUBCASE("unknown dtype") {
    auto j = nlohmann::json::parse(manifest);
    j["dtype"] = "bf16";
    write_text_file(dir / "m.manifest.json", j.dump(2));
    CHECK_THROWS_AS(load_checkpoint(dir / "m"), FormatError);
  }
  SUBCASE("not JSON") {
    write_text_file(dir / "m.manifest.json", "{ nope");
    CHECK_THROWS_AS(load_checkpoint(dir / "m"), FormatError);
  }
  SUBCASE("missing files name the path") {
    try {
      load_checkpoint(dir / "absent");
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("absent.manifest.json") != std::string::npos);
    }
  }
  SUBCASE("wrong kind") {
    Archive ar;
    ar.kind = "task_vector";
    ar.tensors = model.backbone();
    write_archive(dir / "tv", ar);
    CHECK_THROWS_AS(load_checkpoint(dir / "tv"), FormatError);
  }
}

TEST_CASE("write errors name the path") {
  TempDir dir("ckpt_wr");
  write_text_file(dir / "file", "x");
  LayeredCheckpoint c(ModelConfig{}, "t");
  try {
    save_checkpoint(c, dir / "file" / "sub");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("sub") != std::string::npos);
  }
}

TEST_CASE("partition_layers") {
  SUBCASE("L=24 gives 25 merge groups") {
    ModelConfig cfg;
    cfg.num_layers = 24;
    std::set<int> groups;
    for (const auto& [_, l] : partition_layers(cfg))
      if (l >= 0) groups.insert(l);
    CHECK(groups.size() == 25);
    CHECK(*groups.begin() == 0);
    CHECK(*groups.rbegin() == 24);
  }
  SUBCASE("L=1 gives {0,1}") {
    ModelConfig cfg;
    cfg.num_layers = 1;
    std::set<int> groups;
    for (const auto& [_, l] : partition_layers(cfg))
      if (l >= 0) groups.insert(l);
    CHECK(groups == std::set<int>{0, 1});
  }
  SUBCASE("heads are -1, front-end is 0, blocks carry their index") {
    ModelConfig cfg;
    const auto p = partition_layers(cfg);
    for (const auto* n : {"agg.raw", "ser.weight", "ser.bias", "asr.weight", "asr.bias"}) CHECK(p.at(n) == kHeadLayer);
    for (const auto* n : {"frontend.conv.weight", "frontend.conv.bias", "frontend.pos"}) CHECK(p.at(n) == 0);
    for (int l = 1; l <= cfg.num_layers; ++l) CHECK(p.at(block_param(l, "attn.wq")) == l);
  }
  SUBCASE("total over every spec name, one index each") {
    ModelConfig cfg;
    const auto p = partition_layers(cfg);
    std::size_t n = backbone_specs(cfg).size() + ser_head_specs(cfg).size() + asr_head_specs(cfg).size();
    CHECK(p.size() == n);
    for (const auto& s : backbone_specs(cfg)) CHECK(p.at(s.name) == s.layer);
  }
}

TEST_CASE("fingerprint changes iff a tensor byte changes") {
  num::Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    ParamMap m;
    const int count = 1 + static_cast<int>(rng.below(4));
    for (int i = 0; i < count; ++i) {
      num::Shape s{1 + rng.below(4), 1 + rng.below(4)};
      m["p" + std::to_string(i)] = ParamEntry{random_tensor(rng, s), static_cast<int>(rng.below(3))};
    }
    const std::string fp = fingerprint(m);
    CHECK(fingerprint(m) == fp);

    auto it = std::next(m.begin(), static_cast<long>(rng.below(m.size())));
    auto v = it->second.tensor.to_vector();
    const std::size_t k = rng.below(v.size());
    const int bit = static_cast<int>(rng.below(64));
    v[k] = std::bit_cast<double>(std::bit_cast<std::uint64_t>(v[k]) ^ (1ULL << bit));
    ParamMap changed = m;
    changed[it->first].tensor = num::Tensor(it->second.tensor.shape(), v);
    CHECK(fingerprint(changed) != fp);

    ParamMap relayered = m;
    relayered[it->first].layer += 1;
    CHECK(fingerprint(relayered) != fp);

    ParamMap reshaped = m;
    reshaped[it->first].tensor = it->second.tensor.reshaped({it->second.tensor.numel()});
    CHECK(fingerprint(reshaped) != fp);
  }
}

TEST_CASE("merge compatibility") {
  auto a = full_model(1);
  auto b = full_model(2);
  CHECK(merge_compatible(a, b));
  CHECK_FALSE(a.fingerprint() == b.fingerprint());

  auto c = b;
  c.erase("ser.bias");
  CHECK_FALSE(merge_compatible(a, c));
  CHECK(incompatibility(a.params(), c.params())->find("ser.bias") != std::string::npos);

  ModelConfig wide;
  wide.model_dim = 32;
  auto d = init_backbone(wide, 1);
  auto msg = incompatibility(a.backbone(), d.backbone());
  REQUIRE(msg.has_value());
  CHECK(msg->find("attn.bk") != std::string::npos);
}

TEST_CASE("set keeps layer and shape contracts") {
  LayeredCheckpoint c(ModelConfig{}, "t");
  c.set("w", num::Tensor::zeros({2, 2}), 1);
  CHECK_THROWS_AS(c.set("w", num::Tensor::zeros({2, 2}), 2), ValidationError);
  CHECK_THROWS_AS(c.set("w", num::Tensor::zeros({3})), ShapeError);
  c.set("w", num::Tensor::ones({2, 2}));
  CHECK(c.tensor("w")[0] == 1.0);
  CHECK_THROWS_AS(c.set("v", num::Tensor::zeros({1}), -2), ValidationError);
}

TEST_CASE("model config validation and strict JSON") {
  ModelConfig bad;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = ModelConfig{};
  bad.vocab_size = 1;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = ModelConfig{};
  bad.num_layers = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);

  CHECK_THROWS_AS(ModelConfig::from_json({{"num_layer", 2}}), ValidationError);
  CHECK_THROWS_AS(ModelConfig::from_json({{"num_layers", "two"}}), ValidationError);
  auto c = ModelConfig::from_json({{"num_layers", 2}});
  CHECK(c.num_layers == 2);
  CHECK(ModelConfig::from_json(c.to_json()) == c);
  CHECK(c.hash() != ModelConfig{}.hash());
}

TEST_CASE("initialisation is seeded per parameter name") {
  ModelConfig cfg;
  auto a = init_backbone(cfg, 4);
  auto b = init_backbone(cfg, 4);
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(init_backbone(cfg, 5).fingerprint() != a.fingerprint());
  auto ser_alone = init_params(ser_head_specs(cfg), cfg, 4);
  auto both = ser_head_specs(cfg);
  for (auto& s : asr_head_specs(cfg)) both.push_back(s);
  auto together = init_params(both, cfg, 4);
  for (const auto& [name, e] : ser_alone) CHECK(together.at(name).tensor.bitwise_equal(e.tensor));
  CHECK(a.tensor(block_param(1, "ln1.gamma"))[0] == 1.0);
  CHECK(a.tensor(block_param(1, "attn.bq"))[0] == 0.0);
}
