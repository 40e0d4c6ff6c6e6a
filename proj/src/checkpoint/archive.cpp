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

#include "taskmerge/checkpoint/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "taskmerge/errors.hpp"

namespace tmerge::ckpt {

namespace {

std::size_t element_size(Dtype dtype) { return dtype == Dtype::F64 ? 8 : 4; }

Dtype parse_dtype(const std::string& name, const std::string& where) {
  if (name == "f64") return Dtype::F64;
  if (name == "f32") return Dtype::F32;
  throw FormatError(where + ": unknown dtype '" + name + "'");
}

void append_le(std::string& out, std::uint64_t bits, std::size_t bytes) {
  for (std::size_t i = 0; i < bytes; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

std::uint64_t read_le(const unsigned char* p, std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::string dtype_name(Dtype dtype) { return dtype == Dtype::F64 ? "f64" : "f32"; }

ParamMap as_stored(const ParamMap& tensors, Dtype dtype) {
  if (dtype == Dtype::F64) return tensors;
  ParamMap out;
  for (const auto& [name, e] : tensors) {
    std::vector<double> v = e.tensor.to_vector();
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
    out.emplace(name, ParamEntry{num::Tensor(e.tensor.shape(), std::move(v)), e.layer});
  }
  return out;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("error reading '" + path.string() + "'");
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("error writing '" + path.string() + "'");
}

void write_archive(const std::filesystem::path& prefix, const Archive& archive) {
  const auto paths = archive_paths(prefix);
  const ParamMap stored = as_stored(archive.tensors, archive.dtype);
  const std::size_t esize = element_size(archive.dtype);

  std::string blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, e] : stored) {
    const std::size_t offset = blob.size();
    for (double v : e.tensor.data()) {
      if (archive.dtype == Dtype::F64) {
        append_le(blob, std::bit_cast<std::uint64_t>(v), 8);
      } else {
        append_le(blob, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
      }
    }
    tensors.push_back({{"name", name},
                       {"shape", e.tensor.shape()},
                       {"layer", e.layer},
                       {"offset", offset},
                       {"nbytes", e.tensor.numel() * esize}});
  }

  nlohmann::json manifest = archive.extra;
  manifest["format_version"] = kFormatVersion;
  manifest["kind"] = archive.kind;
  manifest["dtype"] = dtype_name(archive.dtype);
  manifest["tensors"] = std::move(tensors);
  manifest["meta"] = archive.meta;
  manifest["meta"]["fingerprint"] = fingerprint(stored);

  write_text_file(paths.blob, blob);
  write_text_file(paths.manifest, manifest.dump(2) + "\n");
}

Archive read_archive(const std::filesystem::path& prefix) {
  const auto paths = archive_paths(prefix);
  const std::string where = paths.manifest.string();
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_text_file(paths.manifest));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": invalid JSON: " + e.what());
  }
  const std::string blob = read_text_file(paths.blob);

  Archive ar;
  try {
    if (manifest.at("format_version").get<int>() != kFormatVersion) {
      throw FormatError(where + ": unsupported format_version " + manifest.at("format_version").dump());
    }
    ar.kind = manifest.at("kind").get<std::string>();
    ar.dtype = parse_dtype(manifest.at("dtype").get<std::string>(), where);
    ar.meta = manifest.at("meta");
    const std::size_t esize = element_size(ar.dtype);
    const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());

    std::size_t expected_offset = 0;
    for (const auto& t : manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<num::Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto nbytes = t.at("nbytes").get<std::size_t>();
      const std::size_t numel = num::shape_numel(shape);
      if (nbytes != numel * esize) {
        throw CorruptionError(where + ": tensor '" + name + "' shape " + num::shape_str(shape) +
                              " does not match nbytes " + std::to_string(nbytes));
      }
      if (offset != expected_offset || offset + nbytes > blob.size()) {
        throw CorruptionError(where + ": tensor '" + name + "' lies outside the blob or is not contiguous");
      }
      std::vector<double> values(numel);
      for (std::size_t i = 0; i < numel; ++i) {
        const std::uint64_t bits = read_le(bytes + offset + i * esize, esize);
        values[i] = ar.dtype == Dtype::F64 ? std::bit_cast<double>(bits)
                                           : static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)));
      }
      if (ar.tensors.count(name)) throw CorruptionError(where + ": duplicate tensor '" + name + "'");
      ar.tensors.emplace(name, ParamEntry{num::Tensor(shape, std::move(values)), t.at("layer").get<int>()});
      expected_offset = offset + nbytes;
    }
    if (expected_offset != blob.size()) {
      throw CorruptionError(where + ": blob holds " + std::to_string(blob.size()) + " bytes, manifest describes " +
                            std::to_string(expected_offset));
    }
    for (const auto& [key, value] : manifest.items()) {
      if (key != "format_version" && key != "kind" && key != "dtype" && key != "tensors" && key != "meta") {
        ar.extra[key] = value;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": malformed manifest: " + e.what());
  }

  const std::string recorded = ar.meta.value("fingerprint", std::string());
  if (recorded != fingerprint(ar.tensors)) {
    throw CorruptionError(where + ": fingerprint mismatch (content does not match manifest)");
  }
  return ar;
}

}  // namespace tmerge::ckpt
