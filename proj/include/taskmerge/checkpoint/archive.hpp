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

// Shared container for checkpoints, task vectors and corpora: a JSON manifest
// listing every tensor (name, shape, layer, offset, nbytes) plus a single
// little-endian blob. Output is byte-stable for identical content.

#include <filesystem>
#include <string>

#include "json.hpp"
#include "taskmerge/checkpoint/checkpoint.hpp"

namespace tmerge::ckpt {

inline constexpr int kFormatVersion = 1;

struct Archive {
  std::string kind;  // "checkpoint" | "task_vector" | "corpus"
  Dtype dtype = Dtype::F64;
  ParamMap tensors;
  /// Free-form meta object; "fingerprint" is filled in by write_archive.
  nlohmann::json meta = nlohmann::json::object();
  /// Extra top-level manifest fields (e.g. base_fingerprint).
  nlohmann::json extra = nlohmann::json::object();
};

std::string dtype_name(Dtype dtype);

/// Values as they will read back from storage (f32 rounds every element).
ParamMap as_stored(const ParamMap& tensors, Dtype dtype);

/// Writes `<prefix>.manifest.json` and `<prefix>.bin`. The recorded
/// fingerprint is that of the stored (possibly f32-rounded) values.
void write_archive(const std::filesystem::path& prefix, const Archive& archive);

/// Reads and validates an archive: sizes, offsets, dtype and fingerprint.
/// Throws FormatError, CorruptionError or IoError.
Archive read_archive(const std::filesystem::path& prefix);

/// Whole-file helpers with errors that carry the path.
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace tmerge::ckpt
