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
#include <string_view>
#include <utility>
#include <vector>

namespace tmerge::num {

/// Counter-mode SplitMix64.
///
/// Output i of a stream is splitmix64_finalize(key + (i + 1) * 0x9E3779B97F4A7C15),
/// where key is derived from (seed, stream) by the same finalizer. Only integer
/// arithmetic is involved, so the raw u64 stream is identical on every platform.
/// Independent sub-streams are obtained with fork() instead of sharing one
/// generator across routines.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller (one draw per call, no cached pair).
  double normal();
  /// Uniform integer in [0, n); n > 0. Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n);

  Rng fork(std::uint64_t stream) const;
  Rng fork(std::string_view label) const;

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::uint64_t key() const { return key_; }

  static std::uint64_t mix(std::uint64_t z);
  /// FNV-1a, used to turn labels into stream ids.
  static std::uint64_t hash_label(std::string_view label);

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace tmerge::num
