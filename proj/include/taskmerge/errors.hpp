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

#include <stdexcept>
#include <string>

namespace tmerge {

// Bad user input: configs, labels, arguments. The CLI maps this to exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Unreadable or malformed container (unknown dtype, bad manifest).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Container parsed but its content does not match the recorded fingerprint or sizes.
class CorruptionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Two checkpoints that should share a parameter layout do not.
class CompatibilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A task vector was minted against a different base than the one supplied.
class StaleVectorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Frozen tensors changed during a run that promised not to touch them.
class FreezeViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tmerge
