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

// Differentiable op set. Each op evaluates eagerly through kernels:: and
// records a backward rule on the inputs' graph. All inputs of one op must come
// from the same Graph.

#include <cstddef>
#include <vector>

#include "taskmerge/num/graph.hpp"

namespace tmerge::num {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// s * a for a single-element s.
Var scale_by(const Var& s, const Var& a);
/// a[..., n] + b[n]
Var add_bias(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);

/// Sum / mean of every element, returned as shape {}.
Var sum(const Var& a);
Var mean(const Var& a);
/// Mean over axis 0 of a matrix: [m, n] -> [1, n].
Var mean_rows(const Var& a);

Var gelu(const Var& a);
/// Natural log; inputs must be positive.
Var log(const Var& a);
Var softmax(const Var& a, int axis);
Var log_softmax(const Var& a, int axis);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);

/// Embedding lookup: rows `ids` of table[V, d] -> [ids.size(), d].
Var gather(const Var& table, const std::vector<std::size_t>& ids);
Var concat(const std::vector<Var>& parts, int axis);
/// Elements [begin, end) along `axis`.
Var slice(const Var& a, int axis, std::size_t begin, std::size_t end);

/// Valid 1-D convolution: x[T, c_in], w[kernel, c_in, c_out] -> [T_out, c_out].
Var conv1d(const Var& x, const Var& w, std::size_t stride);

}  // namespace tmerge::num
