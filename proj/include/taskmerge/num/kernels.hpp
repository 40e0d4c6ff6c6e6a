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

// Value-level tensor kernels. Every function is pure: inputs are never
// modified and a new Tensor is returned. The graph ops in ops.hpp call these
// for both the forward pass and their backward rules.
//
// Kernels with data-parallel loops are OpenMP-parallel. Each output element is
// produced by exactly one thread with a fixed reduction order, so results do
// not depend on the thread count. serial:: holds straightforward reference
// versions kept for tests and benchmarks.

#include <cstddef>
#include <span>
#include <vector>

#include "taskmerge/num/tensor.hpp"

namespace tmerge::num::kernels {

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};
/// View a shape as [outer, extent, inner] around `axis`; negative axes count from the end.
AxisSplit split_axis(const Shape& shape, int axis);
std::size_t normalize_axis(const Shape& shape, int axis);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// a[..., n] + b[n]
Tensor add_bias(const Tensor& a, const Tensor& b);
/// Sum over every axis but the last: [..., n] -> [n].
Tensor sum_leading(const Tensor& a);
double sum(const Tensor& a);
double dot(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

/// tanh-approximated GELU.
Tensor gelu(const Tensor& x);
/// g * gelu'(x)
Tensor gelu_backward(const Tensor& x, const Tensor& g);

struct LayerNormResult {
  Tensor y;
  Tensor normalized;  // (x - mean) * rstd
  Tensor rstd;        // one entry per row
};
LayerNormResult layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

std::size_t conv1d_frames(std::size_t frames_in, std::size_t kernel, std::size_t stride);
/// x[T, c_in] (unfolded) -> [T_out, kernel * c_in]
Tensor im2col(const Tensor& x, std::size_t kernel, std::size_t stride);
/// Adjoint of im2col: scatter-add columns back to [frames_in, c_in].
Tensor col2im(const Tensor& cols, std::size_t frames_in, std::size_t c_in, std::size_t kernel,
              std::size_t stride);

/// out = base + coeffs[0] * deltas[0] + coeffs[1] * deltas[1] + ...
/// accumulated left to right, one rounding per add and per product.
Tensor affine_combine(const Tensor& base, std::span<const double> coeffs,
                      std::span<const Tensor* const> deltas);

namespace serial {
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor affine_combine(const Tensor& base, std::span<const double> coeffs,
                      std::span<const Tensor* const> deltas);
}  // namespace serial

}  // namespace tmerge::num::kernels
