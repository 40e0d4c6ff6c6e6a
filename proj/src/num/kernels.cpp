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

#include "taskmerge/num/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "taskmerge/errors.hpp"

namespace tmerge::num::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2, got " + shape_str(a.shape()));
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same_shape(a, b, op);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return Tensor(a.shape(), std::move(out));
}

// sqrt(2/pi) and the cubic coefficient of the tanh GELU approximation.
constexpr double kGeluC = 0.7978845608028654;
constexpr double kGeluA = 0.044715;

}  // namespace

std::size_t normalize_axis(const Shape& shape, int axis) {
  const int rank = static_cast<int>(shape.size());
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  }
  return static_cast<std::size_t>(a);
}

AxisSplit split_axis(const Shape& shape, int axis) {
  const std::size_t a = normalize_axis(shape, axis);
  AxisSplit s;
  for (std::size_t i = 0; i < a; ++i) s.outer *= shape[i];
  s.extent = shape[a];
  for (std::size_t i = a + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> c(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* pc = c.data();
  // Row-parallel i-k-j loop: each output row is owned by one thread and
  // accumulated in k order, so the result is thread-count independent.
#pragma omp parallel for schedule(static) if (m * n * k >= kParallelWork)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(m); ++i) {
    double* row = pc + i * n;
    const double* arow = pa + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = pb + p * n;
#pragma omp simd
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return Tensor(Shape{m, n}, std::move(c));
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  const auto x = a.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return Tensor(Shape{c, r}, std::move(out));
}

Tensor add(const Tensor& a, const Tensor& b) {
  return map_binary(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return map_binary(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return map_binary(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor scale(const Tensor& a, double s) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return Tensor(a.shape(), std::move(out));
}

Tensor add_bias(const Tensor& a, const Tensor& b) {
  if (a.rank() == 0 || b.rank() != 1 || a.shape().back() != b.dim(0)) {
    throw ShapeError("add_bias: cannot broadcast " + shape_str(b.shape()) + " onto " +
                     shape_str(a.shape()));
  }
  const std::size_t n = b.dim(0);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i % n];
  return Tensor(a.shape(), std::move(out));
}

Tensor sum_leading(const Tensor& a) {
  if (a.rank() == 0) throw ShapeError("sum_leading on scalar");
  const std::size_t n = a.shape().back();
  const std::size_t rows = n ? a.numel() / n : 0;
  const auto x = a.data();
  std::vector<double> out(n, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[r * n + j];
  return Tensor(Shape{n}, std::move(out));
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  const auto x = a.data();
  const auto y = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

Tensor softmax(const Tensor& x, int axis) {
  const auto s = split_axis(x.shape(), axis);
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = -INFINITY;
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, in[base + e * s.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double v = std::exp(in[base + e * s.inner] - mx);
        out[base + e * s.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= total;
    }
  }
  return Tensor(x.shape(), std::move(out));
}

Tensor log_softmax(const Tensor& x, int axis) {
  const auto s = split_axis(x.shape(), axis);
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = -INFINITY;
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, in[base + e * s.inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) total += std::exp(in[base + e * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] = in[base + e * s.inner] - lse;
    }
  }
  return Tensor(x.shape(), std::move(out));
}

// gelu(x) = 0.5 x (1 + tanh(c (x + a x^3))), c = sqrt(2/pi), a = 0.044715
Tensor gelu(const Tensor& x) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = in[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return Tensor(x.shape(), std::move(out));
}

Tensor gelu_backward(const Tensor& x, const Tensor& g) {
  require_same_shape(x, g, "gelu_backward");
  const auto in = x.data();
  const auto go = g.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = in[i];
    const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    out[i] = go[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
  }
  return Tensor(x.shape(), std::move(out));
}

LayerNormResult layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0.0)) throw ValidationError("layer_norm: eps must be positive");
  if (x.rank() == 0) throw ShapeError("layer_norm on scalar");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(d) + "], got " +
                     shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  const std::size_t rows = d ? x.numel() / d : 0;
  const auto in = x.data();
  const auto g = gamma.data();
  const auto b = beta.data();
  std::vector<double> y(in.size()), xn(in.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double n = (row[j] - mean) * rs;
      xn[r * d + j] = n;
      y[r * d + j] = n * g[j] + b[j];
    }
  }
  Shape rows_shape(x.shape().begin(), x.shape().end() - 1);
  return {Tensor(x.shape(), std::move(y)), Tensor(x.shape(), std::move(xn)),
          Tensor(rows_shape, std::move(rstd))};
}

std::size_t conv1d_frames(std::size_t frames_in, std::size_t kernel, std::size_t stride) {
  if (kernel == 0 || stride == 0) throw ValidationError("conv1d: kernel and stride must be positive");
  if (frames_in < kernel) {
    throw ShapeError("conv1d: sequence of " + std::to_string(frames_in) +
                     " frames is shorter than kernel " + std::to_string(kernel));
  }
  return (frames_in - kernel) / stride + 1;
}

Tensor im2col(const Tensor& x, std::size_t kernel, std::size_t stride) {
  require_matrix(x, "im2col");
  const std::size_t t_in = x.dim(0), c = x.dim(1);
  const std::size_t t_out = conv1d_frames(t_in, kernel, stride);
  const auto in = x.data();
  std::vector<double> out(t_out * kernel * c);
  for (std::size_t t = 0; t < t_out; ++t)
    for (std::size_t k = 0; k < kernel; ++k)
      for (std::size_t j = 0; j < c; ++j)
        out[(t * kernel + k) * c + j] = in[(t * stride + k) * c + j];
  return Tensor(Shape{t_out, kernel * c}, std::move(out));
}

Tensor col2im(const Tensor& cols, std::size_t frames_in, std::size_t c_in, std::size_t kernel,
              std::size_t stride) {
  const std::size_t t_out = conv1d_frames(frames_in, kernel, stride);
  if (cols.shape() != Shape{t_out, kernel * c_in}) throw ShapeError("col2im: unexpected column shape");
  const auto in = cols.data();
  std::vector<double> out(frames_in * c_in, 0.0);
  for (std::size_t t = 0; t < t_out; ++t)
    for (std::size_t k = 0; k < kernel; ++k)
      for (std::size_t j = 0; j < c_in; ++j)
        out[(t * stride + k) * c_in + j] += in[(t * kernel + k) * c_in + j];
  return Tensor(Shape{frames_in, c_in}, std::move(out));
}

namespace {
void check_combine(const Tensor& base, std::span<const double> coeffs,
                   std::span<const Tensor* const> deltas) {
  if (coeffs.size() != deltas.size()) throw ShapeError("affine_combine: coefficient/delta count mismatch");
  for (const Tensor* d : deltas) require_same_shape(base, *d, "affine_combine");
}
}  // namespace

Tensor affine_combine(const Tensor& base, std::span<const double> coeffs,
                      std::span<const Tensor* const> deltas) {
  check_combine(base, coeffs, deltas);
  const auto b = base.data();
  const std::int64_t n = static_cast<std::int64_t>(b.size());
  std::vector<double> out(b.begin(), b.end());
  for (std::size_t k = 0; k < deltas.size(); ++k) {
    const double c = coeffs[k];
    const double* d = deltas[k]->data().data();
    double* o = out.data();
#pragma omp parallel for simd schedule(static) if (static_cast<std::size_t>(n) >= kParallelWork)
    for (std::int64_t i = 0; i < n; ++i) o[i] = o[i] + c * d[i];
  }
  return Tensor(base.shape(), std::move(out));
}

namespace serial {

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      c[i * n + j] = s;
    }
  return Tensor(Shape{m, n}, std::move(c));
}

Tensor affine_combine(const Tensor& base, std::span<const double> coeffs,
                      std::span<const Tensor* const> deltas) {
  check_combine(base, coeffs, deltas);
  std::vector<double> out = base.to_vector();
  for (std::size_t k = 0; k < deltas.size(); ++k)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] + coeffs[k] * (*deltas[k])[i];
  return Tensor(base.shape(), std::move(out));
}

}  // namespace serial

}  // namespace tmerge::num::kernels
