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

#include "taskmerge/num/ops.hpp"

#include <cmath>

#include "taskmerge/errors.hpp"
#include "taskmerge/num/kernels.hpp"

namespace tmerge::num {

namespace k = kernels;

namespace {

Graph& graph_of(const Var& v) {
  if (!v.valid()) throw std::logic_error("op on an unbound Var");
  return v.graph();
}

// Copies `src` (shape with `extent` along the split axis) into `dst` at offset
// `at` of a larger extent `dst_extent`.
void copy_along_axis(std::span<const double> src, std::vector<double>& dst, const k::AxisSplit& s,
                     std::size_t dst_extent, std::size_t at) {
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e) {
      const double* from = src.data() + (o * s.extent + e) * s.inner;
      double* to = dst.data() + (o * dst_extent + at + e) * s.inner;
      std::copy(from, from + s.inner, to);
    }
}

Tensor slice_tensor(const Tensor& t, int axis, std::size_t begin, std::size_t end) {
  const auto s = k::split_axis(t.shape(), axis);
  if (begin > end || end > s.extent) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for shape " + shape_str(t.shape()));
  }
  const std::size_t len = end - begin;
  const auto src = t.data();
  std::vector<double> out(s.outer * len * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < len; ++e) {
      const double* from = src.data() + (o * s.extent + begin + e) * s.inner;
      std::copy(from, from + s.inner, out.data() + (o * len + e) * s.inner);
    }
  Shape shape = t.shape();
  shape[k::normalize_axis(shape, axis)] = len;
  return Tensor(std::move(shape), std::move(out));
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return graph_of(a).record(k::add(a.value(), b.value()), {a, b}, [a, b](Graph& g, const Tensor& go) {
    g.accumulate(a, go);
    g.accumulate(b, go);
  });
}

Var sub(const Var& a, const Var& b) {
  return graph_of(a).record(k::sub(a.value(), b.value()), {a, b}, [a, b](Graph& g, const Tensor& go) {
    g.accumulate(a, go);
    if (b.requires_grad()) g.accumulate(b, k::scale(go, -1.0));
  });
}

Var mul(const Var& a, const Var& b) {
  return graph_of(a).record(k::mul(a.value(), b.value()), {a, b}, [a, b](Graph& g, const Tensor& go) {
    if (a.requires_grad()) g.accumulate(a, k::mul(go, b.value()));
    if (b.requires_grad()) g.accumulate(b, k::mul(go, a.value()));
  });
}

Var scale(const Var& a, double s) {
  return graph_of(a).record(k::scale(a.value(), s), {a}, [a, s](Graph& g, const Tensor& go) {
    g.accumulate(a, k::scale(go, s));
  });
}

Var scale_by(const Var& s, const Var& a) {
  if (s.value().numel() != 1) {
    throw ShapeError("scale_by: scale must have one element, got " + shape_str(s.shape()));
  }
  const double sv = s.value()[0];
  return graph_of(a).record(k::scale(a.value(), sv), {s, a}, [s, a, sv](Graph& g, const Tensor& go) {
    if (s.requires_grad()) g.accumulate(s, Tensor(s.shape(), {k::dot(go, a.value())}));
    if (a.requires_grad()) g.accumulate(a, k::scale(go, sv));
  });
}

Var add_bias(const Var& a, const Var& b) {
  return graph_of(a).record(k::add_bias(a.value(), b.value()), {a, b}, [a, b](Graph& g, const Tensor& go) {
    g.accumulate(a, go);
    if (b.requires_grad()) g.accumulate(b, k::sum_leading(go));
  });
}

Var matmul(const Var& a, const Var& b) {
  return graph_of(a).record(k::matmul(a.value(), b.value()), {a, b}, [a, b](Graph& g, const Tensor& go) {
    if (a.requires_grad()) g.accumulate(a, k::matmul(go, k::transpose(b.value())));
    if (b.requires_grad()) g.accumulate(b, k::matmul(k::transpose(a.value()), go));
  });
}

Var transpose(const Var& a) {
  return graph_of(a).record(k::transpose(a.value()), {a}, [a](Graph& g, const Tensor& go) {
    g.accumulate(a, k::transpose(go));
  });
}

Var reshape(const Var& a, Shape shape) {
  return graph_of(a).record(a.value().reshaped(std::move(shape)), {a}, [a](Graph& g, const Tensor& go) {
    g.accumulate(a, go.reshaped(a.shape()));
  });
}

Var sum(const Var& a) {
  return graph_of(a).record(Tensor::scalar(k::sum(a.value())), {a}, [a](Graph& g, const Tensor& go) {
    g.accumulate(a, Tensor::full(a.shape(), go[0]));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().numel());
  if (n == 0) throw ShapeError("mean of empty tensor");
  return graph_of(a).record(Tensor::scalar(k::sum(a.value()) / n), {a}, [a, n](Graph& g, const Tensor& go) {
    g.accumulate(a, Tensor::full(a.shape(), go[0] / n));
  });
}

Var mean_rows(const Var& a) {
  if (a.value().rank() != 2 || a.value().dim(0) == 0) {
    throw ShapeError("mean_rows: expected non-empty matrix, got " + shape_str(a.shape()));
  }
  const std::size_t m = a.value().dim(0), n = a.value().dim(1);
  std::vector<double> pooled = k::sum_leading(a.value()).to_vector();
  for (double& v : pooled) v /= static_cast<double>(m);
  Tensor out({1, n}, std::move(pooled));
  return graph_of(a).record(std::move(out), {a}, [a, m, n](Graph& g, const Tensor& go) {
    std::vector<double> grad(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) grad[i * n + j] = go[j] / static_cast<double>(m);
    g.accumulate(a, Tensor({m, n}, std::move(grad)));
  });
}

Var gelu(const Var& a) {
  return graph_of(a).record(k::gelu(a.value()), {a}, [a](Graph& g, const Tensor& go) {
    g.accumulate(a, k::gelu_backward(a.value(), go));
  });
}

Var log(const Var& a) {
  const auto x = a.value().data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::log(x[i]);
  return graph_of(a).record(Tensor(a.shape(), std::move(out)), {a}, [a](Graph& g, const Tensor& go) {
    const auto xv = a.value().data();
    std::vector<double> grad(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) grad[i] = go[i] / xv[i];
    g.accumulate(a, Tensor(a.shape(), std::move(grad)));
  });
}

Var softmax(const Var& a, int axis) {
  Tensor y = k::softmax(a.value(), axis);
  return graph_of(a).record(y, {a}, [a, y, axis](Graph& g, const Tensor& go) {
    // dx = y * (go - sum_axis(go * y))
    const auto s = k::split_axis(y.shape(), axis);
    std::vector<double> grad(y.numel());
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double inner = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e) inner += go[base + e * s.inner] * y[base + e * s.inner];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t idx = base + e * s.inner;
          grad[idx] = y[idx] * (go[idx] - inner);
        }
      }
    g.accumulate(a, Tensor(y.shape(), std::move(grad)));
  });
}

Var log_softmax(const Var& a, int axis) {
  Tensor y = k::log_softmax(a.value(), axis);
  return graph_of(a).record(y, {a}, [a, y, axis](Graph& g, const Tensor& go) {
    // dx = go - softmax(x) * sum_axis(go)
    const auto s = k::split_axis(y.shape(), axis);
    std::vector<double> grad(y.numel());
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double total = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e) total += go[base + e * s.inner];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t idx = base + e * s.inner;
          grad[idx] = go[idx] - std::exp(y[idx]) * total;
        }
      }
    g.accumulate(a, Tensor(y.shape(), std::move(grad)));
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  auto res = k::layer_norm(x.value(), gamma.value(), beta.value(), eps);
  Tensor xn = res.normalized;
  Tensor rstd = res.rstd;
  return graph_of(x).record(std::move(res.y), {x, gamma, beta},
                            [x, gamma, beta, xn, rstd](Graph& g, const Tensor& go) {
    const std::size_t d = xn.shape().back();
    const std::size_t rows = d ? xn.numel() / d : 0;
    if (gamma.requires_grad()) g.accumulate(gamma, k::sum_leading(k::mul(go, xn)));
    if (beta.requires_grad()) g.accumulate(beta, k::sum_leading(go));
    if (!x.requires_grad()) return;
    const auto gm = gamma.value().data();
    std::vector<double> grad(xn.numel());
    for (std::size_t r = 0; r < rows; ++r) {
      double mean_dn = 0.0, mean_dn_xn = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double dn = go[r * d + j] * gm[j];
        mean_dn += dn;
        mean_dn_xn += dn * xn[r * d + j];
      }
      mean_dn /= static_cast<double>(d);
      mean_dn_xn /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) {
        const double dn = go[r * d + j] * gm[j];
        grad[r * d + j] = rstd[r] * (dn - mean_dn - xn[r * d + j] * mean_dn_xn);
      }
    }
    g.accumulate(x, Tensor(xn.shape(), std::move(grad)));
  });
}

Var gather(const Var& table, const std::vector<std::size_t>& ids) {
  const Tensor& t = table.value();
  if (t.rank() != 2) throw ShapeError("gather: table must be a matrix, got " + shape_str(t.shape()));
  const std::size_t v = t.dim(0), d = t.dim(1);
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) throw ShapeError("gather: id " + std::to_string(ids[i]) + " >= table rows " + std::to_string(v));
    std::copy_n(t.data().data() + ids[i] * d, d, out.data() + i * d);
  }
  return graph_of(table).record(Tensor({ids.size(), d}, std::move(out)), {table},
                                [table, ids, v, d](Graph& g, const Tensor& go) {
    std::vector<double> grad(v * d, 0.0);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) grad[ids[i] * d + j] += go[i * d + j];
    g.accumulate(table, Tensor({v, d}, std::move(grad)));
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  const std::size_t ax = k::normalize_axis(first, axis);
  std::size_t total = 0;
  for (const Var& p : parts) {
    Shape a = p.shape(), b = first;
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch");
    a[ax] = b[ax] = 0;
    if (a != b) throw ShapeError("concat: shapes " + shape_str(p.shape()) + " and " + shape_str(first) + " differ off-axis");
    total += p.shape()[ax];
  }
  Shape out_shape = first;
  out_shape[ax] = total;
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const Var& p : parts) {
    offsets.push_back(at);
    copy_along_axis(p.value().data(), out, k::split_axis(p.shape(), axis), total, at);
    at += p.shape()[ax];
  }
  return graph_of(parts.front())
      .record(Tensor(out_shape, std::move(out)), parts, [parts, offsets, axis](Graph& g, const Tensor& go) {
        const std::size_t ax = k::normalize_axis(go.shape(), axis);
        for (std::size_t i = 0; i < parts.size(); ++i) {
          if (!parts[i].requires_grad()) continue;
          g.accumulate(parts[i], slice_tensor(go, axis, offsets[i], offsets[i] + parts[i].shape()[ax]));
        }
      });
}

Var slice(const Var& a, int axis, std::size_t begin, std::size_t end) {
  return graph_of(a).record(slice_tensor(a.value(), axis, begin, end), {a},
                            [a, axis, begin](Graph& g, const Tensor& go) {
    const auto full = k::split_axis(a.shape(), axis);
    std::vector<double> grad(a.value().numel(), 0.0);
    copy_along_axis(go.data(), grad, k::split_axis(go.shape(), axis), full.extent, begin);
    g.accumulate(a, Tensor(a.shape(), std::move(grad)));
  });
}

Var conv1d(const Var& x, const Var& w, std::size_t stride) {
  const Tensor& wt = w.value();
  if (wt.rank() != 3) throw ShapeError("conv1d: weight must be [kernel, c_in, c_out], got " + shape_str(wt.shape()));
  if (x.value().rank() != 2 || x.value().dim(1) != wt.dim(1)) {
    throw ShapeError("conv1d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(wt.shape()));
  }
  const std::size_t kernel = wt.dim(0), c_in = wt.dim(1), c_out = wt.dim(2);
  const std::size_t frames_in = x.value().dim(0);
  Tensor cols = k::im2col(x.value(), kernel, stride);
  Tensor w2 = wt.reshaped({kernel * c_in, c_out});
  Tensor y = k::matmul(cols, w2);
  return graph_of(x).record(std::move(y), {x, w},
                            [x, w, cols, w2, stride, kernel, c_in, frames_in](Graph& g, const Tensor& go) {
    if (w.requires_grad()) g.accumulate(w, k::matmul(k::transpose(cols), go).reshaped(w.shape()));
    if (x.requires_grad()) {
      g.accumulate(x, k::col2im(k::matmul(go, k::transpose(w2)), frames_in, c_in, kernel, stride));
    }
  });
}

}  // namespace tmerge::num
