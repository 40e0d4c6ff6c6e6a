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
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "taskmerge/num/tensor.hpp"

namespace tmerge::num {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Graph& graph() const { return *graph_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

using VarMap = std::map<std::string, Var>;

/// Gradients of trainable leaves produced by Graph::backward.
class Gradients {
 public:
  bool has(const Var& v) const { return grads_.count(v.id()) != 0; }
  const Tensor& of(const Var& v) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Graph;
  std::unordered_map<std::size_t, Tensor> grads_;
};

/// Reverse-mode tape over Tensor values.
///
/// Nodes are appended in evaluation order, so node ids are a topological
/// order. A node requires grad when it is a trainable leaf or any of its
/// inputs requires grad; only such nodes keep a backward rule. Graphs are
/// single-threaded; build one per training step.
class Graph {
 public:
  /// Receives the upstream gradient and accumulates into the inputs via
  /// Graph::accumulate.
  using BackwardFn = std::function<void(Graph&, const Tensor& grad_out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Leaf parameter. Frozen leaves behave like constants and never receive a gradient.
  Var parameter(Tensor value, bool trainable);

  /// Records an op result. `backward` is dropped when no input requires grad.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /// Adds `grad` into the pending gradient of `v` (no-op when v needs no grad).
  void accumulate(const Var& v, const Tensor& grad);

  /// Gradients of a single-element loss with respect to every trainable leaf
  /// recorded before it. Leaves the loss does not depend on get zeros.
  Gradients backward(const Var& loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Var;
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool trainable_leaf = false;
  };

  std::vector<Node> nodes_;
  // Valid only during backward().
  std::vector<Tensor> pending_;
  std::vector<char> has_pending_;
};

}  // namespace tmerge::num
