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

#include "taskmerge/num/graph.hpp"

#include <stdexcept>

#include "taskmerge/errors.hpp"
#include "taskmerge/num/kernels.hpp"

namespace tmerge::num {

const Tensor& Var::value() const { return graph_->nodes_.at(id_).value; }

bool Var::requires_grad() const { return graph_->nodes_.at(id_).requires_grad; }

const Tensor& Gradients::of(const Var& v) const {
  auto it = grads_.find(v.id());
  if (it == grads_.end()) throw std::out_of_range("no gradient recorded for node " + std::to_string(v.id()));
  return it->second;
}

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, false, false});
  return Var(this, nodes_.size() - 1);
}

Var Graph::parameter(Tensor value, bool trainable) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, trainable, trainable});
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.graph_ != this) throw std::logic_error("op mixes vars from different graphs");
    node.inputs.push_back(in.id_);
    node.requires_grad = node.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Graph::accumulate(const Var& v, const Tensor& grad) {
  if (!nodes_[v.id_].requires_grad) return;
  if (grad.shape() != nodes_[v.id_].value.shape()) {
    throw ShapeError("gradient shape " + shape_str(grad.shape()) + " does not match node shape " +
                     shape_str(nodes_[v.id_].value.shape()));
  }
  if (has_pending_[v.id_]) {
    pending_[v.id_] = kernels::add(pending_[v.id_], grad);
  } else {
    pending_[v.id_] = grad;
    has_pending_[v.id_] = 1;
  }
}

Gradients Graph::backward(const Var& loss) {
  if (loss.graph_ != this) throw std::logic_error("loss belongs to another graph");
  if (nodes_[loss.id_].value.numel() != 1) {
    throw ShapeError("backward: loss must have one element, got shape " +
                     shape_str(nodes_[loss.id_].value.shape()));
  }
  Gradients result;
  // Every trainable leaf gets an entry; unreachable ones stay zero.
  for (std::size_t i = 0; i <= loss.id_; ++i) {
    if (nodes_[i].trainable_leaf) result.grads_.emplace(i, Tensor::zeros(nodes_[i].value.shape()));
  }
  if (!nodes_[loss.id_].requires_grad) return result;

  // Only nodes reachable from the loss take part.
  std::vector<char> reachable(loss.id_ + 1, 0);
  reachable[loss.id_] = 1;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    if (!reachable[i] || !nodes_[i].requires_grad) continue;
    for (std::size_t in : nodes_[i].inputs) reachable[in] = 1;
  }

  pending_.assign(loss.id_ + 1, Tensor());
  has_pending_.assign(loss.id_ + 1, 0);
  pending_[loss.id_] = Tensor::ones(nodes_[loss.id_].value.shape());
  has_pending_[loss.id_] = 1;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!reachable[i] || !node.requires_grad || !has_pending_[i]) continue;
    if (node.trainable_leaf) {
      result.grads_[i] = pending_[i];
    } else if (node.backward) {
      const Tensor grad = pending_[i];
      node.backward(*this, grad);
    }
    pending_[i] = Tensor();
  }
  pending_.clear();
  has_pending_.clear();
  return result;
}

}  // namespace tmerge::num
