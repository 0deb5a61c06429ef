// Reverse-mode tape. Operations append nodes in execution order, so node
// indices are already a topological order; the backward sweep walks them
// once in reverse and accumulates gradients per node.
#pragma once

#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "odesr/errors.hpp"
#include "odesr/tensor.hpp"

namespace odesr {

template <typename Real>
class Tape {
 public:
  // Receives the accumulated upstream gradient of the node's output and
  // pushes contributions into the node's inputs via accumulate().
  using Backward = std::function<void(Tape&, const Tensor<Real>&)>;

  // Registers a parameter or input as a leaf and stamps its node handle.
  int watch(Tensor<Real>& leaf) {
    leaf.node = add_node(leaf.shape(), nullptr, 0);
    return leaf.node;
  }

  // Records one primitive. `saved` is the number of forward-value elements
  // the closure captured; the tape's saved-value ledger is how memory
  // contracts are asserted.
  int add_node(const Shape& out_shape, Backward back, std::size_t saved) {
    nodes_.push_back(Node{out_shape, std::move(back), saved});
    saved_values_ += saved;
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t saved_values() const { return saved_values_; }

  // Drops every node recorded after `mark` together with its saved values.
  // Used to exclude rejected solver steps from the graph.
  void truncate(std::size_t mark) {
    while (nodes_.size() > mark) {
      saved_values_ -= nodes_.back().saved;
      nodes_.pop_back();
    }
    if (grads_.size() > nodes_.size()) grads_.resize(nodes_.size());
  }

  void backward(int node) {
    if (!valid(node)) throw state_error("backward on unknown tape node");
    if (!(nodes_[node].shape == Shape{1, 1, 1, 1})) {
      throw config_error("backward without a seed requires a scalar node");
    }
    backward(node, Tensor<Real>::scalar(Real(1)));
  }

  void backward(int node, const Tensor<Real>& seed) {
    if (nodes_.empty()) throw state_error("backward on a cleared tape");
    if (!valid(node)) throw state_error("backward on unknown tape node");
    if (!(seed.shape() == nodes_[node].shape)) {
      throw config_error("backward seed shape " + seed.shape().str() +
                         " does not match node shape " +
                         nodes_[node].shape.str());
    }
    grads_.assign(nodes_.size(), Tensor<Real>());
    accumulate(node, seed);
    for (int i = node; i >= 0; --i) {
      if (!grads_[i].empty() && nodes_[i].back) {
        nodes_[i].back(*this, grads_[i]);
      }
    }
  }

  // Adds a contribution into a node's gradient; no-op for detached handles.
  void accumulate(int node, const Tensor<Real>& g) {
    if (node == kDetached) return;
    if (!valid(node)) throw state_error("accumulate on unknown tape node");
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    Tensor<Real>& dst = grads_[node];
    if (dst.empty()) {
      dst = g;
      return;
    }
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += g.data()[i];
  }

  bool has_gradient(int node) const {
    return valid(node) && node < static_cast<int>(grads_.size()) &&
           !grads_[node].empty();
  }

  // Total derivative of the last backward()'s seed node w.r.t. this node;
  // exactly zero for nodes the seed does not reach.
  Tensor<Real> gradient(int node) const {
    if (!valid(node)) throw state_error("gradient of unknown tape node");
    if (has_gradient(node)) return grads_[node];
    return Tensor<Real>(nodes_[node].shape, Real(0));
  }

  void clear() {
    nodes_.clear();
    grads_.clear();
    saved_values_ = 0;
  }

 private:
  struct Node {
    Shape shape;
    Backward back;
    std::size_t saved;
  };

  bool valid(int node) const {
    return node >= 0 && node < static_cast<int>(nodes_.size());
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<Real>> grads_;
  std::size_t saved_values_ = 0;
};

}  // namespace odesr
