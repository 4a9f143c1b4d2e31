#pragma once

#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <vector>

#include "dualtta/ops.hpp"
#include "dualtta/tensor.hpp"

namespace dualtta::ndgrad {

using NodeId = std::size_t;

// Reverse-mode gradients keyed by leaf node id. Every requested trainable
// appears exactly once; leaves the loss does not reach map to all-zeros.
using Gradients = std::map<NodeId, Tensor>;

// Eagerly built computation tape. Node ids are creation-ordered, so the node
// list is already a topological order of the DAG. A tape is consumable once:
// backward() invalidates it for further differentiation.
class Tape {
 public:
  NodeId leaf(Tensor value);
  NodeId apply(OpKind k, std::span<const NodeId> inputs, OpAttrs attrs = {});
  NodeId apply(OpKind k, std::initializer_list<NodeId> inputs, OpAttrs attrs = {});

  const Tensor& value(NodeId id) const;
  bool is_leaf(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

  Gradients backward(NodeId loss, std::span<const NodeId> trainables);

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<NodeId> inputs;
    Tensor out;
    OpAttrs attrs;
    SavedContext ctx;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Gradient-vs-finite-difference harness. `fn` must build a scalar loss on the
// given tape from the supplied parameter leaves, deterministically. Returns
// max over all parameter coordinates of
//   |analytic - central_difference| / max(|analytic|, |central|, 1e-8).
// A function whose value changes between two evaluations at the same point
// invalidates the check (ContractError).
using ScalarTapeFn = std::function<NodeId(Tape&, std::span<const NodeId>)>;
double grad_check(const ScalarTapeFn& fn, const std::vector<Tensor>& params, double fd_step);

}  // namespace dualtta::ndgrad
