#include "dualtta/tape.hpp"

#include <cmath>
#include <optional>
#include <string>

#include "dualtta/errors.hpp"

namespace dualtta::ndgrad {

NodeId Tape::leaf(Tensor value) {
  Node n;
  n.kind = OpKind::leaf;
  n.out = std::move(value);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

NodeId Tape::apply(OpKind k, std::span<const NodeId> inputs, OpAttrs attrs) {
  std::vector<const Tensor*> vals;
  vals.reserve(inputs.size());
  for (NodeId id : inputs) {
    if (id >= nodes_.size()) throw ContractError("tape apply: input node id out of range");
    vals.push_back(&nodes_[id].out);
  }
  Node n;
  n.kind = k;
  n.inputs.assign(inputs.begin(), inputs.end());
  n.attrs = std::move(attrs);
  n.out = ndgrad::apply(k, vals, n.attrs, &n.ctx);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

NodeId Tape::apply(OpKind k, std::initializer_list<NodeId> inputs, OpAttrs attrs) {
  return apply(k, std::span<const NodeId>(inputs.begin(), inputs.size()), std::move(attrs));
}

const Tensor& Tape::value(NodeId id) const {
  if (id >= nodes_.size()) throw ContractError("tape value: node id out of range");
  return nodes_[id].out;
}

bool Tape::is_leaf(NodeId id) const {
  if (id >= nodes_.size()) throw ContractError("tape is_leaf: node id out of range");
  return nodes_[id].kind == OpKind::leaf;
}

Gradients Tape::backward(NodeId loss, std::span<const NodeId> trainables) {
  if (consumed_) throw ContractError("tape already consumed by a previous backward pass");
  if (loss >= nodes_.size()) throw ContractError("backward: loss node id out of range");
  if (nodes_[loss].out.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_str(nodes_[loss].out.shape()));
  }
  for (NodeId t : trainables) {
    if (t >= nodes_.size() || nodes_[t].kind != OpKind::leaf) {
      throw ContractError("backward: unknown trainable id " + std::to_string(t));
    }
  }
  consumed_ = true;

  std::vector<std::optional<Tensor>> cot(nodes_.size());
  cot[loss] = Tensor::scalar(1.0);
  for (NodeId id = loss + 1; id-- > 0;) {
    if (!cot[id].has_value()) continue;
    const Node& n = nodes_[id];
    if (n.kind == OpKind::leaf) continue;
    std::vector<const Tensor*> vals;
    vals.reserve(n.inputs.size());
    for (NodeId in : n.inputs) vals.push_back(&nodes_[in].out);
    std::vector<Tensor> grads = backward_rule(n.kind, vals, n.out, n.ctx, *cot[id], n.attrs);
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      NodeId in = n.inputs[i];
      if (!cot[in].has_value()) {
        cot[in] = std::move(grads[i]);
      } else {
        Tensor& acc = *cot[in];
        for (std::size_t j = 0; j < acc.numel(); ++j) acc[j] += grads[i][j];
      }
    }
    cot[id].reset();  // free as soon as consumed
  }

  Gradients out;
  for (NodeId t : trainables) {
    if (cot[t].has_value()) {
      out.emplace(t, std::move(*cot[t]));
    } else {
      out.emplace(t, Tensor(nodes_[t].out.shape()));
    }
  }
  return out;
}

double grad_check(const ScalarTapeFn& fn, const std::vector<Tensor>& params, double fd_step) {
  if (fd_step <= 0.0) throw ContractError("grad_check: fd_step must be positive");

  auto eval = [&](const std::vector<Tensor>& p) {
    Tape tape;
    std::vector<NodeId> leaves;
    leaves.reserve(p.size());
    for (const Tensor& t : p) leaves.push_back(tape.leaf(t));
    NodeId loss = fn(tape, leaves);
    if (tape.value(loss).numel() != 1) {
      throw ContractError("grad_check: function must produce a scalar");
    }
    return std::pair<Tape, NodeId>(std::move(tape), loss);
  };

  auto [tape, loss] = eval(params);
  const double base = tape.value(loss)[0];
  {
    auto [tape2, loss2] = eval(params);
    if (tape2.value(loss2)[0] != base) {
      throw ContractError("grad_check: function is not deterministic across evaluations");
    }
  }

  std::vector<NodeId> leaves(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) leaves[i] = i;  // leaves created first, in order
  Gradients analytic = tape.backward(loss, leaves);

  double max_rel = 0.0;
  std::vector<Tensor> work = params;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (std::size_t j = 0; j < params[pi].numel(); ++j) {
      const double orig = work[pi][j];
      work[pi][j] = orig + fd_step;
      auto [tp, lp] = eval(work);
      const double fp = tp.value(lp)[0];
      work[pi][j] = orig - fd_step;
      auto [tm, lm] = eval(work);
      const double fm = tm.value(lm)[0];
      work[pi][j] = orig;
      const double fd = (fp - fm) / (2.0 * fd_step);
      const double an = analytic.at(pi)[j];
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace dualtta::ndgrad
