#pragma once

#include <map>
#include <vector>

#include "mtask/tensor.hpp"

namespace mtask {

using NodeId = int;

enum class Op {
  Leaf,
  Add,
  Sub,
  Mul,
  MatMul,
  Conv2d,
  MaxPool2d,
  Relu,
  Exp,
  Log,
  Abs,
  Square,
  Sqrt,
  MeanReduce,
  VarReduce,
  SumReduce,
  Concat,
  Broadcast,
  Reshape,
};

const char* op_name(Op op);

// Per-op attributes. Only the fields relevant to the op kind are read.
struct Attrs {
  int axis = -1;     // reductions: -1 all, 0 over rows (per-feature), 1 over cols (per-sample)
  int stride = 1;    // conv / pool
  int pad = 0;       // conv
  int ksize = 2;     // pool window
  Shape shape;       // broadcast target / reshape target
};

struct Node {
  Op op = Op::Leaf;
  std::vector<NodeId> inputs;
  Attrs attrs;
  Tensor out;
  bool requires_grad = false;  // true if any ancestor leaf requires grad
  std::vector<int> aux;        // op scratch (max-pool argmax), refreshed by forward
};

using GradMap = std::map<NodeId, std::vector<double>>;

struct GradCheckResult {
  double max_rel_err = 0.0;  // over entries not flagged as kinks
  std::vector<int> flagged;  // leaf entries skipped: probe straddles a relu/abs/pool/sqrt kink
  int checked = 0;
};

// Reverse-mode tape. Nodes are appended with their forward value computed
// eagerly; every input id refers to an earlier node, so the stored records can
// be re-executed in insertion order (used by the finite-difference oracle).
// Single-owner during construction; see module docs for the threading rules.
class Graph {
 public:
  NodeId leaf(Tensor t);
  NodeId constant(Tensor t);  // leaf with requires_grad forced off
  NodeId scalar(double v);

  // Generic entry point: validates and executes `op` over `inputs`.
  NodeId push(Op op, std::vector<NodeId> inputs, Attrs attrs = {});

  NodeId add(NodeId a, NodeId b) { return push(Op::Add, {a, b}); }
  NodeId sub(NodeId a, NodeId b) { return push(Op::Sub, {a, b}); }
  NodeId mul(NodeId a, NodeId b) { return push(Op::Mul, {a, b}); }
  NodeId matmul(NodeId a, NodeId b) { return push(Op::MatMul, {a, b}); }
  NodeId conv2d(NodeId x, NodeId w, NodeId b, int stride = 1, int pad = 0);
  NodeId maxpool2d(NodeId x, int ksize = 2, int stride = 0);
  NodeId relu(NodeId a) { return push(Op::Relu, {a}); }
  NodeId exp(NodeId a) { return push(Op::Exp, {a}); }
  NodeId log(NodeId a) { return push(Op::Log, {a}); }
  NodeId abs(NodeId a) { return push(Op::Abs, {a}); }
  NodeId square(NodeId a) { return push(Op::Square, {a}); }
  NodeId sqrt(NodeId a) { return push(Op::Sqrt, {a}); }
  NodeId mean(NodeId a, int axis = -1);
  NodeId variance(NodeId a, int axis = -1);  // biased (divide by count)
  NodeId sum(NodeId a, int axis = -1);
  NodeId concat(NodeId a, NodeId b);  // along the last axis
  // axis = dimension of `target` along which the input values vary;
  // -1 broadcasts a single-element tensor everywhere.
  NodeId broadcast_to(NodeId a, Shape target, int axis = -1);
  NodeId reshape(NodeId a, Shape target);

  const Node& node(NodeId id) const;
  const Tensor& value(NodeId id) const { return node(id).out; }
  size_t size() const { return nodes_.size(); }

  // Fills `grad` on every requires-grad node reachable from `loss` and
  // returns the gradients of the requires-grad leaves. Gradients accumulate
  // additively across fan-out. `loss` must be scalar.
  GradMap backward(NodeId loss);

  // Overwrites a leaf's values (fixed shape) and nothing else.
  void set_leaf_values(NodeId id, const std::vector<double>& v);

  // Re-executes all recorded ops in insertion order from current leaf values.
  void recompute();

  // Central-difference check of d(loss)/d(leaf). Relative error per entry is
  // |analytic - numeric| / max(1, |analytic|, |numeric|). Entries whose probe
  // crosses a relu/abs/max-pool/sqrt kink are flagged, not scored. Leaf values
  // are restored on exit.
  GradCheckResult grad_check(NodeId loss, NodeId leaf, double eps);

  // The numeric side of grad_check, exposed so tests can compare it against
  // arbitrary gradient vectors (e.g. deliberately corrupted ones).
  std::vector<double> fd_gradient(NodeId loss, NodeId leaf, double eps,
                                  std::vector<int>* flagged = nullptr);

 private:
  std::vector<Node> nodes_;

  void forward_node(Node& n);
  void check_id(NodeId id, const char* who) const;
  std::vector<int> kink_signature(double eps) const;
};

}  // namespace mtask
