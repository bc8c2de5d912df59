#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <unordered_map>
#include <vector>

#include "cmcl/params.hpp"
#include "cmcl/tensor.hpp"

namespace cmcl {

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Kinds of non-smooth decisions recorded during a forward pass.
enum class BranchKind : std::uint8_t { kRelu, kHinge, kArgmax, kClamp };

// Dynamic reverse-mode tape. Rebuilt per batch; confined to one thread.
//
// Every node carries a group mask (the union of parameter groups reachable
// below it). Constants have an empty mask and never receive gradient.
// backward() accepts an `allowed` mask and does not descend into subgraphs
// that cannot reach an allowed group; this is how per-term gradient routing
// is applied without rebuilding the graph.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Free leaf that receives gradient (not tied to a Parameter).
  Var variable(Tensor value);
  // Leaf bound to a parameter. Memoized per tape; frozen parameters become constants.
  Var param(Parameter& p);

  // Registers an op result. `backward` may be empty when no parent requires grad.
  Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn backward, const char* op);

  void backward(Var root, GroupMask allowed = kAllGroups);
  void zero_grad();

  // Gradient of a node after backward(); zeros if nothing flowed into it.
  Tensor grad(Var v) const;
  // Adds gradients of bound parameters whose group is in `mask` into Parameter::grad.
  void accumulate_param_grads(GroupMask mask = kAllGroups) const;

  // -- for op implementations ------------------------------------------------
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& out_grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].mask != 0; }
  // True when gradient should be propagated into `id` in the current backward pass.
  bool wants_grad(std::size_t id) const { return (nodes_[id].mask & allowed_) != 0; }
  // Gradient buffer for `id`, allocated as zeros on first use.
  Tensor& grad_buffer(std::size_t id);

  void note_branch(BranchKind kind, std::uint64_t decision, double margin);
  // Hash of every non-smooth decision taken in the forward pass. Two forward
  // passes with equal signatures lie on the same smooth piece.
  std::uint64_t branch_signature() const { return branch_hash_; }
  double min_branch_margin(BranchKind kind) const { return min_margin_[static_cast<int>(kind)]; }

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    GroupMask mask = 0;
    const char* op = "";
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> bound_;
  std::vector<std::pair<std::size_t, Parameter*>> param_leaves_;
  bool backward_done_ = false;
  GroupMask allowed_ = kAllGroups;
  std::uint64_t branch_hash_ = 1469598103934665603ULL;
  double min_margin_[4] = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                           std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
};

// Differentiable operations. All operate on rank-2 tensors; vectors are rows.
namespace ad {

Var matmul(Var a, Var b);
Var transpose(Var a);
// a + b; b may also be a 1 x cols row broadcast over the rows of a.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var concat(std::span<const Var> parts, int axis);
Var concat(std::initializer_list<Var> parts, int axis);
Var slice(Var a, int axis, std::size_t begin, std::size_t end);
// Rows of `table` selected by `ids`.
Var embedding(Var table, std::span<const std::size_t> ids);
// Flat (row-major) element gather; result is 1 x ids.size().
Var gather(Var a, std::span<const std::size_t> flat_ids);
Var relu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var softmax(Var a, int axis);
// Max along an axis; the gradient goes to the first maximal index.
Var max_axis(Var a, int axis);
// Cosine similarity of every row of a against every row of b: a.rows x b.rows.
Var cosine_similarity(Var a, Var b);
// max(0, x) elementwise.
Var hinge(Var a);
Var sum(Var a);
Var sum_axis(Var a, int axis);
Var clamp_min(Var a, double lo);
// Same value, no gradient.
Var detach(Var a);

}  // namespace ad
}  // namespace cmcl
