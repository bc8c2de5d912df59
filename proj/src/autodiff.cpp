#include "cmcl/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "cmcl/error.hpp"

namespace cmcl {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

namespace {

ConstMap as_mat(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
MutMap as_mat(Tensor& t) { return MutMap(t.data().data(), t.rows(), t.cols()); }

Tensor from_mat(const RowMat& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  as_mat(t) = m;
  return t;
}

void require_rank2(const Var& v, const char* op) {
  if (!v.valid()) throw ShapeError(std::string(op) + ": invalid (empty) operand");
  if (v.value().rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 operand, got " + shape_str(v.shape()));
}

void require_same_tape(const Var& a, const Var& b, const char* op) {
  if (a.tape() != b.tape()) throw Error(std::string(op) + ": operands live on different tapes");
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

inline std::uint64_t mix_hash(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

}  // namespace

const Tensor& Var::value() const { return tape_->value(id_); }

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NumericalError("constant: non-finite value");
  nodes_.push_back(Node{std::move(value), Tensor{}, {}, {}, 0, "constant"});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  if (!value.all_finite()) throw NumericalError("variable: non-finite value");
  nodes_.push_back(Node{std::move(value), Tensor{}, {}, {}, kFreeLeafBit, "variable"});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
  Var v;
  if (!p.trainable) {
    v = constant(p.value);
  } else {
    if (!p.value.all_finite()) throw NumericalError("param '" + p.name + "': non-finite value");
    nodes_.push_back(Node{p.value, Tensor{}, {}, {}, group_bit(p.group), "param"});
    v = Var(this, nodes_.size() - 1);
    param_leaves_.emplace_back(v.id(), &p);
  }
  bound_.emplace(&p, v.id());
  return v;
}

Var Tape::push(Tensor value, std::vector<std::size_t> parents, BackwardFn backward, const char* op) {
  if (!value.all_finite()) throw NumericalError(std::string(op) + ": non-finite output");
  GroupMask mask = 0;
  for (std::size_t p : parents) mask |= nodes_.at(p).mask;
  if (mask == 0) backward = nullptr;
  nodes_.push_back(Node{std::move(value), Tensor{}, std::move(parents), std::move(backward), mask, op});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var root, GroupMask allowed) {
  if (root.tape() != this) throw Error("backward: root belongs to another tape");
  if (backward_done_) throw Error("backward: gradients already computed; call zero_grad() first");
  if (root.value().size() != 1) throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape()));
  if (nodes_[root.id()].mask == 0) throw Error("backward: root is detached from every trainable leaf");
  backward_done_ = true;
  allowed_ = allowed;
  grad_buffer(root.id())[0] = 1.0;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty() || !n.backward || !(n.mask & allowed_)) continue;
    n.backward(*this, id);
  }
  allowed_ = kAllGroups;
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n.grad = Tensor{};
  backward_done_ = false;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::accumulate_param_grads(GroupMask mask) const {
  for (const auto& [id, p] : param_leaves_) {
    if (!(group_bit(p->group) & mask)) continue;
    const Tensor& g = nodes_[id].grad;
    if (g.empty()) continue;
    for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
  }
}

void Tape::note_branch(BranchKind kind, std::uint64_t decision, double margin) {
  branch_hash_ = mix_hash(branch_hash_, (decision << 3) ^ static_cast<std::uint64_t>(kind));
  double& m = min_margin_[static_cast<int>(kind)];
  m = std::min(m, margin);
}

// ---------------------------------------------------------------------------
// Ops

namespace ad {

Var matmul(Var a, Var b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  require_same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) shape_mismatch("matmul", a.shape(), b.shape());
  Tape& t = *a.tape();
  RowMat out = as_mat(a.value()) * as_mat(b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(from_mat(out), {ia, ib},
                [ia, ib](Tape& tp, std::size_t self) {
                  ConstMap g = as_mat(tp.out_grad(self));
                  if (tp.wants_grad(ia)) as_mat(tp.grad_buffer(ia)).noalias() += g * as_mat(tp.value(ib)).transpose();
                  if (tp.wants_grad(ib)) as_mat(tp.grad_buffer(ib)).noalias() += as_mat(tp.value(ia)).transpose() * g;
                },
                "matmul");
}

Var transpose(Var a) {
  require_rank2(a, "transpose");
  const std::size_t ia = a.id();
  RowMat out = as_mat(a.value()).transpose();
  return a.tape()->push(from_mat(out), {ia},
                        [ia](Tape& tp, std::size_t self) {
                          if (tp.wants_grad(ia)) as_mat(tp.grad_buffer(ia)) += as_mat(tp.out_grad(self)).transpose();
                        },
                        "transpose");
}

namespace {

// Shared body of add/sub: out = a + sign * b with optional row broadcast of b.
Var add_impl(Var a, Var b, double sign, const char* op) {
  require_rank2(a, op);
  require_rank2(b, op);
  require_same_tape(a, b, op);
  const bool broadcast = b.rows() == 1 && a.rows() != 1 && b.cols() == a.cols();
  if (!broadcast && a.shape() != b.shape()) shape_mismatch(op, a.shape(), b.shape());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  const std::size_t cols = out.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * bv[broadcast ? i % cols : i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->push(std::move(out), {ia, ib},
                        [ia, ib, sign, broadcast, cols](Tape& tp, std::size_t self) {
                          const Tensor& g = tp.out_grad(self);
                          if (tp.wants_grad(ia)) {
                            Tensor& ga = tp.grad_buffer(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (tp.wants_grad(ib)) {
                            Tensor& gb = tp.grad_buffer(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[broadcast ? i % cols : i] += sign * g[i];
                          }
                        },
                        op);
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename F, typename D>
Var unary(Var a, const char* op, F f, D dfdx) {
  require_rank2(a, op);
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  const std::size_t ia = a.id();
  return a.tape()->push(std::move(out), {ia},
                        [ia, dfdx](Tape& tp, std::size_t self) {
                          if (!tp.wants_grad(ia)) return;
                          const Tensor& g = tp.out_grad(self);
                          const Tensor& xv = tp.value(ia);
                          const Tensor& yv = tp.value(self);
                          Tensor& ga = tp.grad_buffer(ia);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(xv[i], yv[i]);
                        },
                        op);
}

Var kinked_positive_part(Var a, BranchKind kind, const char* op) {
  require_rank2(a, op);
  Tape& t = *a.tape();
  const Tensor& x = a.value();
  Tensor out(a.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool active = x[i] > 0.0;
    out[i] = active ? x[i] : 0.0;
    t.note_branch(kind, active, std::abs(x[i]));
  }
  const std::size_t ia = a.id();
  return t.push(std::move(out), {ia},
                [ia](Tape& tp, std::size_t self) {
                  if (!tp.wants_grad(ia)) return;
                  const Tensor& g = tp.out_grad(self);
                  const Tensor& xv = tp.value(ia);
                  Tensor& ga = tp.grad_buffer(ia);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    if (xv[i] > 0.0) ga[i] += g[i];
                  }
                },
                op);
}

}  // namespace

Var add(Var a, Var b) { return add_impl(a, b, 1.0, "add"); }
Var sub(Var a, Var b) { return add_impl(a, b, -1.0, "sub"); }

Var mul(Var a, Var b) {
  require_rank2(a, "mul");
  require_rank2(b, "mul");
  require_same_tape(a, b, "mul");
  if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->push(std::move(out), {ia, ib},
                        [ia, ib](Tape& tp, std::size_t self) {
                          const Tensor& g = tp.out_grad(self);
                          if (tp.wants_grad(ia)) {
                            Tensor& ga = tp.grad_buffer(ia);
                            const Tensor& bv2 = tp.value(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
                          }
                          if (tp.wants_grad(ib)) {
                            Tensor& gb = tp.grad_buffer(ib);
                            const Tensor& av = tp.value(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                          }
                        },
                        "mul");
}

Var scale(Var a, double s) {
  return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var concat(std::initializer_list<Var> parts, int axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  Tape& t = *parts[0].tape();
  std::size_t rows = 0, cols = 0;
  for (const Var& p : parts) {
    require_rank2(p, "concat");
    require_same_tape(parts[0], p, "concat");
    if (axis == 0) {
      if (p.cols() != parts[0].cols()) shape_mismatch("concat", parts[0].shape(), p.shape());
      rows += p.rows();
      cols = p.cols();
    } else {
      if (p.rows() != parts[0].rows()) shape_mismatch("concat", parts[0].shape(), p.shape());
      cols += p.cols();
      rows = p.rows();
    }
  }
  Tensor out({rows, cols});
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (axis == 0) {
      std::copy(v.values().begin(), v.values().end(), out.values().begin() + off * cols);
    } else {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < v.cols(); ++c) out.at(r, off + c) = v.at(r, c);
    }
    ids.push_back(p.id());
    offsets.push_back(off);
    off += axis == 0 ? v.rows() : v.cols();
  }
  return t.push(std::move(out), ids,
                [ids, offsets, axis](Tape& tp, std::size_t self) {
                  const Tensor& g = tp.out_grad(self);
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (!tp.wants_grad(ids[k])) continue;
                    Tensor& gp = tp.grad_buffer(ids[k]);
                    if (axis == 0) {
                      const std::size_t base = offsets[k] * g.cols();
                      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[base + i];
                    } else {
                      for (std::size_t r = 0; r < gp.rows(); ++r)
                        for (std::size_t c = 0; c < gp.cols(); ++c) gp.at(r, c) += g.at(r, offsets[k] + c);
                    }
                  }
                },
                "concat");
}

Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice");
  if (axis != 0 && axis != 1) throw ShapeError("slice: axis must be 0 or 1");
  const std::size_t extent = axis == 0 ? a.rows() : a.cols();
  if (begin >= end || end > extent) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for shape " +
                     shape_str(a.shape()));
  }
  const Tensor& v = a.value();
  const std::size_t rows = axis == 0 ? end - begin : v.rows();
  const std::size_t cols = axis == 1 ? end - begin : v.cols();
  Tensor out({rows, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = axis == 0 ? v.at(begin + r, c) : v.at(r, begin + c);
  const std::size_t ia = a.id();
  return a.tape()->push(std::move(out), {ia},
                        [ia, axis, begin](Tape& tp, std::size_t self) {
                          if (!tp.wants_grad(ia)) return;
                          const Tensor& g = tp.out_grad(self);
                          Tensor& ga = tp.grad_buffer(ia);
                          for (std::size_t r = 0; r < g.rows(); ++r)
                            for (std::size_t c = 0; c < g.cols(); ++c) {
                              if (axis == 0) ga.at(begin + r, c) += g.at(r, c);
                              else ga.at(r, begin + c) += g.at(r, c);
                            }
                        },
                        "slice");
}

Var embedding(Var table, std::span<const std::size_t> ids) {
  require_rank2(table, "embedding");
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  const Tensor& tv = table.value();
  const std::size_t d = tv.cols();
  Tensor out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= tv.rows()) {
      throw ShapeError("embedding: id " + std::to_string(ids[r]) + " out of range for table " + shape_str(tv.shape()));
    }
    std::copy_n(tv.values().begin() + ids[r] * d, d, out.values().begin() + r * d);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  const std::size_t it = table.id();
  return table.tape()->push(std::move(out), {it},
                            [it, idv, d](Tape& tp, std::size_t self) {
                              if (!tp.wants_grad(it)) return;
                              const Tensor& g = tp.out_grad(self);
                              Tensor& gt = tp.grad_buffer(it);
                              for (std::size_t r = 0; r < idv.size(); ++r)
                                for (std::size_t c = 0; c < d; ++c) gt[idv[r] * d + c] += g[r * d + c];
                            },
                            "embedding");
}

Var gather(Var a, std::span<const std::size_t> flat_ids) {
  require_rank2(a, "gather");
  if (flat_ids.empty()) throw ShapeError("gather: empty index list");
  const Tensor& v = a.value();
  Tensor out({1, flat_ids.size()});
  for (std::size_t k = 0; k < flat_ids.size(); ++k) {
    if (flat_ids[k] >= v.size()) {
      throw ShapeError("gather: index " + std::to_string(flat_ids[k]) + " out of range for " + shape_str(v.shape()));
    }
    out[k] = v[flat_ids[k]];
  }
  std::vector<std::size_t> idv(flat_ids.begin(), flat_ids.end());
  const std::size_t ia = a.id();
  return a.tape()->push(std::move(out), {ia},
                        [ia, idv](Tape& tp, std::size_t self) {
                          if (!tp.wants_grad(ia)) return;
                          const Tensor& g = tp.out_grad(self);
                          Tensor& ga = tp.grad_buffer(ia);
                          for (std::size_t k = 0; k < idv.size(); ++k) ga[idv[k]] += g[k];
                        },
                        "gather");
}

Var relu(Var a) { return kinked_positive_part(a, BranchKind::kRelu, "relu"); }
Var hinge(Var a) { return kinked_positive_part(a, BranchKind::kHinge, "hinge"); }

Var sigmoid(Var a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  require_rank2(a, "log");
  for (double x : a.value().values()) {
    if (!(x > 0.0)) throw NumericalError("log: non-positive input " + std::to_string(x));
  }
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var clamp_min(Var a, double lo) {
  require_rank2(a, "clamp_min");
  Tape& t = *a.tape();
  const Tensor& x = a.value();
  Tensor out(a.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool pass = x[i] > lo;
    out[i] = pass ? x[i] : lo;
    t.note_branch(BranchKind::kClamp, pass, std::abs(x[i] - lo));
  }
  const std::size_t ia = a.id();
  return t.push(std::move(out), {ia},
                [ia, lo](Tape& tp, std::size_t self) {
                  if (!tp.wants_grad(ia)) return;
                  const Tensor& g = tp.out_grad(self);
                  const Tensor& xv = tp.value(ia);
                  Tensor& ga = tp.grad_buffer(ia);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    if (xv[i] > lo) ga[i] += g[i];
                  }
                },
                "clamp_min");
}

Var softmax(Var a, int axis) {
  require_rank2(a, "softmax");
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  const std::size_t outer = axis == 1 ? rows : cols;
  const std::size_t inner = axis == 1 ? cols : rows;
  auto idx = [=](std::size_t o, std::size_t k) { return axis == 1 ? o * cols + k : k * cols + o; };
  Tensor out(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < inner; ++k) mx = std::max(mx, x[idx(o, k)]);
    double z = 0.0;
    for (std::size_t k = 0; k < inner; ++k) z += (out[idx(o, k)] = std::exp(x[idx(o, k)] - mx));
    for (std::size_t k = 0; k < inner; ++k) out[idx(o, k)] /= z;
  }
  const std::size_t ia = a.id();
  return a.tape()->push(std::move(out), {ia},
                        [ia, outer, inner, idx](Tape& tp, std::size_t self) {
                          if (!tp.wants_grad(ia)) return;
                          const Tensor& g = tp.out_grad(self);
                          const Tensor& y = tp.value(self);
                          Tensor& ga = tp.grad_buffer(ia);
                          for (std::size_t o = 0; o < outer; ++o) {
                            double dot = 0.0;
                            for (std::size_t k = 0; k < inner; ++k) dot += g[idx(o, k)] * y[idx(o, k)];
                            for (std::size_t k = 0; k < inner; ++k) ga[idx(o, k)] += y[idx(o, k)] * (g[idx(o, k)] - dot);
                          }
                        },
                        "softmax");
}

Var max_axis(Var a, int axis) {
  require_rank2(a, "max_axis");
  if (axis != 0 && axis != 1) throw ShapeError("max_axis: axis must be 0 or 1");
  Tape& t = *a.tape();
  const Tensor& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  const std::size_t outer = axis == 1 ? rows : cols;
  const std::size_t inner = axis == 1 ? cols : rows;
  auto idx = [=](std::size_t o, std::size_t k) { return axis == 1 ? o * cols + k : k * cols + o; };
  Tensor out(axis == 1 ? Shape{rows, 1} : Shape{1, cols});
  std::vector<std::size_t> arg(outer);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < inner; ++k) {
      if (x[idx(o, k)] > x[idx(o, best)]) best = k;
    }
    double runner_up = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < inner; ++k) {
      if (k != best) runner_up = std::min(runner_up, x[idx(o, best)] - x[idx(o, k)]);
    }
    arg[o] = idx(o, best);
    out[o] = x[arg[o]];
    t.note_branch(BranchKind::kArgmax, best, runner_up);
  }
  const std::size_t ia = a.id();
  return t.push(std::move(out), {ia},
                [ia, arg](Tape& tp, std::size_t self) {
                  if (!tp.wants_grad(ia)) return;
                  const Tensor& g = tp.out_grad(self);
                  Tensor& ga = tp.grad_buffer(ia);
                  for (std::size_t o = 0; o < arg.size(); ++o) ga[arg[o]] += g[o];
                },
                "max_axis");
}

Var cosine_similarity(Var a, Var b) {
  require_rank2(a, "cosine_similarity");
  require_rank2(b, "cosine_similarity");
  require_same_tape(a, b, "cosine_similarity");
  if (a.cols() != b.cols()) shape_mismatch("cosine_similarity", a.shape(), b.shape());
  ConstMap am = as_mat(a.value()), bm = as_mat(b.value());
  Eigen::VectorXd na = am.rowwise().norm(), nb = bm.rowwise().norm();
  if (na.size() && na.minCoeff() < 1e-12) throw NumericalError("cosine_similarity: left operand has a zero-norm row");
  if (nb.size() && nb.minCoeff() < 1e-12) throw NumericalError("cosine_similarity: right operand has a zero-norm row");
  RowMat denom = na * nb.transpose();
  RowMat out = (am * bm.transpose()).cwiseQuotient(denom);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->push(from_mat(out), {ia, ib},
                        [ia, ib, na, nb](Tape& tp, std::size_t self) {
                          ConstMap g = as_mat(tp.out_grad(self));
                          ConstMap y = as_mat(tp.value(self));
                          ConstMap av = as_mat(tp.value(ia)), bv = as_mat(tp.value(ib));
                          RowMat gs = g.cwiseQuotient(na * nb.transpose());
                          RowMat gy = g.cwiseProduct(y);
                          if (tp.wants_grad(ia)) {
                            Eigen::VectorXd coef = gy.rowwise().sum().cwiseQuotient(na.cwiseAbs2());
                            as_mat(tp.grad_buffer(ia)).noalias() += gs * bv - coef.asDiagonal() * av;
                          }
                          if (tp.wants_grad(ib)) {
                            Eigen::VectorXd coef = gy.colwise().sum().transpose().cwiseQuotient(nb.cwiseAbs2());
                            as_mat(tp.grad_buffer(ib)).noalias() += gs.transpose() * av - coef.asDiagonal() * bv;
                          }
                        },
                        "cosine_similarity");
}

Var sum(Var a) {
  require_rank2(a, "sum");
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return a.tape()->push(Tensor::scalar(s), {ia},
                        [ia](Tape& tp, std::size_t self) {
                          if (!tp.wants_grad(ia)) return;
                          const double g = tp.out_grad(self)[0];
                          Tensor& ga = tp.grad_buffer(ia);
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
                        },
                        "sum");
}

Var sum_axis(Var a, int axis) {
  require_rank2(a, "sum_axis");
  if (axis != 0 && axis != 1) throw ShapeError("sum_axis: axis must be 0 or 1");
  ConstMap m = as_mat(a.value());
  RowMat out = axis == 0 ? RowMat(m.colwise().sum()) : RowMat(m.rowwise().sum());
  const std::size_t ia = a.id();
  return a.tape()->push(from_mat(out), {ia},
                        [ia, axis](Tape& tp, std::size_t self) {
                          if (!tp.wants_grad(ia)) return;
                          const Tensor& g = tp.out_grad(self);
                          Tensor& ga = tp.grad_buffer(ia);
                          for (std::size_t r = 0; r < ga.rows(); ++r)
                            for (std::size_t c = 0; c < ga.cols(); ++c) ga.at(r, c) += axis == 0 ? g[c] : g[r];
                        },
                        "sum_axis");
}

Var detach(Var a) {
  require_rank2(a, "detach");
  return a.tape()->push(a.value(), {}, nullptr, "detach");
}

}  // namespace ad
}  // namespace cmcl
