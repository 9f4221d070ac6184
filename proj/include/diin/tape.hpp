#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "diin/errors.hpp"
#include "diin/tensor.hpp"

namespace diin {

// Handle to a node on a Tape. Only meaningful together with the tape that
// produced it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class OpKind : std::uint8_t {
  leaf,
  add,
  add_bias,
  add_outer,
  affine_scalar,
  mul,
  mul_last,
  matmul,
  bmm,
  bmm_nt,
  reshape,
  slice_last,
  concat_last,
  sum_last,
  sum_all,
  relu,
  tanh_act,
  sigmoid_act,
  embed,
  conv2d,
  max_pool2d,
  avg_pool2d,
  global_max_pool,
  max_over_time,
  masked_softmax,
  dropout,
  softmax_xent,
  interact,
};

inline const char* op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::add_bias: return "add_bias";
    case OpKind::add_outer: return "add_outer";
    case OpKind::affine_scalar: return "affine_scalar";
    case OpKind::mul: return "mul";
    case OpKind::mul_last: return "mul_last";
    case OpKind::matmul: return "matmul";
    case OpKind::bmm: return "bmm";
    case OpKind::bmm_nt: return "bmm_nt";
    case OpKind::reshape: return "reshape";
    case OpKind::slice_last: return "slice_last";
    case OpKind::concat_last: return "concat_last";
    case OpKind::sum_last: return "sum_last";
    case OpKind::sum_all: return "sum_all";
    case OpKind::relu: return "relu";
    case OpKind::tanh_act: return "tanh";
    case OpKind::sigmoid_act: return "sigmoid";
    case OpKind::embed: return "embed";
    case OpKind::conv2d: return "conv2d";
    case OpKind::max_pool2d: return "max_pool2d";
    case OpKind::avg_pool2d: return "avg_pool2d";
    case OpKind::global_max_pool: return "global_max_pool";
    case OpKind::max_over_time: return "max_over_time";
    case OpKind::masked_softmax: return "masked_softmax";
    case OpKind::dropout: return "dropout";
    case OpKind::softmax_xent: return "softmax_xent";
    case OpKind::interact: return "interact";
  }
  return "?";
}

// Append-only computation graph with reverse-mode differentiation. Node ids
// are topologically ordered by construction: every input id is smaller than
// the id of the node consuming it. Single-writer; distinct tapes are
// independent.
template <typename T>
class Tape {
 public:
  struct Node {
    OpKind kind = OpKind::leaf;
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated during backward, empty otherwise
    bool requires_grad = false;
    bool has_bias = false;  // conv2d introspection
    std::vector<int> inputs;
    std::string name;  // leaf name, or scope path for ops
    std::function<void(Tape&, int)> backward_fn;
  };

  Var leaf(const Tensor<T>& t, bool requires_grad = false, std::string name = {}) {
    check_shape_valid(t.shape, "Tape::leaf");
    if (shape_numel(t.shape) != t.numel()) {
      throw ShapeError("Tape::leaf: tensor shape/data mismatch for '" + name + "'");
    }
    Node n;
    n.kind = OpKind::leaf;
    n.shape = t.shape;
    n.value = t.data;
    n.requires_grad = requires_grad;
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Op-builder interface.
  int emplace(OpKind kind, Shape shape, std::vector<int> inputs) {
    check_shape_valid(shape, op_kind_name(kind));
    Node n;
    n.kind = kind;
    n.requires_grad = false;
    for (int in : inputs) {
      check_id(in, op_kind_name(kind));
      n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(in)].requires_grad;
    }
    n.inputs = std::move(inputs);
    n.value.assign(static_cast<std::size_t>(shape_numel(shape)), T(0));
    n.shape = std::move(shape);
    n.name = scope();
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void set_backward(int id, std::function<void(Tape&, int)> fn) {
    nodes_[static_cast<std::size_t>(id)].backward_fn = std::move(fn);
  }

  // Called by op builders once the forward value is written.
  void finish_node(int id) {
    if (!check_finite) return;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    for (T v : n.value) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw NumericError(std::string("non-finite value produced by ") + op_kind_name(n.kind) +
                           " in scope '" + n.name + "'");
      }
    }
  }

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }
  const std::vector<Node>& nodes() const { return nodes_; }
  int size() const { return static_cast<int>(nodes_.size()); }

  const Shape& shape(Var v) const { return node(v).shape; }
  const std::vector<T>& value(Var v) const { return node(v).value; }
  std::vector<T>& mutable_value(int id) { return nodes_[static_cast<std::size_t>(id)].value; }

  bool has_grad(Var v) const { return !node(v).grad.empty(); }

  const std::vector<T>& grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) {
      throw ShapeError("Tape::grad: node has no gradient (backward not run or detached)");
    }
    return n.grad;
  }

  Tensor<T> value_tensor(Var v) const {
    const Node& n = node(v);
    return Tensor<T>::from(n.shape, n.value);
  }

  Tensor<T> grad_tensor(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) return Tensor<T>::zeros(n.shape);
    return Tensor<T>::from(n.shape, n.grad);
  }

  // Accumulation buffer for backward; zero-filled on first touch.
  std::vector<T>& grad_buffer(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }

  // Reverse sweep from a scalar loss. Every requires_grad leaf ends up with a
  // gradient; leaves that do not participate in the loss get zeros.
  void backward(Var loss) {
    if (!loss.valid() || loss.id >= size()) {
      throw ShapeError("Tape::backward: loss is not a node of this tape");
    }
    Node& ln = nodes_[static_cast<std::size_t>(loss.id)];
    if (shape_numel(ln.shape) != 1) {
      throw ShapeError("Tape::backward: loss must be scalar, got shape " + shape_str(ln.shape));
    }
    grad_buffer(loss.id)[0] = T(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.empty() || !n.requires_grad) continue;
      if (n.backward_fn) n.backward_fn(*this, id);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (n.kind == OpKind::leaf && n.requires_grad && n.grad.empty()) {
        n.grad.assign(n.value.size(), T(0));
      }
    }
  }

  // Scope stack labels ops for structural introspection.
  void push_scope(const std::string& s) {
    scope_stack_.push_back(scope_stack_.empty() ? s : scope_stack_.back() + "/" + s);
  }
  void pop_scope() { scope_stack_.pop_back(); }
  std::string scope() const { return scope_stack_.empty() ? std::string() : scope_stack_.back(); }

  // When set, every op asserts its output is free of NaN/Inf.
  bool check_finite = false;

 private:
  void check_id(int id, const char* op) const {
    if (id < 0 || id >= size()) {
      throw ShapeError(std::string(op) + ": input is not a node of this tape");
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::string> scope_stack_;
};

// RAII scope label.
template <typename T>
class ScopeGuard {
 public:
  ScopeGuard(Tape<T>& tape, const std::string& name) : tape_(tape) { tape_.push_scope(name); }
  ~ScopeGuard() { tape_.pop_scope(); }
  ScopeGuard(const ScopeGuard&) = delete;
  ScopeGuard& operator=(const ScopeGuard&) = delete;

 private:
  Tape<T>& tape_;
};

}  // namespace diin
