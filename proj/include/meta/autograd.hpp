#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "meta/error.hpp"
#include "meta/tensor.hpp"

namespace meta {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid until the tape
/// is reset or destroyed.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const {
    require(tape_ != nullptr, ErrorKind::state, "use of an empty Var");
    return *tape_;
  }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;
  /// Gradient after the last backward pass; empty if the node was not reached.
  const std::vector<double>& grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. One tape per model invocation; call reset() between
/// iterations. Parameters enter through param(), which routes their gradient
/// straight into Parameter::value.grad.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const std::vector<double>& out_grad)>;

  struct Options {
    bool strict = false;  // reject NaN/Inf inputs to every op
  };

  Tape() = default;
  explicit Tape(Options opts) : opts_(opts) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool strict() const noexcept { return opts_.strict; }
  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor t) {
    t.requires_grad = false;
    t.grad.clear();
    return push(Node{std::move(t), false, true, nullptr, nullptr});
  }

  /// A free leaf whose gradient accumulates on the tape across backward calls.
  Var leaf(Tensor t) {
    if (!grad_enabled_) return constant(std::move(t));
    t.requires_grad = true;
    t.zero_grad();
    return push(Node{std::move(t), true, true, nullptr, nullptr});
  }

  Var param(Parameter& p) {
    if (!grad_enabled_) return constant(p.value);
    Tensor t(p.value.shape, p.value.data);
    t.requires_grad = true;
    if (!p.value.has_grad()) p.value.zero_grad();
    return push(Node{std::move(t), true, true, nullptr, &p});
  }

  /// Records an op output. `fn` is kept only when some input requires grad.
  Var record(Tensor value, bool needs_grad, BackwardFn fn) {
    const bool rg = needs_grad && grad_enabled_;
    value.requires_grad = rg;
    return push(Node{std::move(value), rg, false, rg ? std::move(fn) : nullptr, nullptr});
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  const std::vector<double>& grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.param ? n.param->value.grad : n.value.grad;
  }

  /// Accumulation buffer for node `id` during backward.
  std::vector<double>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    std::vector<double>& g = n.param ? n.param->value.grad : n.value.grad;
    if (g.size() != n.value.size()) g.assign(n.value.size(), 0.0);
    return g;
  }

  void backward(Var root) {
    require(root.valid() && &root.tape() == this, ErrorKind::state, "backward root is not on this tape");
    const Node& r = nodes_.at(root.id());
    require(r.value.size() == 1, ErrorKind::shape,
            "backward requires a scalar root, got shape " + shape_str(r.value.shape));
    if (!r.requires_grad) return;
    for (Node& n : nodes_)
      if (!n.leaf) n.value.grad.clear();
    grad_buffer(root.id())[0] += 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.value.grad.empty()) continue;
      n.backward(*this, n.value.grad);
    }
  }

  void reset() { nodes_.clear(); }

  void check_inputs(std::initializer_list<Var> vars) const {
    if (!opts_.strict) return;
    for (const Var& v : vars)
      require(all_finite(v.value().data), ErrorKind::numeric,
              "non-finite value in op input of shape " + shape_str(v.shape()));
  }

  /// Disables gradient recording for its lifetime.
  class NoGradGuard {
   public:
    explicit NoGradGuard(Tape& t) : tape_(t), prev_(t.grad_enabled_) { t.grad_enabled_ = false; }
    ~NoGradGuard() { tape_.grad_enabled_ = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    Tape& tape_;
    bool prev_;
  };

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    bool leaf = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push(Node n) {
    if (opts_.strict && n.leaf)
      require(all_finite(n.value.data), ErrorKind::numeric, "non-finite value in tape input");
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Options opts_;
  bool grad_enabled_ = true;
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape().value(id_); }
inline bool Var::requires_grad() const { return tape().requires_grad(id_); }
inline const std::vector<double>& Var::grad() const { return tape().grad(id_); }

}  // namespace meta
