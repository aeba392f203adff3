#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cksp/tensor.hpp"

namespace cksp {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const {
    if (tape_ == nullptr) throw std::logic_error("Var is not bound to a tape");
    return *tape_;
  }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::span<const double> grad() const;
  bool needs_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// What a backward rule sees: the output gradient and, per input, its value
/// and a gradient buffer to accumulate into (empty when the input is not
/// differentiable).
struct BackwardContext {
  std::span<const double> out_grad;
  const Tensor* out_value = nullptr;
  std::vector<const Tensor*> in_values;
  std::vector<std::span<double>> in_grads;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Records operations in execution order; backward() replays them in
/// reverse. Leaves created from a requires_grad Tensor accumulate their
/// gradient into that tensor.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor& param) {
    Node node;
    node.op = "leaf";
    node.value = Tensor(param.shape(), param.values());
    node.needs_grad = param.requires_grad();
    if (node.needs_grad) {
      node.param = &param;
      node.grad.assign(node.value.numel(), 0.0);
    }
    return push(std::move(node));
  }

  /// A leaf that owns its gradient on the tape (read it back via Var::grad()).
  Var variable(Tensor value) {
    Node node;
    node.op = "variable";
    node.value = std::move(value);
    node.needs_grad = true;
    node.grad.assign(node.value.numel(), 0.0);
    return push(std::move(node));
  }

  Var constant(Tensor value) {
    Node node;
    node.op = "constant";
    node.value = std::move(value);
    return push(std::move(node));
  }

  /// Append an operation result. Inputs must already be on this tape.
  Var record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    Node node;
    node.op = op;
    node.value = std::move(value);
    for (const Var& in : inputs) {
      if (&in.tape() != this) throw std::logic_error(std::string(op) + ": input from another tape");
      if (in.id() >= nodes_.size()) throw std::logic_error(std::string(op) + ": input not yet recorded");
      node.inputs.push_back(in.id());
      node.needs_grad = node.needs_grad || nodes_[in.id()].needs_grad;
    }
    if (numeric_checks_enabled() && !node.value.is_finite()) {
      throw NumericError(std::string("non-finite output from op '") + op + "'");
    }
    if (node.needs_grad) {
      node.grad.assign(node.value.numel(), 0.0);
      node.backward = std::move(backward);
    }
    return push(std::move(node));
  }

  /// Reverse sweep from a scalar loss. Gradients are added to leaf tensors.
  void backward(const Var& loss) {
    if (&loss.tape() != this) throw std::logic_error("backward: loss belongs to another tape");
    if (backward_done_) throw std::logic_error("backward called twice without reset()");
    Node& root = nodes_.at(loss.id());
    if (root.value.numel() != 1) {
      throw ShapeError("backward requires a scalar loss, got " + shape_str(root.value.shape()));
    }
    if (!root.needs_grad) throw std::logic_error("backward: loss does not depend on any differentiable input");
    backward_done_ = true;
    root.grad[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.needs_grad) continue;
      if (node.backward) {
        BackwardContext ctx;
        ctx.out_grad = node.grad;
        ctx.out_value = &node.value;
        for (std::size_t in : node.inputs) {
          Node& src = nodes_[in];
          ctx.in_values.push_back(&src.value);
          ctx.in_grads.push_back(src.needs_grad ? std::span<double>(src.grad) : std::span<double>());
        }
        node.backward(ctx);
      }
      if (node.param != nullptr) {
        auto dst = node.param->grad();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += node.grad[k];
      }
    }
  }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  std::span<const double> grad(std::size_t id) const { return nodes_.at(id).grad; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor* param = nullptr;
    bool needs_grad = false;
  };

  Var push(Node node) {
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape().value(id_); }
inline std::span<const double> Var::grad() const { return tape().grad(id_); }
inline bool Var::needs_grad() const { return tape().needs_grad(id_); }

}  // namespace cksp
