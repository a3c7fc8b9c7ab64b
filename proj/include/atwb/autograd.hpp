#pragma once

#include <atwb/error.hpp>
#include <atwb/tensor.hpp>

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace atwb {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
};

// Shared handle to a differentiable value. Copies alias the same node, so
// gradient buffers stay writable through const handles.
template <typename T>
class Var {
 public:
  Var() = default;

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    Var v;
    v.node_ = std::make_shared<Node<T>>();
    v.node_->value = std::move(value);
    v.node_->requires_grad = requires_grad;
    return v;
  }

  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  bool defined() const noexcept { return node_ != nullptr; }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }

  const Tensor<T>& grad() const {
    if (!has_grad()) throw Error("Var::grad: no gradient buffer on this value");
    return node_->grad;
  }

  // Zero-initialized on first access.
  Tensor<T>& grad_buffer() const {
    if (node_->grad.empty()) node_->grad = Tensor<T>::zeros_like(node_->value);
    return node_->grad;
  }

  void clear_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
bool any_requires_grad(std::initializer_list<Var<T>> vars) {
  for (const auto& v : vars) {
    if (v.requires_grad()) return true;
  }
  return false;
}

// Records differentiable ops in execution order and replays them in reverse.
// Ops are only recorded when at least one input requires a gradient, so a
// forward pass over constants leaves the tape empty.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<T>& output_grad)>;

  // Wraps `value` as the op's output; records `backward` if any input needs grad.
  Var<T> record(std::string op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward) {
    const bool needs_grad = any_requires_grad(inputs);
    Var<T> out = Var<T>::leaf(std::move(value), needs_grad);
    if (needs_grad) {
      Entry entry{std::move(op), {}, out, std::move(backward)};
      for (const auto& in : inputs) {
        if (in.defined()) entry.inputs.push_back(in);
      }
      entries_.push_back(std::move(entry));
    }
    return out;
  }

  // Populates gradients of every requires_grad value referenced by the tape,
  // resetting them first. Fan-out contributions are summed.
  void backward(const Var<T>& loss) {
    if (!loss.defined() || loss.value().size() != 1) {
      throw Error("backward: loss must be a scalar, got shape " +
                  (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
      throw Error("backward: loss does not depend on any value that requires a gradient");
    }
    for (auto& entry : entries_) {
      entry.output.grad_buffer().fill(T{0});
      for (auto& in : entry.inputs) {
        if (in.requires_grad()) in.grad_buffer().fill(T{0});
      }
    }
    Var<T> root = loss;
    root.grad_buffer().fill(T{1});
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      it->backward(it->output.grad());
    }
  }

  std::size_t size() const noexcept { return entries_.size(); }
  const std::string& op_name(std::size_t i) const { return entries_.at(i).op; }
  const std::vector<Var<T>>& op_inputs(std::size_t i) const { return entries_.at(i).inputs; }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::string op;
    std::vector<Var<T>> inputs;
    Var<T> output;
    BackwardFn backward;
  };

  std::vector<Entry> entries_;
};

// Adds `delta` into v's gradient when v participates in differentiation.
template <typename T>
void accumulate_grad(const Var<T>& v, const Tensor<T>& delta) {
  if (!v.requires_grad()) return;
  auto& g = v.grad_buffer();
  auto dst = g.values();
  auto src = delta.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace atwb
