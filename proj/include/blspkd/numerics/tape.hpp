#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include "blspkd/numerics/tensor.hpp"

namespace blspkd::num {

// Persistent learnable (or frozen) weight. Lives outside any tape; a tape
// leaf created from it accumulates into `grad` on backward.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() {
    if (!grad.same_shape(value)) grad = Tensor<T>(value.rows(), value.cols());
    else grad.fill(T(0));
  }
};

// Runtime switch for the after-op NaN/Inf assertion. Defaults to on in
// debug builds.
void set_finite_checks(bool enabled);
bool finite_checks();

template <class T>
class Tape;

template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Ordered record of executed ops. Backward walks the record in reverse,
// visiting each op with a recorded closure exactly once.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record_grad = true) : record_(record_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Tensor<T> value) {
    return emplace("constant", std::move(value), nullptr, false, nullptr);
  }

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    return emplace("leaf", std::move(value), nullptr, requires_grad && record_, nullptr);
  }

  Var<T> param(Parameter<T>& p) {
    const bool rg = p.trainable && record_;
    return emplace("param", Tensor<T>{}, &p, rg, nullptr);
  }

  // Frozen view of a parameter: never receives gradient.
  Var<T> frozen(const Parameter<T>& p) {
    Node n;
    n.op = "frozen";
    n.ref = &p.value;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  // Record an op. The closure is kept only when recording and at least one
  // input requires gradient.
  Var<T> push(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
              BackwardFn fn);
  Var<T> push(std::string_view op, Tensor<T> value, const std::vector<Var<T>>& inputs,
              BackwardFn fn);

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    if (n.param != nullptr) return n.param->value;
    if (n.ref != nullptr) return *n.ref;
    return n.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  // Gradient buffer for node `id`, zero-allocated on first access.
  Tensor<T>& grad(std::size_t id);
  const Tensor<T>& grad_of(Var<T> v) const;

  // Seeds d(loss)/d(loss) = 1 and propagates. Loss must be a 1×1 node.
  void backward(Var<T> loss);

  std::size_t size() const { return nodes_.size(); }
  std::size_t recorded_ops() const;
  std::string_view op_name(std::size_t id) const { return nodes_[id].op; }

 private:
  struct Node {
    std::string_view op;
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Parameter<T>* param = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> emplace(std::string_view op, Tensor<T> value, Parameter<T>* p, bool rg, BackwardFn fn);

  bool record_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace blspkd::num
