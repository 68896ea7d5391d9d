#include "blspkd/numerics/tape.hpp"

#include <atomic>
#include <cmath>

namespace blspkd::num {

namespace {
#ifdef NDEBUG
std::atomic<bool> g_finite_checks{false};
#else
std::atomic<bool> g_finite_checks{true};
#endif
}  // namespace

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks() { return g_finite_checks.load(); }

template <class T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.storage()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template bool all_finite(const Tensor<float>&);
template bool all_finite(const Tensor<double>&);

template <class T>
Var<T> Tape<T>::emplace(std::string_view op, Tensor<T> value, Parameter<T>* p, bool rg,
                        BackwardFn fn) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.param = p;
  n.requires_grad = rg;
  n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Tape<T>::push(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                     BackwardFn fn) {
  return push(op, std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
}

template <class T>
Var<T> Tape<T>::push(std::string_view op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                     BackwardFn fn) {
  if (finite_checks() && !all_finite(value)) {
    throw NumericalError("non-finite value produced by op '" + std::string(op) + "'");
  }
  bool rg = false;
  if (record_) {
    for (const auto& in : inputs) {
      if (&in.tape() != this) throw ContractError("op mixes vars from different tapes");
      rg = rg || in.requires_grad();
    }
  }
  return emplace(op, std::move(value), nullptr, rg, rg ? std::move(fn) : BackwardFn{});
}

template <class T>
Tensor<T>& Tape<T>::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) {
    const Tensor<T>& v = value(id);
    n.grad = Tensor<T>(v.rows(), v.cols());
  }
  return n.grad;
}

template <class T>
const Tensor<T>& Tape<T>::grad_of(Var<T> v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) throw ContractError("no gradient recorded for node");
  return n.grad;
}

template <class T>
void Tape<T>::backward(Var<T> loss) {
  if (&loss.tape() != this) throw ContractError("loss belongs to another tape");
  const Tensor<T>& lv = value(loss.id());
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ContractError("backward requires a scalar loss, got " + shape_str(lv));
  }
  if (!record_) throw ContractError("backward on a non-recording tape");
  if (backward_done_) throw ContractError("backward already ran on this tape");
  backward_done_ = true;

  grad(loss.id())(0, 0) = T(1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }
  for (auto& n : nodes_) {
    if (n.param == nullptr || n.grad.empty()) continue;
    Parameter<T>& p = *n.param;
    if (!p.grad.same_shape(p.value)) p.zero_grad();
    auto& dst = p.grad.storage();
    const auto& src = n.grad.storage();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

template <class T>
std::size_t Tape<T>::recorded_ops() const {
  std::size_t c = 0;
  for (const auto& n : nodes_) c += n.backward ? 1 : 0;
  return c;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace blspkd::num
