#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "blspkd/numerics/tape.hpp"

namespace blspkd::num {

// Linear warmup to `peak` over the first `warmup` steps, constant after.
inline double warmup_lr(double peak, std::size_t step, std::size_t warmup) {
  if (warmup == 0 || step >= warmup) return peak;
  return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

template <class T>
double grad_norm(const std::vector<Parameter<T>*>& params) {
  double s = 0.0;
  for (const auto* p : params) {
    if (!p->trainable || p->grad.empty()) continue;
    for (T g : p->grad.storage()) s += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(s);
}

// Adam with bias correction. State is keyed by position in the parameter
// list, so the list must be stable across steps.
template <class T>
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(const std::vector<Parameter<T>*>& params, double lr) {
    if (m_.empty()) {
      for (const auto* p : params) {
        m_.emplace_back(p->value.rows(), p->value.cols());
        v_.emplace_back(p->value.rows(), p->value.cols());
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter<T>& p = *params[k];
      if (!p.trainable || p.grad.empty()) continue;
      auto& m = m_[k].storage();
      auto& v = v_[k].storage();
      auto& w = p.value.storage();
      const auto& g = p.grad.storage();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        m[i] = static_cast<T>(b1_ * m[i] + (1.0 - b1_) * gi);
        v[i] = static_cast<T>(b2_ * v[i] + (1.0 - b2_) * gi * gi);
        const double mh = m[i] / c1, vh = v[i] / c2;
        w[i] = static_cast<T>(w[i] - lr * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

// Plain gradient descent: w -= lr * g.
template <class T>
void sgd_step(const std::vector<Parameter<T>*>& params, double lr) {
  for (auto* p : params) {
    if (!p->trainable || p->grad.empty()) continue;
    auto& w = p->value.storage();
    const auto& g = p->grad.storage();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(w[i] - lr * g[i]);
  }
}

}  // namespace blspkd::num
