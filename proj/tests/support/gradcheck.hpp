#pragma once

// Central finite-difference oracle for the autodiff engine (64-bit only).

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "blspkd/numerics/random.hpp"
#include "blspkd/numerics/tape.hpp"

namespace blspkd::testing {

using num::Parameter;
using num::Tape;
using num::Tensor;
using num::Var;

struct GradCheckResult {
  bool ok = true;
  std::size_t checked = 0;
  double worst_abs = 0.0;
  std::string first_failure;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double rtol = 1e-4;
  double atol = 1e-6;
  // Cap on checked coordinates per tensor (0 = all); picks are seeded.
  std::size_t max_per_tensor = 0;
  std::uint64_t seed = 7;
};

inline bool close(double analytic, double numeric, const GradCheckOptions& o) {
  return std::abs(analytic - numeric) <= o.atol + o.rtol * std::max(std::abs(analytic), std::abs(numeric));
}

inline std::vector<std::size_t> pick_indices(std::size_t n, const GradCheckOptions& o,
                                             num::Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (o.max_per_tensor == 0 || n <= o.max_per_tensor) return idx;
  for (std::size_t i = 0; i < o.max_per_tensor; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                            static_cast<std::int64_t>(n - 1)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(o.max_per_tensor);
  return idx;
}

using LeafLoss = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Gradient of build(leaves) w.r.t. each input tensor vs central differences.
inline GradCheckResult check_inputs(std::vector<Tensor<double>> inputs, const LeafLoss& build,
                                    GradCheckOptions o = {}) {
  GradCheckResult res;
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& in : inputs) leaves.push_back(tape.leaf(in));
    auto loss = build(tape, leaves);
    tape.backward(loss);
    for (std::size_t k = 0; k < leaves.size(); ++k) {
      analytic.push_back(tape.has_grad(leaves[k].id())
                             ? tape.grad_of(leaves[k])
                             : Tensor<double>(inputs[k].rows(), inputs[k].cols()));
    }
  }
  auto eval = [&]() {
    Tape<double> tape(false);
    std::vector<Var<double>> leaves;
    for (const auto& in : inputs) leaves.push_back(tape.leaf(in, false));
    return build(tape, leaves).value().item();
  };
  num::Rng rng(o.seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i : pick_indices(inputs[k].size(), o, rng)) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + o.eps;
      const double up = eval();
      inputs[k][i] = orig - o.eps;
      const double dn = eval();
      inputs[k][i] = orig;
      const double numeric = (up - dn) / (2 * o.eps);
      const double a = analytic[k][i];
      ++res.checked;
      res.worst_abs = std::max(res.worst_abs, std::abs(a - numeric));
      if (!close(a, numeric, o) && res.ok) {
        res.ok = false;
        res.first_failure = "input " + std::to_string(k) + "[" + std::to_string(i) +
                            "]: analytic " + std::to_string(a) + " numeric " +
                            std::to_string(numeric);
      }
    }
  }
  return res;
}

using ParamLoss = std::function<Var<double>(Tape<double>&)>;

// Same check for persistent parameters referenced by the loss builder.
inline GradCheckResult check_params(const std::vector<Parameter<double>*>& params,
                                    const ParamLoss& build, GradCheckOptions o = {}) {
  GradCheckResult res;
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    auto loss = build(tape);
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape<double> tape(false);
    return build(tape).value().item();
  };
  num::Rng rng(o.seed);
  for (auto* p : params) {
    if (!p->trainable) continue;
    for (std::size_t i : pick_indices(p->value.size(), o, rng)) {
      const double orig = p->value[i];
      p->value[i] = orig + o.eps;
      const double up = eval();
      p->value[i] = orig - o.eps;
      const double dn = eval();
      p->value[i] = orig;
      const double numeric = (up - dn) / (2 * o.eps);
      const double a = p->grad[i];
      ++res.checked;
      res.worst_abs = std::max(res.worst_abs, std::abs(a - numeric));
      if (!close(a, numeric, o) && res.ok) {
        res.ok = false;
        res.first_failure = p->name + "[" + std::to_string(i) + "]: analytic " +
                            std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return res;
}

}  // namespace blspkd::testing
