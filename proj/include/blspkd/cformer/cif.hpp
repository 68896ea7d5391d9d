#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "blspkd/numerics/ops.hpp"

namespace blspkd::cif {

using num::Tape;
using num::Tensor;
using num::Var;

struct DegenerateInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// α_i = sigmoid(last channel of s_pre); returns l × 1.
template <class T>
Var<T> compute_alphas(Var<T> s_pre);

// α_i · n / Σα. The last entry is set to n − Σ_{i<l} α_i so the sum is n in
// working precision; its gradient is that of the plain formula.
template <class T>
Var<T> normalize_alphas(Var<T> raw, std::size_t n);

// Left-to-right accumulation of normalized weights into an l × n alignment:
// with C_i = α_1 + … + α_i (C_l pinned to n),
//   A_ij = max(0, min(C_i, j) − max(C_{i−1}, j − 1)).
// Differentiable in α except at integer crossings.
template <class T>
Var<T> fire(Var<T> normalized, std::size_t n);

// Inference firing on raw α: a column is emitted each time the accumulator
// crosses a multiple of `threshold`; a leftover ≥ threshold/2 emits one more.
template <class T>
Tensor<T> fire_inference(const Tensor<T>& raw, double threshold = 1.0);

// s_cif = Aᵀ · s_pre[:, :d−1] · M  with M of shape (d−1) × d.
template <class T>
Var<T> integrate(Var<T> alignment, Var<T> s_pre, Var<T> m);

struct AlignmentCheck {
  double worst_row = 0.0;  // max |Σ_j A_ij − α_i|
  double worst_col = 0.0;  // max |Σ_i A_ij − 1|
  bool monotone = true;    // consecutive support, nondecreasing first column
  bool nonnegative = true;
};

// Checks the alignment-matrix invariants (alpha may be l × 1 or empty to skip rows).
template <class T>
AlignmentCheck check_alignment(const Tensor<T>& a, const Tensor<T>& alpha);

// Distance of the nearest interior partial sum to an integer; small values
// flag inputs where fire() is not differentiable.
template <class T>
double boundary_margin(const Tensor<T>& normalized);

// Alignment as CSV: header "state,token_1,...", one row per state.
template <class T>
std::string alignment_csv(const Tensor<T>& a);

}  // namespace blspkd::cif
