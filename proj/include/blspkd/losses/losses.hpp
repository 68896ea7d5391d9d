#pragma once

#include <array>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>

#include "blspkd/backbone/transformer.hpp"

namespace blspkd::loss {

using num::Tape;
using num::Tensor;
using num::Var;

struct AlignmentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LossError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Term : std::size_t { cif = 0, input_kl, resp_kl, resp_ce, asr };
inline constexpr std::size_t kTermCount = 5;
inline constexpr std::array<Term, kTermCount> kAllTerms = {Term::cif, Term::input_kl, Term::resp_kl,
                                                           Term::resp_ce, Term::asr};
const char* term_name(Term t);
Term term_from_name(const std::string& s);

inline constexpr double kProbFloor = 1e-12;
// Times a target probability was clamped to kProbFloor (for diagnostics).
std::size_t clamp_events();

// ---- Distribution-level reference forms (rows = positions, probabilities).

// −Σ_j log q_j(y_j).
double resp_ce(const Tensor<double>& student, std::span<const int> y);
// −Σ_j Σ_v p_j(v) log q_j(v): soft cross-entropy, teacher entropy included.
double resp_kl(const Tensor<double>& teacher, const Tensor<double>& student);
// Same form over the input region; a position-count mismatch is an alignment error.
double input_kl(const Tensor<double>& teacher, const Tensor<double>& student);
// |Σ raw − n| / n.
double cif_loss(std::span<const double> raw, std::size_t n);
// Mean over positions of −log q_i(x_i).
double asr_loss(const Tensor<double>& classifier_probs, std::span<const int> x);
double entropy(const Tensor<double>& p);  // Σ over rows
double kl_divergence(const Tensor<double>& p, const Tensor<double>& q);

// ---- Tape forms over logits (used for training; gradients flow to logits).

template <class T>
Var<T> resp_ce(Var<T> student_logits, std::span<const int> y);
// Σ_rows w_r · soft-CE(teacher_r, softmax(logits_r)).
template <class T>
Var<T> soft_ce(Var<T> student_logits, const Tensor<T>& teacher_probs, std::span<const T> row_weight = {});
template <class T>
Var<T> cif_loss(Var<T> raw_alphas, std::size_t n);
// Per-position CE of `head` applied to s_adp, averaged over positions.
template <class T>
Var<T> asr_loss(Var<T> s_adp, std::span<const int> x, const model::Linear<T>& head);

struct Weights {
  std::array<double, kTermCount> lambda{1.0, 1.0, 1.0, 1.0, 1.0};
  double& operator[](Term t) { return lambda[static_cast<std::size_t>(t)]; }
  double operator[](Term t) const { return lambda[static_cast<std::size_t>(t)]; }
};

// Named loss terms with weights; total = Σ λ_k · loss_k over present terms.
template <class T>
struct LossBundle {
  std::array<std::optional<Var<T>>, kTermCount> terms;
  Weights weights;

  void set(Term t, Var<T> v) { terms[static_cast<std::size_t>(t)] = v; }
  bool has(Term t) const { return terms[static_cast<std::size_t>(t)].has_value(); }
  Var<T> get(Term t) const { return *terms[static_cast<std::size_t>(t)]; }
  bool empty() const;
};

template <class T>
Var<T> combine(const LossBundle<T>& bundle);

// Scalar form of a bundle, as logged.
struct LossValues {
  std::array<std::optional<double>, kTermCount> terms;
  void set(Term t, double v) { terms[static_cast<std::size_t>(t)] = v; }
  std::optional<double> get(Term t) const { return terms[static_cast<std::size_t>(t)]; }
};
double combine(const LossValues& values, const Weights& weights = {});

template <class T>
LossValues values_of(const LossBundle<T>& bundle);

}  // namespace blspkd::loss
