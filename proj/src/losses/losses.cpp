#include "blspkd/losses/losses.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>

namespace blspkd::loss {

namespace {

std::atomic<std::size_t> g_clamps{0};

double safe_log(double q) {
  if (q < kProbFloor) {
#ifndef NDEBUG
    if (g_clamps.load() == 0) std::fprintf(stderr, "warning: probability %g clamped to %g\n", q, kProbFloor);
#endif
    g_clamps.fetch_add(1);
    q = kProbFloor;
  }
  return std::log(q);
}

void require_same(const Tensor<double>& p, const Tensor<double>& q, const char* op) {
  if (!p.same_shape(q)) {
    throw num::DimensionError(std::string(op) + ": " + num::shape_str(p) + " vs " + num::shape_str(q));
  }
}

}  // namespace

const char* term_name(Term t) {
  switch (t) {
    case Term::cif: return "cif";
    case Term::input_kl: return "input_kl";
    case Term::resp_kl: return "resp_kl";
    case Term::resp_ce: return "resp_ce";
    case Term::asr: return "asr";
  }
  return "?";
}

Term term_from_name(const std::string& s) {
  for (Term t : kAllTerms)
    if (s == term_name(t)) return t;
  throw std::invalid_argument("unknown loss term '" + s + "' (expected cif, input_kl, resp_kl, resp_ce, asr)");
}

std::size_t clamp_events() { return g_clamps.load(); }

double resp_ce(const Tensor<double>& student, std::span<const int> y) {
  if (student.rows() != y.size()) throw num::DimensionError("resp_ce: distribution count != |y|");
  double s = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    if (y[j] < 0 || static_cast<std::size_t>(y[j]) >= student.cols()) {
      throw num::DimensionError("resp_ce: target id out of range");
    }
    s -= safe_log(student(j, static_cast<std::size_t>(y[j])));
  }
  return s;
}

double resp_kl(const Tensor<double>& teacher, const Tensor<double>& student) {
  require_same(teacher, student, "resp_kl");
  double s = 0.0;
  for (std::size_t r = 0; r < teacher.rows(); ++r)
    for (std::size_t v = 0; v < teacher.cols(); ++v) {
      const double p = teacher(r, v);
      if (p > 0.0) s -= p * safe_log(student(r, v));
    }
  return s;
}

double input_kl(const Tensor<double>& teacher, const Tensor<double>& student) {
  if (teacher.rows() != student.rows()) {
    throw AlignmentError("input_kl: teacher has " + std::to_string(teacher.rows()) +
                         " input positions, student " + std::to_string(student.rows()));
  }
  if (teacher.rows() == 0) return 0.0;
  return resp_kl(teacher, student);
}

double cif_loss(std::span<const double> raw, std::size_t n) {
  if (n == 0) throw LossError("cif_loss: n = 0");
  double s = 0.0;
  for (double a : raw) s += a;
  return std::abs(s - static_cast<double>(n)) / static_cast<double>(n);
}

double asr_loss(const Tensor<double>& classifier_probs, std::span<const int> x) {
  if (classifier_probs.rows() != x.size()) {
    throw AlignmentError("asr_loss: " + std::to_string(classifier_probs.rows()) + " states for " +
                         std::to_string(x.size()) + " tokens");
  }
  if (x.empty()) throw LossError("asr_loss: empty transcript");
  return resp_ce(classifier_probs, x) / static_cast<double>(x.size());
}

double entropy(const Tensor<double>& p) {
  double s = 0.0;
  for (double v : p.storage())
    if (v > 0.0) s -= v * std::log(v);
  return s;
}

double kl_divergence(const Tensor<double>& p, const Tensor<double>& q) {
  require_same(p, q, "kl_divergence");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * (std::log(p[i]) - safe_log(q[i]));
  return s;
}

template <class T>
Var<T> resp_ce(Var<T> student_logits, std::span<const int> y) {
  return num::cross_entropy(student_logits, y);
}

template <class T>
Var<T> soft_ce(Var<T> student_logits, const Tensor<T>& teacher_probs, std::span<const T> row_weight) {
  return num::soft_cross_entropy(student_logits, teacher_probs, row_weight);
}

template <class T>
Var<T> cif_loss(Var<T> raw_alphas, std::size_t n) {
  if (n == 0) throw LossError("cif_loss: n = 0");
  const T nn = static_cast<T>(n);
  return num::scale(num::abs(num::add_scalar(num::sum(raw_alphas), -nn)), T(1) / nn);
}

template <class T>
Var<T> asr_loss(Var<T> s_adp, std::span<const int> x, const model::Linear<T>& head) {
  if (s_adp.rows() != x.size()) {
    throw AlignmentError("asr_loss: " + std::to_string(s_adp.rows()) + " states for " +
                         std::to_string(x.size()) + " tokens");
  }
  if (x.empty()) throw LossError("asr_loss: empty transcript");
  Var<T> logits = head(s_adp.tape(), s_adp);
  return num::scale(num::cross_entropy(logits, x), T(1) / static_cast<T>(x.size()));
}

template <class T>
bool LossBundle<T>::empty() const {
  for (const auto& t : terms)
    if (t) return false;
  return true;
}

template <class T>
Var<T> combine(const LossBundle<T>& bundle) {
  if (bundle.empty()) throw LossError("combine: empty loss bundle");
  Var<T> total;
  for (Term t : kAllTerms) {
    if (!bundle.has(t)) continue;
    const double w = bundle.weights[t];
    Var<T> term = w == 1.0 ? bundle.get(t) : num::scale(bundle.get(t), static_cast<T>(w));
    total = total.valid() ? num::add(total, term) : term;
  }
  return total;
}

double combine(const LossValues& values, const Weights& weights) {
  bool any = false;
  double total = 0.0;
  for (Term t : kAllTerms) {
    if (auto v = values.get(t)) {
      any = true;
      total += weights[t] * *v;
    }
  }
  if (!any) throw LossError("combine: empty loss bundle");
  return total;
}

template <class T>
LossValues values_of(const LossBundle<T>& bundle) {
  LossValues v;
  for (Term t : kAllTerms)
    if (bundle.has(t)) v.set(t, static_cast<double>(bundle.get(t).value().item()));
  return v;
}

#define BLSPKD_INSTANTIATE_LOSSES(T)                                                 \
  template Var<T> resp_ce(Var<T>, std::span<const int>);                             \
  template Var<T> soft_ce(Var<T>, const Tensor<T>&, std::span<const T>);             \
  template Var<T> cif_loss(Var<T>, std::size_t);                                     \
  template Var<T> asr_loss(Var<T>, std::span<const int>, const model::Linear<T>&);   \
  template struct LossBundle<T>;                                                     \
  template Var<T> combine(const LossBundle<T>&);                                     \
  template LossValues values_of(const LossBundle<T>&);

BLSPKD_INSTANTIATE_LOSSES(float)
BLSPKD_INSTANTIATE_LOSSES(double)

#undef BLSPKD_INSTANTIATE_LOSSES

}  // namespace blspkd::loss
