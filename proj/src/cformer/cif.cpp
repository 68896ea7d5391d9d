#include "blspkd/cformer/cif.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace blspkd::cif {

using num::ContractError;
using num::DimensionError;

namespace {

template <class T>
void require_column(const Tensor<T>& a, const char* op) {
  if (a.cols() != 1) throw DimensionError(std::string(op) + ": expected l × 1 weights, got " + num::shape_str(a));
}

// Entry (i, j) of the firing matrix for partial sums lo = C_{i−1}, hi = C_i
// (j is 1-based).
inline double overlap(double lo, double hi, double j) {
  return std::max(0.0, std::min(hi, j) - std::max(lo, j - 1.0));
}

template <class T>
Tensor<T> alignment_from_sums(const std::vector<double>& c, std::size_t cols) {
  const std::size_t l = c.size() - 1;
  Tensor<T> a(l, cols);
  for (std::size_t i = 0; i < l; ++i) {
    const double lo = c[i], hi = c[i + 1];
    if (hi <= lo) continue;
    const auto first = static_cast<std::size_t>(std::max(0.0, std::floor(lo)));
    for (std::size_t j = first; j < cols; ++j) {
      const double jj = static_cast<double>(j + 1);
      if (jj - 1.0 >= hi) break;
      a(i, j) = static_cast<T>(overlap(lo, hi, jj));
    }
  }
  return a;
}

}  // namespace

template <class T>
Var<T> compute_alphas(Var<T> s_pre) {
  if (s_pre.cols() < 2) throw DimensionError("compute_alphas: state width must be ≥ 2");
  return num::sigmoid(num::slice_cols(s_pre, s_pre.cols() - 1, s_pre.cols()));
}

template <class T>
Var<T> normalize_alphas(Var<T> raw, std::size_t n) {
  const Tensor<T>& a = raw.value();
  require_column(a, "normalize_alphas");
  if (n == 0) throw DegenerateInputError("normalize_alphas: token count n = 0");
  double s = 0.0;
  for (T v : a.storage()) s += static_cast<double>(v);
  if (!(s > 0.0) || a.empty()) throw DegenerateInputError("normalize_alphas: weights sum to zero");
  const double nn = static_cast<double>(n);
  Tensor<T> out(a.rows(), 1);
  double head = 0.0;
  for (std::size_t i = 0; i + 1 < a.rows(); ++i) {
    out[i] = static_cast<T>(static_cast<double>(a[i]) * nn / s);
    head += static_cast<double>(out[i]);
  }
  out[a.rows() - 1] = static_cast<T>(nn - head);
  const auto ia = raw.id();
  return raw.tape().push("normalize_alphas", std::move(out), {raw},
                         [ia, s, nn](Tape<T>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           const auto& av = t.value(ia);
                           double dot = 0.0;
                           for (std::size_t i = 0; i < g.size(); ++i)
                             dot += static_cast<double>(g[i]) * static_cast<double>(av[i]);
                           auto& ga = t.grad(ia);
                           for (std::size_t k = 0; k < g.size(); ++k) {
                             ga[k] += static_cast<T>(nn / s * (static_cast<double>(g[k]) - dot / s));
                           }
                         });
}

template <class T>
Var<T> fire(Var<T> normalized, std::size_t n) {
  const Tensor<T>& a = normalized.value();
  require_column(a, "fire");
  if (n == 0) throw DegenerateInputError("fire: token count n = 0");
  const std::size_t l = a.rows();
  if (l == 0) throw DegenerateInputError("fire: no states to fire from");
  std::vector<double> c(l + 1, 0.0);
  for (std::size_t i = 0; i < l; ++i) {
    if (a[i] < T(0)) throw ContractError("fire: negative weight");
    c[i + 1] = c[i] + static_cast<double>(a[i]);
  }
  const double nn = static_cast<double>(n);
  const double tol = (std::is_same_v<T, float> ? 1e-4 : 1e-9) * std::max(1.0, nn);
  if (std::abs(c[l] - nn) > tol) {
    throw ContractError("fire: weights sum to " + std::to_string(c[l]) + ", expected normalized sum " +
                        std::to_string(n));
  }
  c[l] = nn;
  Tensor<T> out = alignment_from_sums<T>(c, n);
  const auto ia = normalized.id();
  return normalized.tape().push(
      "fire", std::move(out), {normalized}, [ia, c = std::move(c), n](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const std::size_t l = c.size() - 1;
        // dL/dC_k for k = 1..l−1 (C_0 = 0 and C_l = n are constants).
        std::vector<double> dc(l + 1, 0.0);
        for (std::size_t i = 0; i < l; ++i) {
          const double lo = c[i], hi = c[i + 1];
          for (std::size_t j = 0; j < n; ++j) {
            const double jj = static_cast<double>(j + 1);
            if (overlap(lo, hi, jj) <= 0.0) continue;
            const double gij = static_cast<double>(g(i, j));
            if (hi < jj) dc[i + 1] += gij;
            if (lo > jj - 1.0) dc[i] -= gij;
          }
        }
        auto& ga = t.grad(ia);
        double acc = 0.0;
        for (std::size_t k = l; k-- > 0;) {
          if (k + 1 < l) acc += dc[k + 1];
          ga[k] += static_cast<T>(acc);
        }
      });
}

template <class T>
Tensor<T> fire_inference(const Tensor<T>& raw, double threshold) {
  require_column(raw, "fire_inference");
  if (!(threshold > 0.0)) throw ContractError("fire_inference: threshold must be positive");
  const std::size_t l = raw.rows();
  std::vector<double> c(l + 1, 0.0);
  for (std::size_t i = 0; i < l; ++i) c[i + 1] = c[i] + static_cast<double>(raw[i]) / threshold;
  // Partial sums within float noise of an integer count as having crossed it.
  const double snap = std::is_same_v<T, float> ? 1e-5 : 1e-9;
  const double total = c[l];
  double whole = std::floor(total);
  if (total - whole > 1.0 - snap * std::max(1.0, total)) whole += 1.0;
  auto cols = static_cast<std::size_t>(whole);
  if (total - whole >= 0.5) ++cols;
  if (std::abs(total - whole) <= snap * std::max(1.0, total)) c[l] = whole;
  return alignment_from_sums<T>(c, cols);
}

template <class T>
Var<T> integrate(Var<T> alignment, Var<T> s_pre, Var<T> m) {
  const std::size_t d = s_pre.cols();
  if (d < 2) throw DimensionError("integrate: state width must be ≥ 2");
  if (alignment.rows() != s_pre.rows()) {
    throw DimensionError("integrate: alignment has " + std::to_string(alignment.rows()) + " rows, states " +
                         std::to_string(s_pre.rows()));
  }
  if (m.rows() != d - 1) {
    throw DimensionError("integrate: projection must be (d−1) × d, got " + num::shape_str(m.value()));
  }
  return num::matmul(num::matmul_tn(alignment, num::slice_cols(s_pre, 0, d - 1)), m);
}

template <class T>
AlignmentCheck check_alignment(const Tensor<T>& a, const Tensor<T>& alpha) {
  AlignmentCheck r;
  long prev_first = -1;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    long first = -1, last = -1;
    bool gap = false;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double v = static_cast<double>(a(i, j));
      if (v < 0.0) r.nonnegative = false;
      s += v;
      if (v > 0.0) {
        if (first < 0) first = static_cast<long>(j);
        else if (last != static_cast<long>(j) - 1) gap = true;
        last = static_cast<long>(j);
      }
    }
    if (gap) r.monotone = false;
    if (first >= 0) {
      if (first < prev_first) r.monotone = false;
      prev_first = first;
    }
    if (alpha.rows() == a.rows()) r.worst_row = std::max(r.worst_row, std::abs(s - static_cast<double>(alpha[i])));
  }
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) s += static_cast<double>(a(i, j));
    r.worst_col = std::max(r.worst_col, std::abs(s - 1.0));
  }
  return r;
}

template <class T>
double boundary_margin(const Tensor<T>& normalized) {
  double c = 0.0, margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < normalized.size(); ++i) {
    c += static_cast<double>(normalized[i]);
    margin = std::min(margin, std::abs(c - std::round(c)));
  }
  return margin;
}

template <class T>
std::string alignment_csv(const Tensor<T>& a) {
  std::ostringstream os;
  os << "state";
  for (std::size_t j = 0; j < a.cols(); ++j) os << ",token_" << (j + 1);
  os << '\n' << std::setprecision(9);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    os << (i + 1);
    for (std::size_t j = 0; j < a.cols(); ++j) os << ',' << static_cast<double>(a(i, j));
    os << '\n';
  }
  return os.str();
}

#define BLSPKD_INSTANTIATE_CIF(T)                                              \
  template Var<T> compute_alphas(Var<T>);                                      \
  template Var<T> normalize_alphas(Var<T>, std::size_t);                       \
  template Var<T> fire(Var<T>, std::size_t);                                   \
  template Tensor<T> fire_inference(const Tensor<T>&, double);                 \
  template Var<T> integrate(Var<T>, Var<T>, Var<T>);                           \
  template AlignmentCheck check_alignment(const Tensor<T>&, const Tensor<T>&); \
  template double boundary_margin(const Tensor<T>&);                           \
  template std::string alignment_csv(const Tensor<T>&);

BLSPKD_INSTANTIATE_CIF(float)
BLSPKD_INSTANTIATE_CIF(double)

#undef BLSPKD_INSTANTIATE_CIF

}  // namespace blspkd::cif
