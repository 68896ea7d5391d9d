#include "blspkd/numerics/ops.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace blspkd::num {

namespace {

// Branch-free exp: float gets a vectorizable Cephes-style polynomial (about
// 2 ulp), double keeps libm so gradient checks see exact reference values.
inline float vexp(float x) {
  x = std::clamp(x, -87.0f, 88.0f);
  const float n = std::floor(x * 1.44269504088896341f + 0.5f);
  const float r = x - n * 0.693359375f + n * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(n) + 127) << 23;
  return p * std::bit_cast<float>(bits);
}
inline double vexp(double x) { return std::exp(x); }

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

template <class T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  auto& d = dst.storage();
  const auto& s = src.storage();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <class T>
Tape<T>& tape_of(Var<T> a) {
  if (!a.valid()) throw ContractError("op on an empty Var");
  return a.tape();
}

}  // namespace

// ---------------------------------------------------------------- products

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dims disagree " + shape_str(av) + " x " + shape_str(bv));
  }
  Tensor<T> out(av.rows(), bv.cols());
  kernel::gemm_nn(av.data(), bv.data(), out.data(), av.rows(), av.cols(), bv.cols(), false);
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).push("matmul", std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    const auto& A = t.value(ia);
    const auto& B = t.value(ib);
    if (t.requires_grad(ia)) {
      kernel::gemm_nt(g.data(), B.data(), t.grad(ia).data(), A.rows(), B.cols(), A.cols(), true);
    }
    if (t.requires_grad(ib)) {
      kernel::gemm_tn(A.data(), g.data(), t.grad(ib).data(), A.cols(), A.rows(), B.cols(), true);
    }
  });
}

template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw DimensionError("matmul_nt: inner dims disagree " + shape_str(av) + " x " +
                         shape_str(bv) + "^T");
  }
  Tensor<T> out(av.rows(), bv.rows());
  kernel::gemm_nt(av.data(), bv.data(), out.data(), av.rows(), av.cols(), bv.rows(), false);
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).push("matmul_nt", std::move(out), {a, b},
                         [ia, ib](Tape<T>& t, std::size_t s) {
                           const auto& g = t.grad(s);  // m×p
                           const auto& A = t.value(ia);  // m×k
                           const auto& B = t.value(ib);  // p×k
                           if (t.requires_grad(ia)) {
                             kernel::gemm_nn(g.data(), B.data(), t.grad(ia).data(), A.rows(),
                                             B.rows(), A.cols(), true);
                           }
                           if (t.requires_grad(ib)) {
                             kernel::gemm_tn(g.data(), A.data(), t.grad(ib).data(), B.rows(),
                                             A.rows(), A.cols(), true);
                           }
                         });
}

template <class T>
Var<T> matmul_tn(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rows() != bv.rows()) {
    throw DimensionError("matmul_tn: inner dims disagree " + shape_str(av) + "^T x " +
                         shape_str(bv));
  }
  Tensor<T> out(av.cols(), bv.cols());
  kernel::gemm_tn(av.data(), bv.data(), out.data(), av.cols(), av.rows(), bv.cols(), false);
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).push("matmul_tn", std::move(out), {a, b},
                         [ia, ib](Tape<T>& t, std::size_t s) {
                           const auto& g = t.grad(s);    // m×p
                           const auto& A = t.value(ia);  // k×m
                           const auto& B = t.value(ib);  // k×p
                           if (t.requires_grad(ia)) {
                             // dA = B · gᵀ  (k×m)
                             kernel::gemm_nt(B.data(), g.data(), t.grad(ia).data(), B.rows(),
                                             B.cols(), A.cols(), true);
                           }
                           if (t.requires_grad(ib)) {
                             // dB = A · g  (k×p)
                             kernel::gemm_nn(A.data(), g.data(), t.grad(ib).data(), A.rows(),
                                             A.cols(), B.cols(), true);
                           }
                         });
}

template <class T>
Var<T> transpose(Var<T> a) {
  const auto& av = a.value();
  Tensor<T> out(av.cols(), av.rows());
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) out(c, r) = av(r, c);
  const auto ia = a.id();
  return tape_of(a).push("transpose", std::move(out), {a}, [ia](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s);
    auto& ga = t.grad(ia);
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += g(c, r);
  });
}

template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  if (xv.cols() != wv.rows() || bv.rows() != 1 || bv.cols() != wv.cols()) {
    throw DimensionError("linear: " + shape_str(xv) + " · " + shape_str(wv) + " + " +
                         shape_str(bv));
  }
  const std::size_t m = xv.rows(), p = wv.cols();
  Tensor<T> out(m, p);
  for (std::size_t r = 0; r < m; ++r) std::copy(bv.data(), bv.data() + p, out.data() + r * p);
  kernel::gemm_nn(xv.data(), wv.data(), out.data(), m, xv.cols(), p, true);
  const auto ix = x.id(), iw = w.id(), ib = b.id();
  return tape_of(x).push("linear", std::move(out), {x, w, b},
                         [ix, iw, ib](Tape<T>& t, std::size_t s) {
                           const auto& g = t.grad(s);
                           const auto& X = t.value(ix);
                           const auto& W = t.value(iw);
                           if (t.requires_grad(ix)) {
                             kernel::gemm_nt(g.data(), W.data(), t.grad(ix).data(), X.rows(),
                                             W.cols(), W.rows(), true);
                           }
                           if (t.requires_grad(iw)) {
                             kernel::gemm_tn(X.data(), g.data(), t.grad(iw).data(), X.cols(),
                                             X.rows(), W.cols(), true);
                           }
                           if (t.requires_grad(ib)) {
                             auto& gb = t.grad(ib);
                             for (std::size_t r = 0; r < g.rows(); ++r)
                               for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
                           }
                         });
}

// -------------------------------------------------------------- elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  accumulate(out, b.value());
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).push("add", std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t s) {
    if (t.requires_grad(ia)) accumulate(t.grad(ia), t.grad(s));
    if (t.requires_grad(ib)) accumulate(t.grad(ib), t.grad(s));
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  auto& o = out.storage();
  const auto& bs = b.value().storage();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bs[i];
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).push("sub", std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t s) {
    if (t.requires_grad(ia)) accumulate(t.grad(ia), t.grad(s));
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib).storage();
      const auto& g = t.grad(s).storage();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  auto& o = out.storage();
  const auto& bs = b.value().storage();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bs[i];
  const auto ia = a.id(), ib = b.id();
  return tape_of(a).push("mul", std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::size_t s) {
    const auto& g = t.grad(s).storage();
    if (t.requires_grad(ia)) {
      auto& ga = t.grad(ia).storage();
      const auto& bv = t.value(ib).storage();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib).storage();
      const auto& av = t.value(ia).storage();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= factor;
  const auto ia = a.id();
  return tape_of(a).push("scale", std::move(out), {a}, [ia, factor](Tape<T>& t, std::size_t s) {
    auto& ga = t.grad(ia).storage();
    const auto& g = t.grad(s).storage();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <class T>
Var<T> add_scalar(Var<T> a, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v += c;
  const auto ia = a.id();
  return tape_of(a).push("add_scalar", std::move(out), {a}, [ia](Tape<T>& t, std::size_t s) {
    accumulate(t.grad(ia), t.grad(s));
  });
}

template <class T>
Var<T> add_row(Var<T> a, Var<T> row) {
  const auto& av = a.value();
  const auto& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError("add_row: " + shape_str(av) + " + " + shape_str(rv));
  }
  Tensor<T> out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += rv(0, c);
  const auto ia = a.id(), ir = row.id();
  return tape_of(a).push("add_row", std::move(out), {a, row},
                         [ia, ir](Tape<T>& t, std::size_t s) {
                           const auto& g = t.grad(s);
                           if (t.requires_grad(ia)) accumulate(t.grad(ia), g);
                           if (t.requires_grad(ir)) {
                             auto& gr = t.grad(ir);
                             for (std::size_t r = 0; r < g.rows(); ++r)
                               for (std::size_t c = 0; c < g.cols(); ++c) gr(0, c) += g(r, c);
                           }
                         });
}

template <class T>
Var<T> add_rows_masked(Var<T> base, Var<T> delta, std::span<const std::uint8_t> mask) {
  require_same_shape(base.value(), delta.value(), "add_rows_masked");
  const auto& bv = base.value();
  if (mask.size() != bv.rows()) {
    throw DimensionError("add_rows_masked: mask length " + std::to_string(mask.size()) +
                         " vs " + std::to_string(bv.rows()) + " rows");
  }
  Tensor<T> out = bv;
  const auto& dv = delta.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    if (!mask[r]) continue;
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += dv(r, c);
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  const auto ib = base.id(), id = delta.id();
  return tape_of(base).push("add_rows_masked", std::move(out), {base, delta},
                            [ib, id, m = std::move(m)](Tape<T>& t, std::size_t s) {
                              const auto& g = t.grad(s);
                              if (t.requires_grad(ib)) accumulate(t.grad(ib), g);
                              if (t.requires_grad(id)) {
                                auto& gd = t.grad(id);
                                for (std::size_t r = 0; r < g.rows(); ++r) {
                                  if (!m[r]) continue;
                                  for (std::size_t c = 0; c < g.cols(); ++c) gd(r, c) += g(r, c);
                                }
                              }
                            });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) {
    v = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  const auto ia = a.id();
  return tape_of(a).push("sigmoid", std::move(out), {a}, [ia](Tape<T>& t, std::size_t s) {
    const auto& y = t.value(s).storage();
    const auto& g = t.grad(s).storage();
    auto& ga = t.grad(ia).storage();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <class T>
Var<T> gelu(Var<T> a) {
  constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k1 = T(0.044715);
  Tensor<T> out = a.value();
  auto th = std::make_shared<std::vector<T>>(out.size());
  auto& tv = *th;
  T* o = out.data();
  for (std::size_t i = 0; i < tv.size(); ++i) {
    const T x = o[i];
    // tanh(u) = 1 - 2 / (exp(2u) + 1); saturates cleanly at both ends
    const T u = k0 * (x + k1 * x * x * x);
    tv[i] = T(1) - T(2) / (vexp(T(2) * u) + T(1));
    o[i] = T(0.5) * x * (T(1) + tv[i]);
  }
  const auto ia = a.id();
  return tape_of(a).push("gelu", std::move(out), {a}, [ia, th](Tape<T>& t, std::size_t s) {
    const auto& x = t.value(ia).storage();
    const auto& g = t.grad(s).storage();
    auto& ga = t.grad(ia).storage();
    const auto& tv = *th;
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T xi = x[i];
      const T du = k0 * (T(1) + T(3) * k1 * xi * xi);
      ga[i] += g[i] * (T(0.5) * (T(1) + tv[i]) + T(0.5) * xi * (T(1) - tv[i] * tv[i]) * du);
    }
  });
}

template <class T>
Var<T> abs(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = std::abs(v);
  const auto ia = a.id();
  return tape_of(a).push("abs", std::move(out), {a}, [ia](Tape<T>& t, std::size_t s) {
    const auto& x = t.value(ia).storage();
    const auto& g = t.grad(s).storage();
    auto& ga = t.grad(ia).storage();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      ga[i] += x[i] > T(0) ? g[i] : (x[i] < T(0) ? -g[i] : T(0));
    }
  });
}

// ------------------------------------------------------------ normalizers

namespace {

template <class T>
void softmax_row(std::span<const T> in, std::span<T> out) {
  if (in.empty()) return;
  T mx = in[0];
  for (T v : in) mx = std::max(mx, v);
  T z = T(0);
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp(in[i] - mx);
    z += out[i];
  }
  const T inv = T(1) / z;
  for (auto& v : out) v *= inv;
}

template <class T>
void log_softmax_row(std::span<const T> in, std::span<T> out) {
  if (in.empty()) return;
  T mx = in[0];
  for (T v : in) mx = std::max(mx, v);
  T z = T(0);
  for (T v : in) z += std::exp(v - mx);
  const T lse = mx + std::log(z);
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] - lse;
}

}  // namespace

template <class T>
Var<T> softmax(Var<T> a, int axis) {
  if (axis == 0) return transpose(softmax(transpose(a), 1));
  if (axis != 1) throw DimensionError("softmax: axis must be 0 or 1");
  const auto& av = a.value();
  Tensor<T> out(av.rows(), av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r) softmax_row<T>(av.row(r), out.row(r));
  const auto ia = a.id();
  return tape_of(a).push("softmax", std::move(out), {a}, [ia](Tape<T>& t, std::size_t s) {
    const auto& y = t.value(s);
    const auto& g = t.grad(s);
    auto& ga = t.grad(ia);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      T dot = T(0);
      for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) ga(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

template <class T>
Var<T> log_softmax(Var<T> a, int axis) {
  if (axis == 0) return transpose(log_softmax(transpose(a), 1));
  if (axis != 1) throw DimensionError("log_softmax: axis must be 0 or 1");
  const auto& av = a.value();
  Tensor<T> out(av.rows(), av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r) log_softmax_row<T>(av.row(r), out.row(r));
  const auto ia = a.id();
  return tape_of(a).push("log_softmax", std::move(out), {a}, [ia](Tape<T>& t, std::size_t s) {
    const auto& y = t.value(s);
    const auto& g = t.grad(s);
    auto& ga = t.grad(ia);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      T gs = T(0);
      for (std::size_t c = 0; c < y.cols(); ++c) gs += g(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) ga(r, c) += g(r, c) - std::exp(y(r, c)) * gs;
    }
  });
}

template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  if (gv.rows() != 1 || gv.cols() != d || !bv.same_shape(gv)) {
    throw DimensionError("layer_norm: gamma/beta must be 1x" + std::to_string(d));
  }
  Tensor<T> out(n, d);
  auto xhat = std::make_shared<Tensor<T>>(n, d);
  auto rstd = std::make_shared<std::vector<T>>(n);
  for (std::size_t r = 0; r < n; ++r) {
    T mu = T(0);
    for (std::size_t c = 0; c < d; ++c) mu += xv(r, c);
    mu /= T(d);
    T var = T(0);
    for (std::size_t c = 0; c < d; ++c) {
      const T dv = xv(r, c) - mu;
      var += dv * dv;
    }
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      const T h = (xv(r, c) - mu) * rs;
      (*xhat)(r, c) = h;
      out(r, c) = h * gv(0, c) + bv(0, c);
    }
  }
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return tape_of(x).push(
      "layer_norm", std::move(out), {x, gamma, beta},
      [ix, ig, ib, xhat, rstd](Tape<T>& t, std::size_t s) {
        const auto& g = t.grad(s);
        const auto& gv = t.value(ig);
        const std::size_t n = g.rows(), d = g.cols();
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
              if (t.requires_grad(ig)) t.grad(ig)(0, c) += g(r, c) * (*xhat)(r, c);
              if (t.requires_grad(ib)) t.grad(ib)(0, c) += g(r, c);
            }
          }
        }
        if (t.requires_grad(ix)) {
          auto& gx = t.grad(ix);
          for (std::size_t r = 0; r < n; ++r) {
            T m1 = T(0), m2 = T(0);
            for (std::size_t c = 0; c < d; ++c) {
              const T gh = g(r, c) * gv(0, c);
              m1 += gh;
              m2 += gh * (*xhat)(r, c);
            }
            m1 /= T(d);
            m2 /= T(d);
            for (std::size_t c = 0; c < d; ++c) {
              const T gh = g(r, c) * gv(0, c);
              gx(r, c) += (*rstd)[r] * (gh - m1 - (*xhat)(r, c) * m2);
            }
          }
        }
      });
}

// ------------------------------------------------------------- reductions

template <class T>
Var<T> sum(Var<T> a) {
  T acc = T(0);
  for (T v : a.value().storage()) acc += v;
  const auto ia = a.id();
  return tape_of(a).push("sum", Tensor<T>::scalar(acc), {a}, [ia](Tape<T>& t, std::size_t s) {
    const T g = t.grad(s)(0, 0);
    for (auto& v : t.grad(ia).storage()) v += g;
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), T(1) / T(n));
}

// ------------------------------------------------------------ shape ops

template <class T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  const auto& av = a.value();
  if (begin > end || end > av.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of " + std::to_string(av.rows()));
  }
  const std::size_t c = av.cols();
  Tensor<T> out(end - begin, c);
  std::copy(av.data() + begin * c, av.data() + end * c, out.data());
  const auto ia = a.id();
  return tape_of(a).push("slice_rows", std::move(out), {a},
                         [ia, begin](Tape<T>& t, std::size_t s) {
                           const auto& g = t.grad(s);
                           auto& ga = t.grad(ia);
                           const std::size_t c = g.cols();
                           for (std::size_t i = 0; i < g.size(); ++i) ga[begin * c + i] += g[i];
                         });
}

template <class T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  const auto& av = a.value();
  if (begin > end || end > av.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of " + std::to_string(av.cols()));
  }
  Tensor<T> out(av.rows(), end - begin);
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = av(r, c);
  const auto ia = a.id();
  return tape_of(a).push("slice_cols", std::move(out), {a},
                         [ia, begin](Tape<T>& t, std::size_t s) {
                           const auto& g = t.grad(s);
                           auto& ga = t.grad(ia);
                           for (std::size_t r = 0; r < g.rows(); ++r)
                             for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c + begin) += g(r, c);
                         });
}

template <class T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  const std::size_t c = parts[0].cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Tensor<T> out(rows, c);
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off * c);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.rows();
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).push(
      "concat_rows", std::move(out), inputs,
      [ids = std::move(ids), offsets = std::move(offsets)](Tape<T>& t, std::size_t s) {
        const auto& g = t.grad(s);
        const std::size_t c = g.cols();
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(ids[k])) continue;
          auto& gp = t.grad(ids[k]);
          const T* src = g.data() + offsets[k] * c;
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
        }
      });
}

template <class T>
Var<T> gather_rows(Var<T> table, std::span<const int> ids) {
  const auto& tv = table.value();
  const std::size_t c = tv.cols();
  Tensor<T> out(ids.size(), c);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows()) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[r]) + " out of range [0," +
                           std::to_string(tv.rows()) + ")");
    }
    std::copy(tv.data() + ids[r] * c, tv.data() + (ids[r] + 1) * c, out.data() + r * c);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  const auto it = table.id();
  return tape_of(table).push("gather_rows", std::move(out), {table},
                             [it, idv = std::move(idv)](Tape<T>& t, std::size_t s) {
                               const auto& g = t.grad(s);
                               auto& gt = t.grad(it);
                               const std::size_t c = g.cols();
                               for (std::size_t r = 0; r < idv.size(); ++r)
                                 for (std::size_t k = 0; k < c; ++k) gt(idv[r], k) += g(r, k);
                             });
}

// -------------------------------------------------------------- attention

namespace {

// Copies head h of rows [o, o+L) into a contiguous L×dh block, and back.
template <class T>
void gather_head(const Tensor<T>& x, std::size_t o, std::size_t L, std::size_t h, std::size_t dh, T* dst) {
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < L; ++i) {
    const T* src = x.data() + (o + i) * d + h * dh;
    std::copy(src, src + dh, dst + i * dh);
  }
}

template <class T>
void scatter_add_head(const T* src, std::size_t o, std::size_t L, std::size_t h, std::size_t dh, Tensor<T>& x) {
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < L; ++i) {
    T* dst = x.data() + (o + i) * d + h * dh;
    for (std::size_t e = 0; e < dh; ++e) dst[e] += src[i * dh + e];
  }
}

}  // namespace

template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::span<const Segment> segments,
                 std::size_t heads, bool causal) {
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  require_same_shape(qv, kv, "attention");
  require_same_shape(qv, vv, "attention");
  const std::size_t d = qv.cols();
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by heads");
  const std::size_t dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  std::size_t covered = 0;
  for (const auto& sg : segments) {
    if (sg.offset + sg.length > qv.rows()) throw DimensionError("attention: segment out of range");
    covered += sg.length;
  }
  if (covered != qv.rows()) throw DimensionError("attention: segments must cover all rows");

  // probs[seg][head] is a length×length row-major matrix; masked entries are exactly 0.
  auto probs = std::make_shared<std::vector<std::vector<T>>>();
  probs->reserve(segments.size() * heads);
  Tensor<T> out(qv.rows(), d);
  std::vector<T> qh, kh, vh, oh;
  for (const auto& sg : segments) {
    const std::size_t L = sg.length, o = sg.offset;
    qh.resize(L * dh);
    kh.resize(L * dh);
    vh.resize(L * dh);
    oh.resize(L * dh);
    for (std::size_t h = 0; h < heads; ++h) {
      gather_head(qv, o, L, h, dh, qh.data());
      gather_head(kv, o, L, h, dh, kh.data());
      gather_head(vv, o, L, h, dh, vh.data());
      std::vector<T> P(L * L);
      kernel::gemm_nt(qh.data(), kh.data(), P.data(), L, dh, L, false);
      for (std::size_t i = 0; i < L; ++i) {
        T* row = P.data() + i * L;
        const std::size_t jmax = causal ? i + 1 : L;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < jmax; ++j) {
          row[j] *= inv_sqrt;
          mx = std::max(mx, row[j]);
        }
        T z = T(0);
        for (std::size_t j = 0; j < jmax; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        const T iz = T(1) / z;
        for (std::size_t j = 0; j < jmax; ++j) row[j] *= iz;
        for (std::size_t j = jmax; j < L; ++j) row[j] = T(0);
      }
      kernel::gemm_nn(P.data(), vh.data(), oh.data(), L, L, dh, false);
      scatter_add_head(oh.data(), o, L, h, dh, out);
      probs->push_back(std::move(P));
    }
  }
  std::vector<Segment> segs(segments.begin(), segments.end());
  const auto iq = q.id(), ik = k.id(), iv = v.id();
  return tape_of(q).push(
      "attention", std::move(out), {q, k, v},
      [iq, ik, iv, segs = std::move(segs), probs, heads, dh, inv_sqrt, causal](Tape<T>& t,
                                                                              std::size_t s) {
        const auto& g = t.grad(s);
        const auto& Q = t.value(iq);
        const auto& K = t.value(ik);
        const auto& V = t.value(iv);
        const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik), gv = t.requires_grad(iv);
        std::size_t pi = 0;
        std::vector<T> gh, qh, kh, vh, tmp, dS;
        for (const auto& sg : segs) {
          const std::size_t L = sg.length, o = sg.offset;
          gh.resize(L * dh);
          qh.resize(L * dh);
          kh.resize(L * dh);
          vh.resize(L * dh);
          tmp.resize(L * dh);
          dS.resize(L * L);
          for (std::size_t h = 0; h < heads; ++h, ++pi) {
            const auto& P = (*probs)[pi];
            gather_head(g, o, L, h, dh, gh.data());
            if (gv) {
              kernel::gemm_tn(P.data(), gh.data(), tmp.data(), L, L, dh, false);
              scatter_add_head(tmp.data(), o, L, h, dh, t.grad(iv));
            }
            if (!gq && !gk) continue;
            gather_head(V, o, L, h, dh, vh.data());
            kernel::gemm_nt(gh.data(), vh.data(), dS.data(), L, dh, L, false);
            for (std::size_t i = 0; i < L; ++i) {
              const std::size_t jmax = causal ? i + 1 : L;
              const T* p = P.data() + i * L;
              T* ds = dS.data() + i * L;
              T dot = T(0);
              for (std::size_t j = 0; j < jmax; ++j) dot += ds[j] * p[j];
              for (std::size_t j = 0; j < jmax; ++j) ds[j] = p[j] * (ds[j] - dot) * inv_sqrt;
              for (std::size_t j = jmax; j < L; ++j) ds[j] = T(0);
            }
            if (gq) {
              gather_head(K, o, L, h, dh, kh.data());
              kernel::gemm_nn(dS.data(), kh.data(), tmp.data(), L, L, dh, false);
              scatter_add_head(tmp.data(), o, L, h, dh, t.grad(iq));
            }
            if (gk) {
              gather_head(Q, o, L, h, dh, qh.data());
              kernel::gemm_tn(dS.data(), qh.data(), tmp.data(), L, L, dh, false);
              scatter_add_head(tmp.data(), o, L, h, dh, t.grad(ik));
            }
          }
        }
      });
}

// ----------------------------------------------------------------- losses

template <class T>
Var<T> soft_cross_entropy(Var<T> logits, const Tensor<T>& target, std::span<const T> row_weight) {
  const auto& z = logits.value();
  require_same_shape(z, target, "soft_cross_entropy");
  if (!row_weight.empty() && row_weight.size() != z.rows()) {
    throw DimensionError("soft_cross_entropy: weight length mismatch");
  }
  const std::size_t n = z.rows(), V = z.cols();
  auto probs = std::make_shared<Tensor<T>>(n, V);
  std::vector<T> lsm(V);
  T total = T(0);
  for (std::size_t r = 0; r < n; ++r) {
    const T w = row_weight.empty() ? T(1) : row_weight[r];
    log_softmax_row<T>(z.row(r), std::span<T>(lsm));
    T acc = T(0);
    for (std::size_t c = 0; c < V; ++c) {
      acc -= target(r, c) * lsm[c];
      (*probs)(r, c) = std::exp(lsm[c]);
    }
    total += w * acc;
  }
  auto tgt = std::make_shared<Tensor<T>>(target);
  std::vector<T> w(row_weight.begin(), row_weight.end());
  const auto iz = logits.id();
  return tape_of(logits).push(
      "soft_cross_entropy", Tensor<T>::scalar(total), {logits},
      [iz, probs, tgt, w = std::move(w)](Tape<T>& t, std::size_t s) {
        const T g = t.grad(s)(0, 0);
        auto& gz = t.grad(iz);
        for (std::size_t r = 0; r < gz.rows(); ++r) {
          const T wr = (w.empty() ? T(1) : w[r]) * g;
          T mass = T(0);
          for (std::size_t c = 0; c < gz.cols(); ++c) mass += (*tgt)(r, c);
          for (std::size_t c = 0; c < gz.cols(); ++c) {
            gz(r, c) += wr * ((*probs)(r, c) * mass - (*tgt)(r, c));
          }
        }
      });
}

template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets) {
  const auto& z = logits.value();
  if (targets.size() != z.rows()) throw DimensionError("cross_entropy: target count mismatch");
  const std::size_t n = z.rows(), V = z.cols();
  auto probs = std::make_shared<Tensor<T>>(n, V);
  std::vector<T> lsm(V);
  T total = T(0);
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= V) {
      throw DimensionError("cross_entropy: target id out of range");
    }
    log_softmax_row<T>(z.row(r), std::span<T>(lsm));
    total -= lsm[targets[r]];
    for (std::size_t c = 0; c < V; ++c) (*probs)(r, c) = std::exp(lsm[c]);
  }
  std::vector<int> tg(targets.begin(), targets.end());
  const auto iz = logits.id();
  return tape_of(logits).push("cross_entropy", Tensor<T>::scalar(total), {logits},
                              [iz, probs, tg = std::move(tg)](Tape<T>& t, std::size_t s) {
                                const T g = t.grad(s)(0, 0);
                                auto& gz = t.grad(iz);
                                for (std::size_t r = 0; r < gz.rows(); ++r) {
                                  if (tg[r] < 0) continue;
                                  for (std::size_t c = 0; c < gz.cols(); ++c) {
                                    gz(r, c) += g * (*probs)(r, c);
                                  }
                                  gz(r, tg[r]) -= g;
                                }
                              });
}

// -------------------------------------------------------------- conv patches

template <class T>
Var<T> im2col_1d(Var<T> x, std::size_t kernel, std::size_t stride, std::size_t pad) {
  const auto& xv = x.value();
  if (kernel == 0 || stride == 0) throw DimensionError("im2col_1d: kernel/stride must be > 0");
  const std::size_t l = xv.rows(), c = xv.cols();
  const std::size_t padded = l + 2 * pad;
  const std::size_t m = (l == 0 || padded < kernel) ? 0 : (padded - kernel) / stride + 1;
  Tensor<T> out(m, kernel * c);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t kk = 0; kk < kernel; ++kk) {
      const long src = static_cast<long>(r * stride + kk) - static_cast<long>(pad);
      if (src < 0 || src >= static_cast<long>(l)) continue;
      std::copy(xv.data() + src * c, xv.data() + (src + 1) * c, out.data() + r * kernel * c + kk * c);
    }
  }
  const auto ix = x.id();
  return tape_of(x).push("im2col_1d", std::move(out), {x},
                         [ix, kernel, stride, pad](Tape<T>& t, std::size_t s) {
                           const auto& g = t.grad(s);
                           auto& gx = t.grad(ix);
                           const std::size_t l = gx.rows(), c = gx.cols();
                           for (std::size_t r = 0; r < g.rows(); ++r) {
                             for (std::size_t kk = 0; kk < kernel; ++kk) {
                               const long src = static_cast<long>(r * stride + kk) -
                                                static_cast<long>(pad);
                               if (src < 0 || src >= static_cast<long>(l)) continue;
                               for (std::size_t e = 0; e < c; ++e) {
                                 gx(src, e) += g(r, kk * c + e);
                               }
                             }
                           }
                         });
}

// ----------------------------------------------------- explicit instances

#define BLSPKD_INSTANTIATE_OPS(T)                                                            \
  template Var<T> matmul(Var<T>, Var<T>);                                                    \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                                 \
  template Var<T> matmul_tn(Var<T>, Var<T>);                                                 \
  template Var<T> transpose(Var<T>);                                                         \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                            \
  template Var<T> add(Var<T>, Var<T>);                                                       \
  template Var<T> sub(Var<T>, Var<T>);                                                       \
  template Var<T> mul(Var<T>, Var<T>);                                                       \
  template Var<T> scale(Var<T>, T);                                                          \
  template Var<T> add_scalar(Var<T>, T);                                                     \
  template Var<T> add_row(Var<T>, Var<T>);                                                   \
  template Var<T> add_rows_masked(Var<T>, Var<T>, std::span<const std::uint8_t>);            \
  template Var<T> sigmoid(Var<T>);                                                           \
  template Var<T> gelu(Var<T>);                                                              \
  template Var<T> abs(Var<T>);                                                               \
  template Var<T> softmax(Var<T>, int);                                                      \
  template Var<T> log_softmax(Var<T>, int);                                                  \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                     \
  template Var<T> sum(Var<T>);                                                               \
  template Var<T> mean(Var<T>);                                                              \
  template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                              \
  template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                              \
  template Var<T> concat_rows(std::span<const Var<T>>);                                      \
  template Var<T> gather_rows(Var<T>, std::span<const int>);                                 \
  template Var<T> attention(Var<T>, Var<T>, Var<T>, std::span<const Segment>, std::size_t,   \
                            bool);                                                           \
  template Var<T> soft_cross_entropy(Var<T>, const Tensor<T>&, std::span<const T>);          \
  template Var<T> cross_entropy(Var<T>, std::span<const int>);                               \
  template Var<T> im2col_1d(Var<T>, std::size_t, std::size_t, std::size_t);

BLSPKD_INSTANTIATE_OPS(float)
BLSPKD_INSTANTIATE_OPS(double)

#undef BLSPKD_INSTANTIATE_OPS

}  // namespace blspkd::num
