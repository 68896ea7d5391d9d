#include <vector>

#include "blspkd/numerics/tensor.hpp"

namespace blspkd::num::kernel {

// Register-tiled products. Every output element is accumulated in the same
// k order whatever tile it falls in, so a row's result never depends on how
// many other rows are in the matrix.

namespace {

template <class T>
constexpr std::size_t kNR = 256 / sizeof(T);  // 4 AVX-512 registers per tile row
constexpr std::size_t kMR = 4;

// c[MR×NR] (+)= a-rows · b with `a_at(r, kk)` giving A[i0 + r][kk].
template <class T, std::size_t MR, std::size_t NR, class AAt>
inline void tile(AAt a_at, const T* __restrict b, T* __restrict c, std::size_t k, std::size_t p,
                 std::size_t nr, bool accumulate) {
  T acc[MR][NR];
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < NR; ++j) acc[r][j] = (accumulate && j < nr) ? c[r * p + j] : T(0);
  if (nr == NR) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T* brow = b + kk * p;
      for (std::size_t r = 0; r < MR; ++r) {
        const T av = a_at(r, kk);
        for (std::size_t j = 0; j < NR; ++j) acc[r][j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T* brow = b + kk * p;
      for (std::size_t r = 0; r < MR; ++r) {
        const T av = a_at(r, kk);
        for (std::size_t j = 0; j < nr; ++j) acc[r][j] += av * brow[j];
      }
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t j = 0; j < nr; ++j) c[r * p + j] = acc[r][j];
}

template <class T, class AAtRow>
void tiled(AAtRow a_row, const T* b, T* c, std::size_t m, std::size_t k, std::size_t p, bool accumulate) {
  constexpr std::size_t NR = kNR<T>;
  std::size_t i = 0;
  for (; i + kMR <= m; i += kMR) {
    for (std::size_t j0 = 0; j0 < p; j0 += NR) {
      const std::size_t nr = std::min(NR, p - j0);
      tile<T, kMR, NR>([&](std::size_t r, std::size_t kk) { return a_row(i + r, kk); }, b + j0,
                       c + i * p + j0, k, p, nr, accumulate);
    }
  }
  for (; i < m; ++i) {
    for (std::size_t j0 = 0; j0 < p; j0 += NR) {
      const std::size_t nr = std::min(NR, p - j0);
      tile<T, 1, NR>([&](std::size_t, std::size_t kk) { return a_row(i, kk); }, b + j0, c + i * p + j0, k, p,
                     nr, accumulate);
    }
  }
}

}  // namespace

template <class T>
void gemm_nn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m,
             std::size_t k, std::size_t p, bool accumulate) {
  tiled<T>([a, k](std::size_t i, std::size_t kk) { return a[i * k + kk]; }, b, c, m, k, p, accumulate);
}

template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t p,
             bool accumulate) {
  std::vector<T> bt(k * p);
  for (std::size_t j = 0; j < p; ++j) {
    for (std::size_t kk = 0; kk < k; ++kk) bt[kk * p + j] = b[j * k + kk];
  }
  gemm_nn(a, bt.data(), c, m, k, p, accumulate);
}

// c[m×p] (+)= aᵀ · b with a stored k×m.
template <class T>
void gemm_tn(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m,
             std::size_t k, std::size_t p, bool accumulate) {
  tiled<T>([a, m](std::size_t i, std::size_t kk) { return a[kk * m + i]; }, b, c, m, k, p, accumulate);
}

template void gemm_nn(const float*, const float*, float*, std::size_t, std::size_t, std::size_t,
                      bool);
template void gemm_nn(const double*, const double*, double*, std::size_t, std::size_t,
                      std::size_t, bool);
template void gemm_nt(const float*, const float*, float*, std::size_t, std::size_t, std::size_t,
                      bool);
template void gemm_nt(const double*, const double*, double*, std::size_t, std::size_t,
                      std::size_t, bool);
template void gemm_tn(const float*, const float*, float*, std::size_t, std::size_t, std::size_t,
                      bool);
template void gemm_tn(const double*, const double*, double*, std::size_t, std::size_t,
                      std::size_t, bool);

}  // namespace blspkd::num::kernel
