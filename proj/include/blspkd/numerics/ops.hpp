#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "blspkd/numerics/tape.hpp"

namespace blspkd::num {

// Contiguous row range [offset, offset + length) of a packed batch.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

template <class T> Var<T> matmul(Var<T> a, Var<T> b);     // a·b
template <class T> Var<T> matmul_nt(Var<T> a, Var<T> b);  // a·bᵀ
template <class T> Var<T> matmul_tn(Var<T> a, Var<T> b);  // aᵀ·b
template <class T> Var<T> transpose(Var<T> a);

template <class T> Var<T> add(Var<T> a, Var<T> b);
template <class T> Var<T> sub(Var<T> a, Var<T> b);
template <class T> Var<T> mul(Var<T> a, Var<T> b);
template <class T> Var<T> scale(Var<T> a, T s);
template <class T> Var<T> add_scalar(Var<T> a, T s);
// a + broadcast of a 1×c row.
template <class T> Var<T> add_row(Var<T> a, Var<T> row);
// Rows with mask[r] != 0 get base + delta; other rows are copied from base
// untouched (bitwise).
template <class T>
Var<T> add_rows_masked(Var<T> base, Var<T> delta, std::span<const std::uint8_t> mask);
// x·w + b with w stored in×out and b a 1×out row.
template <class T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);

template <class T> Var<T> sigmoid(Var<T> a);
template <class T> Var<T> gelu(Var<T> a);  // tanh approximation
template <class T> Var<T> abs(Var<T> a);

// Normalizing transforms along `axis` (1 = within each row, 0 = within each column).
template <class T> Var<T> softmax(Var<T> a, int axis = 1);
template <class T> Var<T> log_softmax(Var<T> a, int axis = 1);
template <class T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));

template <class T> Var<T> sum(Var<T> a);
template <class T> Var<T> mean(Var<T> a);

template <class T> Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end);
template <class T> Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end);
template <class T> Var<T> concat_rows(std::span<const Var<T>> parts);
template <class T> Var<T> gather_rows(Var<T> table, std::span<const int> ids);

// Multi-head scaled dot-product attention applied independently to each
// segment of the packed q/k/v rows. Causal masking limits row i to keys ≤ i
// within its segment.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::span<const Segment> segments,
                 std::size_t heads, bool causal);

// Σ_r w_r · (−Σ_v target[r,v] · log_softmax(logits)[r,v]); w defaults to 1.
template <class T>
Var<T> soft_cross_entropy(Var<T> logits, const Tensor<T>& target, std::span<const T> row_weight = {});
// Σ_r −log_softmax(logits)[r, targets[r]] over rows with targets[r] ≥ 0.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets);

// 1-D convolution patches: row t holds rows [t·stride − pad, t·stride − pad + kernel)
// of x concatenated (zeros outside). Output has ceil-style length
// (l + 2·pad − kernel) / stride + 1.
template <class T>
Var<T> im2col_1d(Var<T> x, std::size_t kernel, std::size_t stride, std::size_t pad);

}  // namespace blspkd::num
