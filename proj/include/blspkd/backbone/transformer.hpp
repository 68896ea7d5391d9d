#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "blspkd/numerics/ops.hpp"
#include "blspkd/numerics/random.hpp"

namespace blspkd::model {

using num::Parameter;
using num::Segment;
using num::Tape;
using num::Tensor;
using num::Var;

template <class T>
using ParamList = std::vector<Parameter<T>*>;

// Intercepts named linear maps inside transformer blocks. `mask` marks the
// rows the hook may alter (one entry per packed row).
template <class T>
class LinearHook {
 public:
  virtual ~LinearHook() = default;
  virtual bool wants(std::string_view name) const = 0;
  virtual Var<T> apply(Tape<T>& tape, std::string_view name, Var<T> x, Var<T> base,
                       std::span<const std::uint8_t> mask) const = 0;
};

template <class T>
struct Linear {
  std::string name;
  Parameter<T> weight;  // in × out
  Parameter<T> bias;    // 1 × out

  Linear() = default;
  Linear(std::string n, std::size_t in, std::size_t out, num::Rng& rng, double stddev);

  std::size_t in_dim() const { return weight.value.rows(); }
  std::size_t out_dim() const { return weight.value.cols(); }
  Var<T> operator()(Tape<T>& tape, Var<T> x) const;
  void collect(ParamList<T>& out);
};

template <class T>
struct LayerNorm {
  Parameter<T> gamma;
  Parameter<T> beta;

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t dim);
  Var<T> operator()(Tape<T>& tape, Var<T> x) const;
  void collect(ParamList<T>& out);
};

// Resolves a parameter to a tape node: trainable parameters become grad
// leaves, frozen ones constants.
template <class T>
Var<T> bind(Tape<T>& tape, const Parameter<T>& p);

struct BlockShape {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  bool causal = false;
};

// Pre-norm transformer block: x + attn(ln1(x)); x + mlp(ln2(x)).
template <class T>
class TransformerBlock {
 public:
  TransformerBlock(const std::string& name, BlockShape shape, num::Rng& rng, std::size_t depth);

  Var<T> forward(Tape<T>& tape, Var<T> x, std::span<const Segment> segments,
                 const LinearHook<T>* hook = nullptr,
                 std::span<const std::uint8_t> mask = {}) const;
  void collect(ParamList<T>& out);

  Linear<T>& q() { return q_; }
  Linear<T>& k() { return k_; }
  Linear<T>& v() { return v_; }
  Linear<T>& o() { return o_; }
  Linear<T>& fc1() { return fc1_; }
  Linear<T>& fc2() { return fc2_; }
  std::vector<Linear<T>*> linears() { return {&q_, &k_, &v_, &o_, &fc1_, &fc2_}; }

 private:
  Var<T> project(Tape<T>& tape, const Linear<T>& lin, Var<T> x, const LinearHook<T>* hook,
                 std::span<const std::uint8_t> mask) const;

  BlockShape shape_;
  LayerNorm<T> ln1_, ln2_;
  Linear<T> q_, k_, v_, o_, fc1_, fc2_;
};

// Stack of blocks with a final layer norm.
template <class T>
class TransformerStack {
 public:
  TransformerStack() = default;
  TransformerStack(const std::string& name, std::size_t layers, BlockShape shape, num::Rng& rng);

  // With `hidden`, appends the residual stream after every block (before
  // the final norm).
  Var<T> forward(Tape<T>& tape, Var<T> x, std::span<const Segment> segments,
                 const LinearHook<T>* hook = nullptr, std::span<const std::uint8_t> mask = {},
                 std::vector<Var<T>>* hidden = nullptr) const;
  void collect(ParamList<T>& out);

  std::size_t layers() const { return blocks_.size(); }
  TransformerBlock<T>& block(std::size_t i) { return blocks_.at(i); }
  const BlockShape& shape() const { return shape_; }

 private:
  BlockShape shape_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> ln_f_;
};

// Sinusoidal position table, rows = positions.
template <class T>
Tensor<T> sinusoidal_positions(std::size_t count, std::size_t dim);

// Position code for every packed row (position restarts at each segment).
template <class T>
Tensor<T> packed_positions(std::span<const Segment> segments, std::size_t dim);

extern template class TransformerBlock<float>;
extern template class TransformerBlock<double>;
extern template class TransformerStack<float>;
extern template class TransformerStack<double>;

}  // namespace blspkd::model
