#include "blspkd/backbone/transformer.hpp"

#include <cmath>

namespace blspkd::model {

template <class T>
Var<T> bind(Tape<T>& tape, const Parameter<T>& p) {
  if (p.trainable && tape.recording()) {
    // Gradient accumulation is the only write a tape makes to a parameter.
    return tape.param(const_cast<Parameter<T>&>(p));
  }
  return tape.frozen(p);
}

template <class T>
Linear<T>::Linear(std::string n, std::size_t in, std::size_t out, num::Rng& rng, double stddev)
    : name(std::move(n)),
      weight(name + ".weight", rng.normal_tensor<T>(in, out, stddev)),
      bias(name + ".bias", Tensor<T>(1, out)) {}

template <class T>
Var<T> Linear<T>::operator()(Tape<T>& tape, Var<T> x) const {
  return num::linear(x, bind(tape, weight), bind(tape, bias));
}

template <class T>
void Linear<T>::collect(ParamList<T>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

template <class T>
LayerNorm<T>::LayerNorm(const std::string& name, std::size_t dim)
    : gamma(name + ".gamma", Tensor<T>(1, dim, T(1))), beta(name + ".beta", Tensor<T>(1, dim)) {}

template <class T>
Var<T> LayerNorm<T>::operator()(Tape<T>& tape, Var<T> x) const {
  return num::layer_norm(x, bind(tape, gamma), bind(tape, beta));
}

template <class T>
void LayerNorm<T>::collect(ParamList<T>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

template <class T>
TransformerBlock<T>::TransformerBlock(const std::string& name, BlockShape shape, num::Rng& rng,
                                      std::size_t depth)
    : shape_(shape), ln1_(name + ".ln1", shape.dim), ln2_(name + ".ln2", shape.dim) {
  const std::size_t d = shape.dim, h = shape.dim * shape.ffn_mult;
  const double s_in = 1.0 / std::sqrt(static_cast<double>(d));
  const double s_out = s_in / std::sqrt(2.0 * static_cast<double>(depth));
  q_ = Linear<T>(name + ".attn.q", d, d, rng, s_in);
  k_ = Linear<T>(name + ".attn.k", d, d, rng, s_in);
  v_ = Linear<T>(name + ".attn.v", d, d, rng, s_in);
  o_ = Linear<T>(name + ".attn.o", d, d, rng, s_out);
  fc1_ = Linear<T>(name + ".mlp.fc1", d, h, rng, s_in);
  fc2_ = Linear<T>(name + ".mlp.fc2", h, d, rng, 1.0 / std::sqrt(static_cast<double>(h)) /
                                                    std::sqrt(2.0 * static_cast<double>(depth)));
}

template <class T>
Var<T> TransformerBlock<T>::project(Tape<T>& tape, const Linear<T>& lin, Var<T> x,
                                    const LinearHook<T>* hook,
                                    std::span<const std::uint8_t> mask) const {
  Var<T> base = lin(tape, x);
  if (hook != nullptr && hook->wants(lin.name)) return hook->apply(tape, lin.name, x, base, mask);
  return base;
}

template <class T>
Var<T> TransformerBlock<T>::forward(Tape<T>& tape, Var<T> x, std::span<const Segment> segments,
                                    const LinearHook<T>* hook,
                                    std::span<const std::uint8_t> mask) const {
  Var<T> h = ln1_(tape, x);
  Var<T> q = project(tape, q_, h, hook, mask);
  Var<T> k = project(tape, k_, h, hook, mask);
  Var<T> v = project(tape, v_, h, hook, mask);
  Var<T> a = num::attention(q, k, v, segments, shape_.heads, shape_.causal);
  x = num::add(x, project(tape, o_, a, hook, mask));
  h = ln2_(tape, x);
  h = num::gelu(project(tape, fc1_, h, hook, mask));
  return num::add(x, project(tape, fc2_, h, hook, mask));
}

template <class T>
void TransformerBlock<T>::collect(ParamList<T>& out) {
  ln1_.collect(out);
  q_.collect(out);
  k_.collect(out);
  v_.collect(out);
  o_.collect(out);
  ln2_.collect(out);
  fc1_.collect(out);
  fc2_.collect(out);
}

template <class T>
TransformerStack<T>::TransformerStack(const std::string& name, std::size_t layers,
                                      BlockShape shape, num::Rng& rng)
    : shape_(shape), ln_f_(name + ".ln_f", shape.dim) {
  blocks_.reserve(layers);
  for (std::size_t i = 0; i < layers; ++i) {
    blocks_.emplace_back(name + ".layer" + std::to_string(i), shape, rng, layers);
  }
}

template <class T>
Var<T> TransformerStack<T>::forward(Tape<T>& tape, Var<T> x, std::span<const Segment> segments,
                                    const LinearHook<T>* hook,
                                    std::span<const std::uint8_t> mask,
                                    std::vector<Var<T>>* hidden) const {
  for (const auto& b : blocks_) {
    x = b.forward(tape, x, segments, hook, mask);
    if (hidden != nullptr) hidden->push_back(x);
  }
  return ln_f_(tape, x);
}

template <class T>
void TransformerStack<T>::collect(ParamList<T>& out) {
  for (auto& b : blocks_) b.collect(out);
  ln_f_.collect(out);
}

template <class T>
Tensor<T> sinusoidal_positions(std::size_t count, std::size_t dim) {
  Tensor<T> pe(count, dim);
  for (std::size_t p = 0; p < count; ++p) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      pe(p, i) = static_cast<T>(std::sin(static_cast<double>(p) * freq));
      if (i + 1 < dim) pe(p, i + 1) = static_cast<T>(std::cos(static_cast<double>(p) * freq));
    }
  }
  return pe;
}

template <class T>
Tensor<T> packed_positions(std::span<const Segment> segments, std::size_t dim) {
  std::size_t rows = 0, longest = 0;
  for (const auto& s : segments) {
    rows = std::max(rows, s.offset + s.length);
    longest = std::max(longest, s.length);
  }
  const Tensor<T> table = sinusoidal_positions<T>(longest, dim);
  Tensor<T> out(rows, dim);
  for (const auto& s : segments) {
    std::copy(table.data(), table.data() + s.length * dim, out.data() + s.offset * dim);
  }
  return out;
}

template Var<float> bind(Tape<float>&, const Parameter<float>&);
template Var<double> bind(Tape<double>&, const Parameter<double>&);
template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template class TransformerBlock<float>;
template class TransformerBlock<double>;
template class TransformerStack<float>;
template class TransformerStack<double>;
template Tensor<float> sinusoidal_positions(std::size_t, std::size_t);
template Tensor<double> sinusoidal_positions(std::size_t, std::size_t);
template Tensor<float> packed_positions(std::span<const Segment>, std::size_t);
template Tensor<double> packed_positions(std::span<const Segment>, std::size_t);

}  // namespace blspkd::model
