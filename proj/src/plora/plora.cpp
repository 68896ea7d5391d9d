#include "blspkd/plora/plora.hpp"

#include <algorithm>
#include <cmath>

namespace blspkd::model {

namespace {

bool matches(const std::string& name, const std::string& sel) {
  if (name == sel) return true;
  return name.size() > sel.size() && name.compare(name.size() - sel.size(), sel.size(), sel) == 0 &&
         name[name.size() - sel.size() - 1] == '.';
}

}  // namespace

template <class T>
Var<T> plora_forward(Var<T> x, Var<T> w, Var<T> bias, Var<T> a, Var<T> b, T scale,
                     std::span<const std::uint8_t> mask) {
  Var<T> base = num::linear(x, w, bias);
  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) return base;
  Var<T> delta = num::scale(num::matmul(num::matmul(x, a), b), scale);
  return num::add_rows_masked(base, delta, mask);
}

template <class T>
PLoRA<T>::PLoRA(ToyLM<T>& lm, PLoRAConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  if (cfg_.targets.empty()) throw PLoRAError("plora: empty layer selector");
  if (cfg_.rank == 0) throw PLoRAError("plora: rank must be positive");
  scale_ = static_cast<T>(cfg_.scale > 0.0 ? cfg_.scale : 1.0 / static_cast<double>(cfg_.rank));
  std::vector<bool> used(cfg_.targets.size(), false);
  num::Rng rng(seed);
  for (std::size_t l = 0; l < lm.stack().layers(); ++l) {
    for (Linear<T>* lin : lm.stack().block(l).linears()) {
      bool hit = false;
      for (std::size_t s = 0; s < cfg_.targets.size(); ++s) {
        if (matches(lin->name, cfg_.targets[s])) {
          used[s] = true;
          hit = true;
        }
      }
      if (!hit) continue;
      const double std =
          cfg_.init_std >= 0.0 ? cfg_.init_std : 1.0 / std::sqrt(static_cast<double>(lin->in_dim()));
      Adapter ad;
      ad.target = lin->name;
      ad.a = Parameter<T>(kPLoRAPrefix + lin->name + ".A", rng.normal_tensor<T>(lin->in_dim(), cfg_.rank, std));
      ad.b = Parameter<T>(kPLoRAPrefix + lin->name + ".B", Tensor<T>(cfg_.rank, lin->out_dim()));
      index_.emplace(lin->name, adapters_.size());
      adapters_.push_back(std::move(ad));
    }
  }
  for (std::size_t s = 0; s < used.size(); ++s) {
    if (!used[s]) throw PLoRAError("plora: selector '" + cfg_.targets[s] + "' matches no LM linear layer");
  }
}

template <class T>
bool PLoRA<T>::wants(std::string_view name) const {
  return index_.find(name) != index_.end();
}

template <class T>
Var<T> PLoRA<T>::apply(Tape<T>& tape, std::string_view name, Var<T> x, Var<T> base,
                       std::span<const std::uint8_t> mask) const {
  const auto it = index_.find(name);
  if (it == index_.end()) return base;
  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) return base;
  const Adapter& ad = adapters_[it->second];
  Var<T> delta = num::scale(num::matmul(num::matmul(x, bind(tape, ad.a)), bind(tape, ad.b)), scale_);
  return num::add_rows_masked(base, delta, mask);
}

template <class T>
std::size_t PLoRA<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& ad : adapters_) n += ad.a.value.size() + ad.b.value.size();
  return n;
}

template <class T>
void PLoRA<T>::collect(ParamList<T>& out) {
  for (auto& ad : adapters_) {
    out.push_back(&ad.a);
    out.push_back(&ad.b);
  }
}

template <class T>
ParamList<T> PLoRA<T>::parameters() {
  ParamList<T> out;
  collect(out);
  return out;
}

template <class T>
void PLoRA<T>::set_trainable(bool on) {
  for (auto* p : parameters()) p->trainable = on;
}

template Var<float> plora_forward(Var<float>, Var<float>, Var<float>, Var<float>, Var<float>, float,
                                  std::span<const std::uint8_t>);
template Var<double> plora_forward(Var<double>, Var<double>, Var<double>, Var<double>, Var<double>, double,
                                   std::span<const std::uint8_t>);
template class PLoRA<float>;
template class PLoRA<double>;

}  // namespace blspkd::model
