#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "blspkd/backbone/lm.hpp"

namespace blspkd::model {

struct PLoRAError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PLoRAConfig {
  std::size_t rank = 4;
  double scale = 0.0;  // 0 means 1/rank
  // Entries match a linear by full name or by trailing component(s),
  // e.g. "attn.q", "q" or "lm.layer2.attn.v".
  std::vector<std::string> targets = {"attn.q", "attn.v"};
  double init_std = -1.0;  // A init; <0 means 1/sqrt(d_in)
};

// Low-rank update gated per row. Storage follows the row-vector convention
// used everywhere else (x · W), so here A is d_in × r and B is r × d_out.
//   out_i = x_i W + b + (mask_i ? s · (x_i A) B : 0)
template <class T>
Var<T> plora_forward(Var<T> x, Var<T> w, Var<T> bias, Var<T> a, Var<T> b, T scale,
                     std::span<const std::uint8_t> mask);

template <class T>
class PLoRA final : public LinearHook<T> {
 public:
  struct Adapter {
    std::string target;  // adapted linear's name
    Parameter<T> a;      // d_in × r
    Parameter<T> b;      // r × d_out, zero at init
  };

  // Wraps the selected linear layers of `lm`. The base model is untouched.
  PLoRA(ToyLM<T>& lm, PLoRAConfig cfg, std::uint64_t seed);

  bool wants(std::string_view name) const override;
  Var<T> apply(Tape<T>& tape, std::string_view name, Var<T> x, Var<T> base,
               std::span<const std::uint8_t> mask) const override;

  const PLoRAConfig& config() const { return cfg_; }
  T scale() const { return scale_; }
  std::vector<Adapter>& adapters() { return adapters_; }
  std::size_t parameter_count() const;
  void collect(ParamList<T>& out);
  ParamList<T> parameters();
  void set_trainable(bool on);

 private:
  PLoRAConfig cfg_;
  T scale_;
  std::vector<Adapter> adapters_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

// Checkpoint namespace for adapter tensors.
inline constexpr const char* kPLoRAPrefix = "plora.";

extern template class PLoRA<float>;
extern template class PLoRA<double>;

}  // namespace blspkd::model
