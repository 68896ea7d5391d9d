#pragma once

#include <memory>
#include <string>
#include <vector>

#include "blspkd/backbone/transformer.hpp"
#include "blspkd/cformer/cif.hpp"

namespace blspkd::model {

enum class AdapterKind { cnn, cformer };
const char* adapter_name(AdapterKind k);
AdapterKind adapter_from_name(const std::string& s);

struct AdapterConfig {
  std::size_t dim = 64;      // encoder width d
  std::size_t llm_dim = 64;  // LM embedding width
  std::size_t heads = 4;
  std::size_t pre_layers = 4;
  std::size_t post_layers = 4;
  std::size_t cnn_ratio = 4;  // must be a power of two (stride-2 convolutions)
  double fire_threshold = 1.0;
};

template <class T>
struct AdapterOutput {
  Var<T> s_adp;                   // packed output rows
  std::vector<Segment> segments;  // one per input segment
  // CFormer only, one entry per segment:
  std::vector<Var<T>> alpha_raw;       // l × 1
  std::vector<Tensor<T>> alignment;    // l × n
};

template <class T>
class Adapter {
 public:
  virtual ~Adapter() = default;
  virtual AdapterKind kind() const = 0;
  // `counts` gives the target token count per segment (training mode);
  // empty means inference-mode firing. CNN ignores it.
  virtual AdapterOutput<T> forward(Tape<T>& tape, Var<T> s_enc, std::span<const Segment> segments,
                                   std::span<const std::size_t> counts = {}) const = 0;
  virtual void collect(ParamList<T>& out) = 0;

  ParamList<T> parameters() {
    ParamList<T> out;
    collect(out);
    return out;
  }
  void set_trainable(bool on) {
    for (auto* p : parameters()) p->trainable = on;
  }
};

// Pre-CIF transformer → CIF (alphas from the last channel, firing,
// weighted integration through M) → post-CIF transformer → linear to the
// LM width.
template <class T>
class CFormer final : public Adapter<T> {
 public:
  CFormer(AdapterConfig cfg, std::uint64_t seed);

  AdapterKind kind() const override { return AdapterKind::cformer; }
  AdapterOutput<T> forward(Tape<T>& tape, Var<T> s_enc, std::span<const Segment> segments,
                           std::span<const std::size_t> counts = {}) const override;
  void collect(ParamList<T>& out) override;

  Var<T> pre_cif(Tape<T>& tape, Var<T> s_enc, std::span<const Segment> segments) const;
  Var<T> post_cif(Tape<T>& tape, Var<T> s_cif, std::span<const Segment> segments) const;

  const AdapterConfig& config() const { return cfg_; }
  TransformerStack<T>& pre() { return pre_; }
  TransformerStack<T>& post() { return post_; }
  Parameter<T>& projection() { return m_; }
  Linear<T>& out() { return out_; }

 private:
  AdapterConfig cfg_;
  TransformerStack<T> pre_;
  Parameter<T> m_;  // (d−1) × d
  TransformerStack<T> post_;
  Linear<T> out_;
};

// Convolutional subsampler: log2(r) conv1d layers (kernel 3, stride 2,
// pad 1, GELU) and a linear to the LM width; m = ceil(l / r).
template <class T>
class CnnAdapter final : public Adapter<T> {
 public:
  CnnAdapter(AdapterConfig cfg, std::uint64_t seed);

  AdapterKind kind() const override { return AdapterKind::cnn; }
  AdapterOutput<T> forward(Tape<T>& tape, Var<T> s_enc, std::span<const Segment> segments,
                           std::span<const std::size_t> counts = {}) const override;
  void collect(ParamList<T>& out) override;

  static std::size_t output_length(std::size_t l, std::size_t ratio);

 private:
  AdapterConfig cfg_;
  std::vector<Linear<T>> convs_;
  Linear<T> out_;
};

template <class T>
std::unique_ptr<Adapter<T>> make_adapter(AdapterKind kind, const AdapterConfig& cfg, std::uint64_t seed);

extern template class CFormer<float>;
extern template class CFormer<double>;
extern template class CnnAdapter<float>;
extern template class CnnAdapter<double>;

}  // namespace blspkd::model
