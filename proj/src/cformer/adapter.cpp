#include "blspkd/cformer/adapter.hpp"

#include <cmath>

namespace blspkd::model {

const char* adapter_name(AdapterKind k) { return k == AdapterKind::cnn ? "cnn" : "cformer"; }

AdapterKind adapter_from_name(const std::string& s) {
  if (s == "cnn") return AdapterKind::cnn;
  if (s == "cformer") return AdapterKind::cformer;
  throw std::invalid_argument("unknown adapter '" + s + "' (expected cnn or cformer)");
}

template <class T>
CFormer<T>::CFormer(AdapterConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.dim < 2) throw num::DimensionError("cformer: width must be ≥ 2");
  num::Rng rng(seed);
  const BlockShape shape{cfg_.dim, cfg_.heads, 4, false};
  pre_ = TransformerStack<T>("cformer.pre", cfg_.pre_layers, shape, rng);
  // M starts as [I | 0]: the integrated channels pass straight through.
  Tensor<T> m(cfg_.dim - 1, cfg_.dim);
  for (std::size_t i = 0; i + 1 < cfg_.dim; ++i) m(i, i) = T(1);
  m_ = Parameter<T>("cformer.M", std::move(m));
  post_ = TransformerStack<T>("cformer.post", cfg_.post_layers, shape, rng);
  out_ = Linear<T>("cformer.out", cfg_.dim, cfg_.llm_dim, rng, 1.0 / std::sqrt(static_cast<double>(cfg_.dim)));
}

template <class T>
Var<T> CFormer<T>::pre_cif(Tape<T>& tape, Var<T> s_enc, std::span<const Segment> segments) const {
  if (s_enc.cols() != cfg_.dim) throw num::DimensionError("pre_cif: width mismatch");
  if (s_enc.rows() == 0) return s_enc;
  return pre_.forward(tape, s_enc, segments);
}

template <class T>
Var<T> CFormer<T>::post_cif(Tape<T>& tape, Var<T> s_cif, std::span<const Segment> segments) const {
  if (s_cif.rows() == 0) return tape.constant(Tensor<T>(0, cfg_.llm_dim));
  Var<T> x = num::add(s_cif, tape.constant(packed_positions<T>(segments, cfg_.dim)));
  return out_(tape, post_.forward(tape, x, segments));
}

template <class T>
AdapterOutput<T> CFormer<T>::forward(Tape<T>& tape, Var<T> s_enc, std::span<const Segment> segments,
                                     std::span<const std::size_t> counts) const {
  const bool train = !counts.empty();
  if (train && counts.size() != segments.size()) {
    throw num::DimensionError("cformer: " + std::to_string(counts.size()) + " token counts for " +
                              std::to_string(segments.size()) + " segments");
  }
  AdapterOutput<T> out;
  Var<T> s_pre = pre_cif(tape, s_enc, segments);
  Var<T> m = bind(tape, m_);
  std::vector<Var<T>> parts;
  std::size_t offset = 0;
  for (std::size_t g = 0; g < segments.size(); ++g) {
    const Segment& sg = segments[g];
    Var<T> sp = num::slice_rows(s_pre, sg.offset, sg.offset + sg.length);
    Var<T> raw = sg.length > 0 ? cif::compute_alphas(sp) : tape.constant(Tensor<T>(0, 1));
    Var<T> a;
    if (train) {
      a = cif::fire(cif::normalize_alphas(raw, counts[g]), counts[g]);
    } else {
      a = tape.constant(cif::fire_inference(raw.value(), cfg_.fire_threshold));
    }
    out.alpha_raw.push_back(raw);
    out.alignment.push_back(a.value());
    out.segments.push_back(Segment{offset, a.cols()});
    offset += a.cols();
    if (a.cols() > 0) parts.push_back(cif::integrate(a, sp, m));
  }
  if (parts.empty()) {
    out.s_adp = tape.constant(Tensor<T>(0, cfg_.llm_dim));
    return out;
  }
  Var<T> s_cif = parts.size() == 1 ? parts[0] : num::concat_rows(std::span<const Var<T>>(parts));
  std::vector<Segment> live;
  for (const auto& s : out.segments)
    if (s.length > 0) live.push_back(s);
  out.s_adp = post_cif(tape, s_cif, live);
  return out;
}

template <class T>
void CFormer<T>::collect(ParamList<T>& out) {
  pre_.collect(out);
  out.push_back(&m_);
  post_.collect(out);
  out_.collect(out);
}

template <class T>
CnnAdapter<T>::CnnAdapter(AdapterConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.cnn_ratio < 1 || (cfg_.cnn_ratio & (cfg_.cnn_ratio - 1)) != 0) {
    throw std::invalid_argument("cnn adapter: ratio must be a power of two");
  }
  num::Rng rng(seed);
  std::size_t r = cfg_.cnn_ratio, i = 0;
  while (r > 1) {
    convs_.emplace_back("cnn.conv" + std::to_string(i++), 3 * cfg_.dim, cfg_.dim, rng,
                        1.0 / std::sqrt(3.0 * static_cast<double>(cfg_.dim)));
    r /= 2;
  }
  out_ = Linear<T>("cnn.out", cfg_.dim, cfg_.llm_dim, rng, 1.0 / std::sqrt(static_cast<double>(cfg_.dim)));
}

template <class T>
std::size_t CnnAdapter<T>::output_length(std::size_t l, std::size_t ratio) {
  return (l + ratio - 1) / ratio;
}

template <class T>
AdapterOutput<T> CnnAdapter<T>::forward(Tape<T>& tape, Var<T> s_enc, std::span<const Segment> segments,
                                        std::span<const std::size_t>) const {
  if (s_enc.cols() != cfg_.dim) throw num::DimensionError("cnn adapter: width mismatch");
  AdapterOutput<T> out;
  std::vector<Var<T>> parts;
  std::size_t offset = 0;
  for (const Segment& sg : segments) {
    std::size_t len = 0;
    if (sg.length > 0) {
      Var<T> h = num::slice_rows(s_enc, sg.offset, sg.offset + sg.length);
      for (const auto& conv : convs_) h = num::gelu(conv(tape, num::im2col_1d(h, 3, 2, 1)));
      len = h.rows();
      parts.push_back(h);
    }
    out.segments.push_back(Segment{offset, len});
    offset += len;
  }
  if (parts.empty()) {
    out.s_adp = tape.constant(Tensor<T>(0, cfg_.llm_dim));
    return out;
  }
  Var<T> h = parts.size() == 1 ? parts[0] : num::concat_rows(std::span<const Var<T>>(parts));
  out.s_adp = out_(tape, h);
  return out;
}

template <class T>
void CnnAdapter<T>::collect(ParamList<T>& out) {
  for (auto& c : convs_) c.collect(out);
  out_.collect(out);
}

template <class T>
std::unique_ptr<Adapter<T>> make_adapter(AdapterKind kind, const AdapterConfig& cfg, std::uint64_t seed) {
  if (kind == AdapterKind::cnn) return std::make_unique<CnnAdapter<T>>(cfg, seed);
  return std::make_unique<CFormer<T>>(cfg, seed);
}

template class CFormer<float>;
template class CFormer<double>;
template class CnnAdapter<float>;
template class CnnAdapter<double>;
template std::unique_ptr<Adapter<float>> make_adapter(AdapterKind, const AdapterConfig&, std::uint64_t);
template std::unique_ptr<Adapter<double>> make_adapter(AdapterKind, const AdapterConfig&, std::uint64_t);

}  // namespace blspkd::model
