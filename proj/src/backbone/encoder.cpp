#include "blspkd/backbone/encoder.hpp"

#include <cmath>

#include "blspkd/backbone/lm.hpp"
#include "blspkd/numerics/optim.hpp"

namespace blspkd::model {

template <class T>
ToySpeechEncoder<T>::ToySpeechEncoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.conv_kernel % 2 == 0) throw num::DimensionError("encoder: conv kernel must be odd");
  num::Rng rng(seed);
  const std::size_t fan_in = cfg.feat_dim * cfg.conv_kernel;
  in_ = Linear<T>("encoder.in", fan_in, cfg.dim, rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  stack_ = TransformerStack<T>("encoder", cfg.layers, BlockShape{cfg.dim, cfg.heads, 4, false}, rng);
}

template <class T>
Var<T> ToySpeechEncoder<T>::encode(Tape<T>& tape, Var<T> frames,
                                   std::span<const Segment> segments) const {
  if (frames.cols() != cfg_.feat_dim) {
    throw num::DimensionError("encode_speech: frame dim " + std::to_string(frames.cols()) +
                              " != " + std::to_string(cfg_.feat_dim));
  }
  if (frames.rows() == 0) return tape.constant(Tensor<T>(0, cfg_.dim));
  Var<T> x;
  if (cfg_.conv_kernel == 1) {
    x = in_(tape, frames);
  } else {
    // the stem sees only frames of the same utterance
    std::vector<Var<T>> parts;
    for (const auto& sg : segments) {
      if (sg.length == 0) continue;
      Var<T> f = num::slice_rows(frames, sg.offset, sg.offset + sg.length);
      parts.push_back(num::im2col_1d(f, cfg_.conv_kernel, 1, cfg_.conv_kernel / 2));
    }
    x = in_(tape, parts.size() == 1 ? parts[0] : num::concat_rows(std::span<const Var<T>>(parts)));
  }
  x = num::add(x, tape.constant(packed_positions<T>(segments, cfg_.dim)));
  return stack_.forward(tape, x, segments);
}

template <class T>
Var<T> ToySpeechEncoder<T>::encode(Tape<T>& tape, const Tensor<T>& frames) const {
  const Segment seg{0, frames.rows()};
  return encode(tape, tape.constant(frames), std::span<const Segment>(&seg, 1));
}

template <class T>
void ToySpeechEncoder<T>::collect(ParamList<T>& out) {
  in_.collect(out);
  stack_.collect(out);
}

template <class T>
ParamList<T> ToySpeechEncoder<T>::parameters() {
  ParamList<T> out;
  collect(out);
  return out;
}

template <class T>
void ToySpeechEncoder<T>::set_trainable(bool on) {
  for (auto* p : parameters()) p->trainable = on;
}

EncoderPretrainReport pretrain_encoder(ToySpeechEncoder<float>& enc, const std::vector<LabelledFrames>& data,
                                       std::size_t vocab, const EncoderPretrainOptions& opt) {
  for (const auto& d : data) {
    if (d.frames == nullptr || d.frames->rows() != d.frame_tokens.size()) {
      throw num::DimensionError("pretrain_encoder: one token label per frame required");
    }
  }
  EncoderPretrainReport rep;
  if (data.empty() || opt.steps == 0) return rep;
  num::Rng rng(opt.seed);
  const std::size_t d = enc.config().dim;
  Linear<float> token_head("pretrain.token", d, vocab, rng, 1.0 / std::sqrt(static_cast<double>(d)));
  Linear<float> onset_head("pretrain.onset", d, 2, rng, 1.0 / std::sqrt(static_cast<double>(d)));
  enc.set_trainable(true);
  ParamList<float> params = enc.parameters();
  token_head.collect(params);
  onset_head.collect(params);
  num::Adam<float> adam;
  const auto warmup = static_cast<std::size_t>(opt.warmup_frac * static_cast<double>(opt.steps));
  const std::size_t window = std::max<std::size_t>(1, opt.steps / 10);
  double first = 0.0, last = 0.0;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    std::vector<Segment> segs;
    std::vector<int> tokens, onsets;
    std::vector<const LabelledFrames*> picked;
    for (std::size_t b = 0; b < opt.batch; ++b) {
      const auto& ex = data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1))];
      picked.push_back(&ex);
      segs.push_back(Segment{tokens.size(), ex.frame_tokens.size()});
      for (std::size_t i = 0; i < ex.frame_tokens.size(); ++i) {
        tokens.push_back(ex.frame_tokens[i]);
        onsets.push_back(i == 0 || ex.frame_tokens[i] != ex.frame_tokens[i - 1] ? 1 : 0);
      }
    }
    Tensor<float> frames(tokens.size(), enc.config().feat_dim);
    for (std::size_t k = 0; k < picked.size(); ++k) {
      const auto& f = *picked[k]->frames;
      std::copy(f.storage().begin(), f.storage().end(), frames.storage().begin() + static_cast<long>(segs[k].offset * f.cols()));
    }
    for (auto* p : params) p->zero_grad();
    Tape<float> tape;
    Var<float> h = enc.encode(tape, tape.constant(frames), segs);
    Var<float> loss = num::add(num::cross_entropy(token_head(tape, h), std::span<const int>(tokens)),
                               num::cross_entropy(onset_head(tape, h), std::span<const int>(onsets)));
    loss = num::scale(loss, 1.0f / static_cast<float>(tokens.size()));
    const double lv = loss.value().item();
    if (!std::isfinite(lv)) throw TrainingError("pretrain_encoder: loss diverged at step " + std::to_string(step));
    if (step < window) first += lv / static_cast<double>(window);
    if (step >= opt.steps - window) last += lv / static_cast<double>(window);
    tape.backward(loss);
    adam.step(params, num::warmup_lr(opt.lr, step, warmup));
  }
  enc.set_trainable(false);
  rep.first_loss = first;
  rep.final_loss = last;
  return rep;
}

template class ToySpeechEncoder<float>;
template class ToySpeechEncoder<double>;

}  // namespace blspkd::model
