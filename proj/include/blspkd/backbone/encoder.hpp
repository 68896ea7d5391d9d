#pragma once

#include <span>

#include "blspkd/backbone/transformer.hpp"

namespace blspkd::model {

struct EncoderConfig {
  std::size_t feat_dim = 16;
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t conv_kernel = 3;  // odd; stride-1 convolutional stem (1 = per-frame linear)
};

// Frame-rate speech encoder: convolutional stem (stride 1, same padding),
// sinusoidal positions, a bidirectional transformer stack. One output
// state per input frame.
template <class T>
class ToySpeechEncoder {
 public:
  ToySpeechEncoder() = default;
  ToySpeechEncoder(EncoderConfig cfg, std::uint64_t seed);

  const EncoderConfig& config() const { return cfg_; }

  // `frames` packs one or more utterances (segments) row-wise.
  Var<T> encode(Tape<T>& tape, Var<T> frames, std::span<const Segment> segments) const;
  Var<T> encode(Tape<T>& tape, const Tensor<T>& frames) const;

  void collect(ParamList<T>& out);
  ParamList<T> parameters();
  void set_trainable(bool on);

 private:
  EncoderConfig cfg_;
  Linear<T> in_;
  TransformerStack<T> stack_;
};

// Stand-in for an ASR-pretrained speech encoder: frame-level prediction of
// the token being spoken and of token onsets, through throwaway heads.
struct EncoderPretrainOptions {
  std::size_t steps = 1000;
  double lr = 1e-3;
  std::size_t batch = 16;
  std::uint64_t seed = 11;
  double warmup_frac = 0.05;
};

// One utterance: frames (l × feat_dim) and the token id of every frame.
struct LabelledFrames {
  const Tensor<float>* frames = nullptr;
  std::vector<int> frame_tokens;
};

struct EncoderPretrainReport {
  double first_loss = 0.0, final_loss = 0.0;  // per-frame, means over the first/last 10% of steps
};

// Trains every encoder parameter; leaves them frozen afterwards.
EncoderPretrainReport pretrain_encoder(ToySpeechEncoder<float>& enc, const std::vector<LabelledFrames>& data,
                                       std::size_t vocab, const EncoderPretrainOptions& opt);

extern template class ToySpeechEncoder<float>;
extern template class ToySpeechEncoder<double>;

}  // namespace blspkd::model
