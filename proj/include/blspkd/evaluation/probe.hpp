#pragma once

#include <cstdint>
#include <vector>

#include "blspkd/backbone/transformer.hpp"
#include "blspkd/backbone/vocab.hpp"

namespace blspkd::eval {

// Small non-causal transformer reading frozen per-position states and
// predicting one token per position.
struct ProbeOptions {
  std::size_t layers = 2;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t steps = 800;
  std::size_t batch = 32;
  double lr = 1e-3;
  std::uint64_t seed = 7;
};

// states[i] has one row per target token of targets[i].
struct ProbeData {
  std::vector<num::Tensor<float>> states;
  std::vector<TokenSequence> targets;
};

class ProbeModel {
 public:
  ProbeModel(std::size_t feat_dim, std::size_t vocab, const ProbeOptions& opt);

  num::Var<float> forward(num::Tape<float>& tape, num::Var<float> states, std::span<const num::Segment> segs) const;
  // Argmax token per row of each state sequence.
  std::vector<TokenSequence> predict(const std::vector<num::Tensor<float>>& states) const;
  model::ParamList<float> parameters();

 private:
  model::LayerNorm<float> ln_in_;
  model::Linear<float> in_;
  model::TransformerStack<float> stack_;
  model::Linear<float> head_;
};

struct ProbeFit {
  ProbeModel model;
  double final_loss = 0.0;  // mean per-token CE over the last 10% of steps
};

// Trains a probe on `train`; throws EvalError on empty or misaligned data.
ProbeFit fit_probe(const ProbeData& train, std::size_t vocab, const ProbeOptions& opt);

// Corpus WER of the probe's per-position predictions.
double probe_wer(const ProbeModel& probe, const ProbeData& test);

}  // namespace blspkd::eval
