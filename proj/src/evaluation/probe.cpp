#include "blspkd/evaluation/probe.hpp"

#include <algorithm>
#include <cmath>

#include "blspkd/evaluation/metrics.hpp"
#include "blspkd/numerics/optim.hpp"

namespace blspkd::eval {

using num::Segment;
using num::Tape;
using num::Tensor;
using num::Var;

namespace {

num::Rng probe_rng(std::uint64_t seed) { return num::Rng(num::derive_seed(seed, 0x9e0b)); }

struct Packed {
  Tensor<float> rows;
  std::vector<Segment> segs;
  std::vector<int> targets;
};

Packed pack(const std::vector<const Tensor<float>*>& states, const std::vector<const TokenSequence*>& targets) {
  Packed p;
  std::size_t n = 0, d = 0;
  for (const auto* s : states) {
    n += s->rows();
    d = s->cols();
  }
  p.rows = Tensor<float>(n, d);
  std::size_t r = 0;
  for (std::size_t i = 0; i < states.size(); ++i) {
    const auto& s = *states[i];
    if (s.cols() != d) throw EvalError("probe: mixed state widths");
    std::copy(s.data(), s.data() + s.size(), p.rows.data() + r * d);
    p.segs.push_back(Segment{r, s.rows()});
    r += s.rows();
    if (!targets.empty()) p.targets.insert(p.targets.end(), targets[i]->begin(), targets[i]->end());
  }
  return p;
}

}  // namespace

ProbeModel::ProbeModel(std::size_t feat_dim, std::size_t vocab, const ProbeOptions& opt) {
  num::Rng rng = probe_rng(opt.seed);
  ln_in_ = model::LayerNorm<float>("probe.ln_in", feat_dim);
  in_ = model::Linear<float>("probe.in", feat_dim, opt.dim, rng, 1.0 / std::sqrt(static_cast<double>(feat_dim)));
  stack_ = model::TransformerStack<float>("probe", opt.layers, model::BlockShape{opt.dim, opt.heads, 4, false}, rng);
  head_ = model::Linear<float>("probe.head", opt.dim, vocab, rng, 1.0 / std::sqrt(static_cast<double>(opt.dim)));
}

Var<float> ProbeModel::forward(Tape<float>& tape, Var<float> states, std::span<const Segment> segs) const {
  Var<float> h = in_(tape, ln_in_(tape, states));
  h = num::add(h, tape.constant(model::packed_positions<float>(segs, in_.out_dim())));
  h = stack_.forward(tape, h, segs);
  return head_(tape, h);
}

std::vector<TokenSequence> ProbeModel::predict(const std::vector<Tensor<float>>& states) const {
  std::vector<TokenSequence> out;
  constexpr std::size_t kChunk = 64;
  for (std::size_t b = 0; b < states.size(); b += kChunk) {
    std::vector<const Tensor<float>*> chunk;
    for (std::size_t i = b; i < std::min(states.size(), b + kChunk); ++i) chunk.push_back(&states[i]);
    Packed p = pack(chunk, {});
    Tape<float> tape(false);
    const Tensor<float>& logits =
        p.rows.rows() ? forward(tape, tape.constant(p.rows), p.segs).value() : Tensor<float>();
    for (const auto& sg : p.segs) {
      TokenSequence seq;
      for (std::size_t r = sg.offset; r < sg.offset + sg.length; ++r) {
        const auto row = logits.row(r);
        seq.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
      }
      out.push_back(std::move(seq));
    }
  }
  return out;
}

model::ParamList<float> ProbeModel::parameters() {
  model::ParamList<float> out;
  ln_in_.collect(out);
  in_.collect(out);
  stack_.collect(out);
  head_.collect(out);
  return out;
}

ProbeFit fit_probe(const ProbeData& train, std::size_t vocab, const ProbeOptions& opt) {
  if (train.states.empty()) throw EvalError("probe: no training data");
  if (train.states.size() != train.targets.size()) throw EvalError("probe: states/targets count mismatch");
  for (std::size_t i = 0; i < train.states.size(); ++i) {
    if (train.states[i].rows() != train.targets[i].size()) {
      throw EvalError("probe: example " + std::to_string(i) + " has " + std::to_string(train.states[i].rows()) +
                      " states for " + std::to_string(train.targets[i].size()) + " tokens");
    }
  }
  ProbeFit fit{ProbeModel(train.states[0].cols(), vocab, opt), 0.0};
  auto params = fit.model.parameters();
  for (auto* p : params) p->trainable = true;
  num::Adam<float> adam;
  num::Rng rng(num::derive_seed(opt.seed, 1));
  const std::size_t tail_from = opt.steps - opt.steps / 10;
  double tail = 0.0;
  std::size_t tail_tokens = 0;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    std::vector<const Tensor<float>*> st;
    std::vector<const TokenSequence*> tg;
    for (std::size_t b = 0; b < opt.batch; ++b) {
      const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(train.states.size()) - 1));
      if (train.targets[i].empty()) continue;
      st.push_back(&train.states[i]);
      tg.push_back(&train.targets[i]);
    }
    if (st.empty()) continue;
    Packed p = pack(st, tg);
    for (auto* q : params) q->zero_grad();
    Tape<float> tape;
    Var<float> ce = num::cross_entropy(fit.model.forward(tape, tape.constant(p.rows), p.segs),
                                       std::span<const int>(p.targets));
    Var<float> loss = num::scale(ce, 1.0f / static_cast<float>(st.size()));
    if (step >= tail_from) {
      tail += static_cast<double>(ce.value().item());
      tail_tokens += p.targets.size();
    }
    tape.backward(loss);
    adam.step(params, opt.lr);
  }
  for (auto* p : params) p->trainable = false;
  fit.final_loss = tail_tokens ? tail / static_cast<double>(tail_tokens) : 0.0;
  return fit;
}

double probe_wer(const ProbeModel& probe, const ProbeData& test) {
  if (test.states.size() != test.targets.size()) throw EvalError("probe: states/targets count mismatch");
  return corpus_wer(probe.predict(test.states), test.targets);
}

}  // namespace blspkd::eval
