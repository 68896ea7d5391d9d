#include "blspkd/backbone/lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "blspkd/numerics/optim.hpp"

namespace blspkd::model {

template <class T>
EmbeddingSequence<T>::EmbeddingSequence(Var<T> rows, std::vector<Modality> tags,
                                        std::vector<Segment> segments)
    : rows_(rows), tags_(std::move(tags)), segments_(std::move(segments)) {
  if (rows_.valid() && rows_.rows() != tags_.size()) {
    throw num::DimensionError("EmbeddingSequence: " + std::to_string(tags_.size()) +
                              " tags for " + std::to_string(rows_.rows()) + " rows");
  }
  mask_.reserve(tags_.size());
  for (auto m : tags_) mask_.push_back(m == Modality::speech ? 1 : 0);
}

template <class T>
EmbeddingSequence<T>::EmbeddingSequence(Var<T> rows, std::vector<Modality> tags)
    : EmbeddingSequence(rows, tags, {Segment{0, tags.size()}}) {}

template <class T>
bool EmbeddingSequence<T>::any_speech() const {
  return std::any_of(mask_.begin(), mask_.end(), [](std::uint8_t m) { return m != 0; });
}

template <class T>
ToyLM<T>::ToyLM(LmConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  num::Rng rng(seed);
  embed_ = Parameter<T>("lm.embed", rng.normal_tensor<T>(cfg.vocab, cfg.dim, cfg.embed_std));
  stack_ = TransformerStack<T>("lm", cfg.layers,
                               BlockShape{cfg.dim, cfg.heads, 4, /*causal=*/true}, rng);
}

template <class T>
Var<T> ToyLM<T>::embed_rows(Tape<T>& tape, std::span<const int> ids) const {
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab) {
      throw num::DimensionError("embed_tokens: id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(cfg_.vocab));
    }
  }
  return num::gather_rows(bind(tape, embed_), ids);
}

template <class T>
EmbeddingSequence<T> ToyLM<T>::embed_tokens(Tape<T>& tape, std::span<const int> ids) const {
  return EmbeddingSequence<T>(embed_rows(tape, ids), std::vector<Modality>(ids.size(), Modality::text));
}

template <class T>
LmOutput<T> ToyLM<T>::forward(Tape<T>& tape, const EmbeddingSequence<T>& seq,
                              const LinearHook<T>* hook, bool keep_hidden) const {
  for (const auto& s : seq.segments()) {
    if (s.length > cfg_.max_context) {
      throw ContextError("sequence of length " + std::to_string(s.length) +
                         " exceeds max context " + std::to_string(cfg_.max_context));
    }
  }
  LmOutput<T> out;
  Var<T> x = seq.rows();
  if (x.cols() != cfg_.dim) {
    throw num::DimensionError("lm_forward: embedding width " + std::to_string(x.cols()) +
                              " != " + std::to_string(cfg_.dim));
  }
  if (seq.length() == 0) {
    out.logits = tape.constant(Tensor<T>(0, cfg_.vocab));
    return out;
  }
  if (keep_hidden) out.hidden.push_back(x);
  x = num::add(x, tape.constant(packed_positions<T>(seq.segments(), cfg_.dim)));
  // The hook only sees speech rows when there are any; all-text input takes
  // exactly the base path.
  const LinearHook<T>* h = seq.any_speech() ? hook : nullptr;
  Var<T> y = stack_.forward(tape, x, seq.segments(), h, seq.speech_mask(),
                            keep_hidden ? &out.hidden : nullptr);
  out.logits = num::matmul_nt(y, bind(tape, embed_));
  return out;
}

template <class T>
Tensor<T> ToyLM<T>::next_token_distributions(const EmbeddingSequence<T>& seq,
                                             const LinearHook<T>* hook) const {
  Tape<T>& tape = seq.rows().tape();
  return num::softmax(forward(tape, seq, hook).logits).value();
}

template <class T>
void ToyLM<T>::collect(ParamList<T>& out) {
  out.push_back(&embed_);
  stack_.collect(out);
}

template <class T>
ParamList<T> ToyLM<T>::parameters() {
  ParamList<T> out;
  collect(out);
  return out;
}

template <class T>
void ToyLM<T>::set_trainable(bool on) {
  for (auto* p : parameters()) p->trainable = on;
}

TokenSequence continuation_prompt(const TokenSequence& x, int c) {
  TokenSequence p;
  p.reserve(x.size() + 3);
  p.push_back(vocab::kBos);
  p.push_back(c);
  p.insert(p.end(), x.begin(), x.end());
  p.push_back(vocab::kEndOfInput);
  return p;
}

template <class T>
std::vector<TokenSequence> greedy_decode(const ToyLM<T>& lm, const std::vector<TokenSequence>& prompts,
                                         std::size_t max_len) {
  std::vector<TokenSequence> out(prompts.size());
  std::vector<std::size_t> live(prompts.size());
  std::iota(live.begin(), live.end(), 0);
  for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
    Tape<T> tape(false);
    std::vector<int> ids;
    std::vector<Segment> segs;
    for (std::size_t i : live) {
      segs.push_back(Segment{ids.size(), prompts[i].size() + out[i].size()});
      ids.insert(ids.end(), prompts[i].begin(), prompts[i].end());
      ids.insert(ids.end(), out[i].begin(), out[i].end());
    }
    Var<T> rows = lm.embed_rows(tape, ids);
    EmbeddingSequence<T> seq(rows, std::vector<Modality>(ids.size(), Modality::text), segs);
    const Tensor<T>& logits = lm.forward(tape, seq).logits.value();
    std::vector<std::size_t> next;
    for (std::size_t k = 0; k < live.size(); ++k) {
      const std::size_t row = segs[k].offset + segs[k].length - 1;
      const auto r = logits.row(row);
      const int tok = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
      if (tok == vocab::kEos) continue;
      out[live[k]].push_back(tok);
      next.push_back(live[k]);
    }
    live = std::move(next);
  }
  return out;
}

template <class T>
TokenSequence greedy_continuation(const ToyLM<T>& lm, const TokenSequence& x, int c,
                                  std::size_t max_len) {
  return greedy_decode(lm, {continuation_prompt(x, c)}, max_len)[0];
}

namespace {

// Packs sequences and returns (sequence, targets) where target of row r is
// the next token in the same sequence (-1 at each sequence end).
struct PackedLm {
  std::vector<int> ids;
  std::vector<int> targets;
  std::vector<Segment> segments;
};

PackedLm pack_for_lm(const std::vector<const TokenSequence*>& seqs) {
  PackedLm p;
  for (const auto* s : seqs) {
    if (s->size() < 2) continue;
    p.segments.push_back(Segment{p.ids.size(), s->size()});
    for (std::size_t i = 0; i < s->size(); ++i) {
      p.ids.push_back((*s)[i]);
      p.targets.push_back(i + 1 < s->size() ? (*s)[i + 1] : -1);
    }
  }
  return p;
}

}  // namespace

double sequence_cross_entropy(const ToyLM<float>& lm, const std::vector<TokenSequence>& seqs) {
  double total = 0.0;
  std::size_t count = 0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t b = 0; b < seqs.size(); b += kChunk) {
    std::vector<const TokenSequence*> chunk;
    for (std::size_t i = b; i < std::min(seqs.size(), b + kChunk); ++i) chunk.push_back(&seqs[i]);
    PackedLm p = pack_for_lm(chunk);
    if (p.ids.empty()) continue;
    Tape<float> tape(false);
    EmbeddingSequence<float> seq(lm.embed_rows(tape, p.ids),
                                 std::vector<Modality>(p.ids.size(), Modality::text), p.segments);
    auto logp = num::log_softmax(lm.forward(tape, seq).logits).value();
    for (std::size_t r = 0; r < p.targets.size(); ++r) {
      if (p.targets[r] < 0) continue;
      total -= logp(r, static_cast<std::size_t>(p.targets[r]));
      ++count;
    }
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

void pretrain_teacher(ToyLM<float>& lm, const std::vector<TokenSequence>& corpus,
                      const PretrainOptions& opt) {
  for (const auto& s : corpus) {
    for (int id : s) {
      if (id < 0 || static_cast<std::size_t>(id) >= lm.config().vocab) {
        throw num::DimensionError("pretrain_teacher: token id " + std::to_string(id) + " outside vocabulary");
      }
    }
  }
  lm.set_trainable(true);
  auto params = lm.parameters();
  num::Adam<float> adam;
  num::Rng rng(opt.seed);
  const auto warmup = static_cast<std::size_t>(opt.warmup_frac * static_cast<double>(opt.steps));
  for (std::size_t step = 0; step < opt.steps && !corpus.empty(); ++step) {
    std::vector<const TokenSequence*> batch;
    for (std::size_t b = 0; b < opt.batch; ++b) {
      batch.push_back(&corpus[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(corpus.size()) - 1))]);
    }
    PackedLm p = pack_for_lm(batch);
    if (p.ids.empty()) continue;
    for (auto* q : params) q->zero_grad();
    Tape<float> tape;
    EmbeddingSequence<float> seq(lm.embed_rows(tape, p.ids),
                                 std::vector<Modality>(p.ids.size(), Modality::text), p.segments);
    Var<float> logits = lm.forward(tape, seq).logits;
    Var<float> loss = num::scale(num::cross_entropy(logits, std::span<const int>(p.targets)),
                                 1.0f / static_cast<float>(batch.size()));
    const double lv = loss.value().item();
    if (!std::isfinite(lv)) {
      throw TrainingError("pretrain_teacher: loss diverged at step " + std::to_string(step));
    }
    tape.backward(loss);
    adam.step(params, num::warmup_lr(opt.lr, step, warmup));
  }
  lm.set_trainable(false);
}

template class EmbeddingSequence<float>;
template class EmbeddingSequence<double>;
template class ToyLM<float>;
template class ToyLM<double>;
template TokenSequence greedy_continuation(const ToyLM<float>&, const TokenSequence&, int, std::size_t);
template TokenSequence greedy_continuation(const ToyLM<double>&, const TokenSequence&, int, std::size_t);
template std::vector<TokenSequence> greedy_decode(const ToyLM<float>&, const std::vector<TokenSequence>&,
                                                  std::size_t);
template std::vector<TokenSequence> greedy_decode(const ToyLM<double>&, const std::vector<TokenSequence>&,
                                                  std::size_t);

}  // namespace blspkd::model
