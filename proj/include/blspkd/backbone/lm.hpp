#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "blspkd/backbone/transformer.hpp"
#include "blspkd/backbone/vocab.hpp"

namespace blspkd::model {

struct ContextError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Modality : std::uint8_t { text = 0, speech = 1 };

// Rows in the LM word-embedding space, possibly several sequences packed
// back to back. Tags are fixed at construction.
template <class T>
class EmbeddingSequence {
 public:
  EmbeddingSequence() = default;
  EmbeddingSequence(Var<T> rows, std::vector<Modality> tags, std::vector<Segment> segments);
  // Single sequence covering all rows.
  EmbeddingSequence(Var<T> rows, std::vector<Modality> tags);

  const Var<T>& rows() const { return rows_; }
  std::size_t length() const { return tags_.size(); }
  const std::vector<Modality>& tags() const { return tags_; }
  const std::vector<Segment>& segments() const { return segments_; }
  // 1 for speech rows; the PLoRA gate.
  const std::vector<std::uint8_t>& speech_mask() const { return mask_; }
  bool any_speech() const;

 private:
  Var<T> rows_;
  std::vector<Modality> tags_;
  std::vector<Segment> segments_;
  std::vector<std::uint8_t> mask_;
};

struct LmConfig {
  std::size_t vocab = vocab::kSize;
  std::size_t layers = 4;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t max_context = 256;
  double embed_std = 0.05;
};

template <class T>
struct LmOutput {
  Var<T> logits;  // rows × V
  // hidden[0] is the input embedding rows, hidden[k] the residual stream
  // after block k.
  std::vector<Var<T>> hidden;
};

// Decoder-only LM with tied input/output embedding.
template <class T>
class ToyLM {
 public:
  ToyLM() = default;
  ToyLM(LmConfig cfg, std::uint64_t seed);

  const LmConfig& config() const { return cfg_; }

  EmbeddingSequence<T> embed_tokens(Tape<T>& tape, std::span<const int> ids) const;
  Var<T> embed_rows(Tape<T>& tape, std::span<const int> ids) const;

  LmOutput<T> forward(Tape<T>& tape, const EmbeddingSequence<T>& seq,
                      const LinearHook<T>* hook = nullptr, bool keep_hidden = false) const;
  // Softmax of forward().logits, rows = positions.
  Tensor<T> next_token_distributions(const EmbeddingSequence<T>& seq,
                                     const LinearHook<T>* hook = nullptr) const;

  void collect(ParamList<T>& out);
  ParamList<T> parameters();
  void set_trainable(bool on);
  TransformerStack<T>& stack() { return stack_; }
  Parameter<T>& embedding() { return embed_; }
  const Parameter<T>& embedding() const { return embed_; }

 private:
  LmConfig cfg_;
  Parameter<T> embed_;
  TransformerStack<T> stack_;
};

// Greedy continuation for a prompt [bos, c, x..., eoi]: appends the argmax
// token until eos (not included) or max_len tokens.
template <class T>
TokenSequence greedy_continuation(const ToyLM<T>& lm, const TokenSequence& x, int c,
                                  std::size_t max_len);

// Batched greedy decoding over arbitrary prompts; result i continues prompts[i].
template <class T>
std::vector<TokenSequence> greedy_decode(const ToyLM<T>& lm, const std::vector<TokenSequence>& prompts,
                                         std::size_t max_len);

// [bos, c, x..., eoi]
TokenSequence continuation_prompt(const TokenSequence& x, int c);

struct PretrainOptions {
  std::size_t steps = 2000;
  double lr = 1e-3;
  std::size_t batch = 16;
  std::uint64_t seed = 1;
  double warmup_frac = 0.05;
};

// Mean next-token cross-entropy (nats) of `lm` over the sequences.
double sequence_cross_entropy(const ToyLM<float>& lm, const std::vector<TokenSequence>& seqs);

// Trains the teacher on the corpus (next-token CE over all non-bos positions)
// and marks it frozen.
void pretrain_teacher(ToyLM<float>& lm, const std::vector<TokenSequence>& corpus,
                      const PretrainOptions& opt);

extern template class ToyLM<float>;
extern template class ToyLM<double>;

}  // namespace blspkd::model
