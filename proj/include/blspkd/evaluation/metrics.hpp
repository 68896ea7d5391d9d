#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "blspkd/backbone/vocab.hpp"
#include "blspkd/numerics/tensor.hpp"

namespace blspkd::eval {

struct EvalError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Levenshtein distance with unit substitution/insertion/deletion costs.
std::size_t edit_distance(const TokenSequence& a, const TokenSequence& b);

// edit_distance / |ref|; throws EvalError on an empty reference.
double wer(const TokenSequence& hyp, const TokenSequence& ref);

// Corpus-level WER: total edits / total reference tokens.
double corpus_wer(const std::vector<TokenSequence>& hyps, const std::vector<TokenSequence>& refs);

// Corpus BLEU in [0, 100]: clipped 1..4-gram precisions, add-one smoothing
// on the counts for n ≥ 2, geometric mean, brevity penalty.
double corpus_bleu(const std::vector<TokenSequence>& candidates, const std::vector<TokenSequence>& references);

std::size_t lcs_length(const TokenSequence& a, const TokenSequence& b);
// LCS-based F1 in [0, 1]; two empty sequences score 1.
double rouge_l(const TokenSequence& candidate, const TokenSequence& reference);

struct SelfMetrics {
  double self_bleu = 0.0;    // [0, 100]
  double self_rougel = 0.0;  // [0, 1]
};

// Speech-input outputs scored against the same model's text-input outputs.
SelfMetrics self_metrics(const std::vector<TokenSequence>& speech_outputs,
                         const std::vector<TokenSequence>& text_outputs);

struct DistillMetrics {
  double mean_excess_kl = 0.0;  // nats / position
  double top1_agreement = 0.0;  // [0, 1]
  std::size_t positions = 0;
};

// Rows are aligned positions; each row a distribution.
DistillMetrics distill_metrics(const num::Tensor<double>& teacher, const num::Tensor<double>& student);

// Running form of distill_metrics for streaming over batches.
class DistillAccumulator {
 public:
  void add(std::span<const float> teacher, std::span<const float> student_log_probs);
  void add(std::span<const double> teacher, std::span<const double> student_probs);
  DistillMetrics result() const;

 private:
  double kl_ = 0.0;
  std::size_t agree_ = 0, n_ = 0;
};

}  // namespace blspkd::eval
