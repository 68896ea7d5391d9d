#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "blspkd/datagen/datagen.hpp"
#include "blspkd/evaluation/metrics.hpp"
#include "blspkd/evaluation/probe.hpp"
#include "blspkd/trainer/system.hpp"

namespace blspkd::eval {

using AsrRefs = std::vector<const data::AsrPair*>;

AsrRefs refs_of(const std::vector<data::AsrPair>& pairs, std::size_t limit = 0);

// A decoding prefix given directly as LM-input rows.
struct PrefixRows {
  num::Tensor<float> rows;
  std::vector<model::Modality> tags;
};

// Greedy decoding after embedded prefixes; the hook sees the prefix tags,
// generated tokens are text. Stops at eos (excluded) or max_len.
std::vector<TokenSequence> greedy_decode_embedded(const model::ToyLM<float>& lm, const model::LinearHook<float>* hook,
                                                  const std::vector<PrefixRows>& prefixes, std::size_t max_len);

// Adapter output per example (inference-mode firing unless `counted`).
std::vector<num::Tensor<float>> adapter_outputs(const train::SpeechSystem& sys, const AsrRefs& pairs,
                                                bool counted = false);

// [bos, marker, s_adp..., eoi] for each example.
std::vector<PrefixRows> speech_prompts(const train::SpeechSystem& sys, const std::vector<num::Tensor<float>>& s_adp,
                                       int marker);

inline constexpr std::size_t kRepeatMaxLen = 32;
inline constexpr std::size_t kContinuationMaxLen = 16;

// Greedy decode of [bos, repeat, s_adp, eoi].
std::vector<TokenSequence> prompted_asr(const train::SpeechSystem& sys, const AsrRefs& pairs);
TokenSequence prompted_asr(const train::SpeechSystem& sys, const data::AsrPair& pair);

struct SelfOutputs {
  std::vector<TokenSequence> speech;  // continuation of [bos, c, s_adp, eoi]
  std::vector<TokenSequence> text;    // continuation of [bos, c, x, eoi]
};
SelfOutputs self_outputs(const train::SpeechSystem& sys, const AsrRefs& pairs);

struct DistillEval {
  std::optional<DistillMetrics> input;     // ASR format, CFormer only
  std::optional<DistillMetrics> response;  // CW format on teacher continuations
};
// Positions aligned as in training (true-count firing).
DistillEval distill_eval(const train::SpeechSystem& sys, const AsrRefs& pairs,
                         const std::vector<data::CwTuple>* cw = nullptr);

// LM hidden states at `layer` (0 = adapter output rows) over the speech
// positions of [bos, s_adp], with true-count firing. CFormer only.
ProbeData probe_states(const train::SpeechSystem& sys, const AsrRefs& pairs, std::size_t layer);

struct ProbeResult {
  std::size_t layer = 0;
  double wer = 0.0;
  double final_loss = 0.0;
  std::size_t train_examples = 0, test_examples = 0;
  std::uint64_t checksum_before = 0, checksum_after = 0;
};

// Layers 0..L of the LM; others throw EvalError.
ProbeResult train_probe(train::SpeechSystem& sys, std::size_t layer, const AsrRefs& train_pairs,
                        const AsrRefs& test_pairs, const ProbeOptions& opt = {});

struct EvalOptions {
  std::size_t max_examples = 400;  // held-out examples scored
  std::vector<std::size_t> probe_layers;
  std::size_t probe_train = 2000;  // probe training examples (from the train split)
  ProbeOptions probe;
};

struct ExampleRecord {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  TokenSequence ref, prompted, speech_output, text_output;
  double wer_prompted = 0.0;
  std::size_t fired = 0;  // inference-mode CIF count (CNN: output length)
};

struct EvalReport {
  std::string preset;
  std::size_t examples = 0;
  double self_bleu = 0.0;
  double self_rougel = 0.0;
  double wer_prompted = 0.0;
  std::map<std::size_t, double> wer_probe;
  DistillEval distill;
  std::vector<ExampleRecord> records;
};

EvalReport evaluate(train::SpeechSystem& sys, const std::string& preset, const std::vector<data::AsrPair>& heldout,
                    const std::vector<data::AsrPair>& probe_train, const EvalOptions& opt = {});

// Throws EvalError if a metric is outside its range.
void check_ranges(const EvalReport& r);

std::string to_json(const EvalReport& r);
std::string examples_csv(const EvalReport& r);
std::string tokens_str(const TokenSequence& s);

}  // namespace blspkd::eval
