#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "blspkd/backbone/encoder.hpp"
#include "blspkd/backbone/lm.hpp"
#include "blspkd/backbone/vocab.hpp"
#include "blspkd/numerics/random.hpp"

namespace blspkd::data {

using num::Tensor;

struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GrammarConfig {
  std::uint64_t seed = 1234;
  std::size_t min_len = 4;
  std::size_t max_len = 24;
  std::size_t successors = 4;  // per preceding token
};

// Order-2 Markov source over the content tokens. Each token b has a sparse
// successor set; the token before b reweights it. A token never follows
// itself, so adjacent tokens always differ.
class SyntheticGrammar {
 public:
  explicit SyntheticGrammar(GrammarConfig cfg = {});

  const GrammarConfig& config() const { return cfg_; }

  // P(c | a, b) over content ids (zero outside the successor set of b).
  double transition(int a, int b, int c) const;
  // Stationary marginal over content ids (index = id - kFirstContent).
  const std::vector<double>& stationary() const { return stationary_; }

  TokenSequence sample(num::Rng& rng) const;
  TokenSequence sample(num::Rng& rng, std::size_t length) const;
  // n more tokens continuing `context` (needs at least two tokens).
  TokenSequence continue_from(const TokenSequence& context, std::size_t n, num::Rng& rng) const;

 private:
  struct Row {
    std::vector<int> next;
    std::vector<double> prob;
  };
  const Row& row(int a, int b) const;
  int draw(const Row& r, num::Rng& rng) const;
  void compute_stationary();

  GrammarConfig cfg_;
  std::vector<std::vector<int>> succ_;  // successor set per content token
  std::vector<Row> table_;              // [a][b] flattened
  std::vector<double> pair_stationary_;
  std::vector<double> stationary_;
};

struct SpeechConfig {
  std::size_t feat_dim = 16;
  int min_frames = 2;
  int max_frames = 5;
  double noise = 0.1;
  std::uint64_t voice_seed = 99;  // fixes the per-token prototypes
  int forced_frames = 0;          // >0 pins every token's frame count
};

struct FeatureSequence {
  Tensor<float> frames;  // l × feat_dim
  std::vector<int> frames_per_token;
};

// Per-token prototype table (rows = vocabulary ids).
Tensor<float> speech_prototypes(const SpeechConfig& cfg);
FeatureSequence synth_speech(const TokenSequence& x, std::uint64_t seed, const SpeechConfig& cfg = {});

enum class Split { train, heldout };
const char* split_name(Split s);
Split split_from_name(const std::string& s);
// Disjoint by content: every copy of a transcript lands on the same side.
Split split_of(const TokenSequence& x, unsigned heldout_percent = 10);

struct AsrPair {
  TokenSequence transcript;
  Tensor<float> features;
  std::vector<int> frames_per_token;
  std::uint64_t seed = 0;
  Split split = Split::train;
};

struct CwTuple {
  AsrPair pair;
  int prompt = vocab::kContinue;
  TokenSequence continuation;
};

std::vector<AsrPair> build_asr_set(std::size_t count, std::uint64_t seed, const SyntheticGrammar& g,
                                   const SpeechConfig& speech = {});

constexpr std::size_t kMaxContinuation = 16;

std::vector<CwTuple> build_cw_set(const std::vector<AsrPair>& asr, const model::ToyLM<float>& teacher,
                                  std::size_t max_len = kMaxContinuation);

template <class E>
std::vector<E> select(const std::vector<E>& set, Split split);

// Teacher pretraining corpus: a mix of plain transcripts, prompted
// continuations and prompted repeats.
// Per-frame token labels for encoder pretraining; views into `pairs`.
std::vector<model::LabelledFrames> frame_labels(const std::vector<AsrPair>& pairs);

std::vector<TokenSequence> build_teacher_corpus(std::size_t count, std::uint64_t seed,
                                                const SyntheticGrammar& g);

// Newline-delimited, space-separated ids.
void write_corpus(const std::string& path, const std::vector<TokenSequence>& corpus);
std::vector<TokenSequence> read_corpus(const std::string& path);

std::string base64_encode(const std::uint8_t* data, std::size_t size);
std::vector<std::uint8_t> base64_decode(const std::string& text);

// JSON lines; features as base64 little-endian f32.
void write_asr_set(const std::string& path, const std::vector<AsrPair>& set);
std::vector<AsrPair> read_asr_set(const std::string& path);
void write_cw_set(const std::string& path, const std::vector<CwTuple>& set);
std::vector<CwTuple> read_cw_set(const std::string& path);

}  // namespace blspkd::data
