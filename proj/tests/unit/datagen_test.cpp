#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "blspkd/datagen/datagen.hpp"
#include "support/fixtures.hpp"

namespace num = blspkd::num;
namespace data = blspkd::data;
namespace model = blspkd::model;
namespace vocab = blspkd::vocab;
using blspkd::TokenSequence;

namespace {

constexpr int kC = vocab::kContentCount;

// Stationary token marginal by power iteration on the pair chain, using only
// the public transition probabilities.
std::vector<double> power_iteration_marginal(const data::SyntheticGrammar& g) {
  std::vector<double> pair(kC * kC, 1.0 / (kC * kC)), next(kC * kC);
  for (int it = 0; it < 3000; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (int a = 0; a < kC; ++a)
      for (int b = 0; b < kC; ++b) {
        const double w = pair[a * kC + b];
        if (w == 0.0) continue;
        for (int c = 0; c < kC; ++c) {
          const double p = g.transition(a + vocab::kFirstContent, b + vocab::kFirstContent, c + vocab::kFirstContent);
          if (p > 0) next[b * kC + c] += w * p;
        }
      }
    pair.swap(next);
  }
  std::vector<double> m(kC, 0.0);
  for (int a = 0; a < kC; ++a)
    for (int b = 0; b < kC; ++b) m[b] += pair[a * kC + b];
  return m;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("blspkd_datagen_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(Grammar, TransitionRowsAreDistributions) {
  const data::SyntheticGrammar g;
  for (int a = vocab::kFirstContent; a < vocab::kSize; a += 5)
    for (int b = vocab::kFirstContent; b < vocab::kSize; ++b) {
      double s = 0;
      for (int c = vocab::kFirstContent; c < vocab::kSize; ++c) s += g.transition(a, b, c);
      EXPECT_NEAR(s, 1.0, 1e-12);
      EXPECT_EQ(g.transition(a, b, b), 0.0);
    }
}

TEST(Grammar, SameSeedSameCorpus) {
  const data::SyntheticGrammar g1, g2;
  num::Rng r1(9), r2(9);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(g1.sample(r1), g2.sample(r2));
  data::GrammarConfig other;
  other.seed = 99;
  const data::SyntheticGrammar g3(other);
  num::Rng r3(9), r4(9);
  int differ = 0;
  for (int i = 0; i < 20; ++i) differ += g1.sample(r3) != g3.sample(r4);
  EXPECT_GT(differ, 0);
}

TEST(Grammar, StationaryMatchesPowerIteration) {
  const data::SyntheticGrammar g;
  const auto m = power_iteration_marginal(g);
  double s = 0;
  for (int c = 0; c < kC; ++c) {
    EXPECT_NEAR(g.stationary()[c], m[c], 1e-9);
    s += g.stationary()[c];
  }
  EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Grammar, BadConfig) {
  data::GrammarConfig c;
  c.min_len = 5;
  c.max_len = 4;
  EXPECT_THROW(data::SyntheticGrammar{c}, data::DatasetError);
  c = {};
  c.successors = 0;
  EXPECT_THROW(data::SyntheticGrammar{c}, data::DatasetError);
}

TEST(SynthSpeech, ForcedFrameCount) {
  data::SpeechConfig cfg;
  cfg.forced_frames = 2;
  const auto f = data::synth_speech({9, 10, 11}, 4, cfg);
  EXPECT_EQ(f.frames.rows(), 6u);
  EXPECT_EQ(f.frames.cols(), 16u);
  EXPECT_EQ(f.frames_per_token, (std::vector<int>{2, 2, 2}));
}

TEST(SynthSpeech, NoiselessFramesOfOneTokenAreIdentical) {
  data::SpeechConfig cfg;
  cfg.noise = 0;
  cfg.forced_frames = 3;
  const auto f = data::synth_speech({9, 10}, 4, cfg);
  const auto proto = data::speech_prototypes(cfg);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(f.frames(i, j), proto(i < 3 ? 9 : 10, j));
}

TEST(SynthSpeech, DeterministicAndFrameRange) {
  const auto a = data::synth_speech({9, 10, 11, 12, 13, 14}, 77);
  const auto b = data::synth_speech({9, 10, 11, 12, 13, 14}, 77);
  EXPECT_EQ(a.frames, b.frames);
  EXPECT_EQ(a.frames_per_token, b.frames_per_token);
  std::size_t total = 0;
  for (int k : a.frames_per_token) {
    EXPECT_GE(k, 2);
    EXPECT_LE(k, 5);
    total += static_cast<std::size_t>(k);
  }
  EXPECT_EQ(total, a.frames.rows());
  EXPECT_THROW(data::synth_speech({70}, 1), data::DatasetError);
}

TEST(AsrSet, EmptyAndLengthBounds) {
  const data::SyntheticGrammar g;
  EXPECT_TRUE(data::build_asr_set(0, 1, g).empty());
  const auto set = data::build_asr_set(500, 1, g);
  ASSERT_EQ(set.size(), 500u);
  for (const auto& p : set) {
    EXPECT_GE(p.transcript.size(), 4u);
    EXPECT_LE(p.transcript.size(), 24u);
    std::size_t frames = 0;
    for (int k : p.frames_per_token) frames += static_cast<std::size_t>(k);
    EXPECT_EQ(frames, p.features.rows());
    EXPECT_EQ(p.frames_per_token.size(), p.transcript.size());
    for (int id : p.transcript) EXPECT_TRUE(vocab::is_content(id));
  }
}

TEST(AsrSet, OrderIndependentPerExampleSeeds) {
  const data::SyntheticGrammar g;
  const auto big = data::build_asr_set(40, 3, g);
  const auto small = data::build_asr_set(10, 3, g);
  for (std::size_t i = 0; i < small.size(); ++i) {
    EXPECT_EQ(big[i].transcript, small[i].transcript);
    EXPECT_EQ(big[i].features, small[i].features);
  }
}

TEST(AsrSet, TokenHistogramMatchesStationary) {
  const data::SyntheticGrammar g;
  const auto set = data::build_asr_set(10000, 42, g);
  std::vector<double> count(kC, 0.0);
  double n = 0;
  for (const auto& p : set)
    for (int id : p.transcript) {
      count[id - vocab::kFirstContent] += 1;
      n += 1;
    }
  const auto m = power_iteration_marginal(g);
  double chi2 = 0;
  int dof = -1;
  for (int c = 0; c < kC; ++c) {
    if (m[c] * n < 5) continue;
    chi2 += (count[c] - n * m[c]) * (count[c] - n * m[c]) / (n * m[c]);
    ++dof;
  }
  // Tokens within a sentence are correlated, which inflates the statistic
  // over the iid χ²(dof); the bound allows for that.
  EXPECT_LT(chi2 / dof, 4.0) << "chi2 " << chi2 << " dof " << dof;
}

TEST(AsrSet, FrameTokenRatioVaries) {
  const data::SyntheticGrammar g;
  const auto set = data::build_asr_set(300, 8, g);
  double s = 0, s2 = 0;
  for (const auto& p : set) {
    const double r = static_cast<double>(p.features.rows()) / static_cast<double>(p.transcript.size());
    s += r;
    s2 += r * r;
  }
  const double mean = s / 300, var = s2 / 300 - mean * mean;
  EXPECT_GT(var, 0.01);
}

TEST(Split, DisjointByContent) {
  const data::SyntheticGrammar g;
  const auto set = data::build_asr_set(3000, 42, g);
  std::set<TokenSequence> train, held;
  for (const auto& p : set) (p.split == data::Split::train ? train : held).insert(p.transcript);
  for (const auto& t : held) EXPECT_EQ(train.count(t), 0u);
  EXPECT_GT(held.size(), 150u);
  EXPECT_LT(held.size(), 450u);
  EXPECT_EQ(data::select(set, data::Split::heldout).size() + data::select(set, data::Split::train).size(), set.size());
  EXPECT_EQ(data::split_from_name(data::split_name(data::Split::heldout)), data::Split::heldout);
  EXPECT_THROW(data::split_from_name("test"), data::DatasetError);
}

TEST(Base64, RoundTripAndErrors) {
  const std::vector<std::uint8_t> bytes{0, 1, 2, 250, 251, 252, 253};
  for (std::size_t n = 0; n <= bytes.size(); ++n) {
    const auto enc = data::base64_encode(bytes.data(), n);
    EXPECT_EQ(data::base64_decode(enc), std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + static_cast<long>(n)));
  }
  EXPECT_EQ(data::base64_encode(reinterpret_cast<const std::uint8_t*>("Man"), 3), "TWFu");
  EXPECT_THROW(data::base64_decode("abc"), data::DatasetError);
  EXPECT_THROW(data::base64_decode("ab$="), data::DatasetError);
  EXPECT_THROW(data::base64_decode("a=bc"), data::DatasetError);
}

TEST(DatasetFiles, RoundTrip) {
  const data::SyntheticGrammar g;
  const auto set = data::build_asr_set(30, 42, g);
  const auto path = temp_file("asr.jsonl");
  data::write_asr_set(path.string(), set);
  const auto back = data::read_asr_set(path.string());
  ASSERT_EQ(back.size(), set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    EXPECT_EQ(back[i].transcript, set[i].transcript);
    EXPECT_EQ(back[i].features, set[i].features);
    EXPECT_EQ(back[i].frames_per_token, set[i].frames_per_token);
    EXPECT_EQ(back[i].seed, set[i].seed);
    EXPECT_EQ(back[i].split, set[i].split);
  }
  const auto corpus = data::build_teacher_corpus(40, 5, g);
  const auto cpath = temp_file("corpus.txt");
  data::write_corpus(cpath.string(), corpus);
  EXPECT_EQ(data::read_corpus(cpath.string()), corpus);
  std::filesystem::remove(path);
  std::filesystem::remove(cpath);
}

TEST(DatasetFiles, MalformedInput) {
  const auto path = temp_file("bad.txt");
  num::write_file(path, "1 2 x\n");
  EXPECT_THROW(data::read_corpus(path.string()), data::DatasetError);
  num::write_file(path, "{\"transcript\": [9]}\n");
  EXPECT_THROW(data::read_asr_set(path.string()), data::DatasetError);
  std::filesystem::remove(path);
}

TEST(TeacherCorpus, MixesFormats) {
  const data::SyntheticGrammar g;
  const auto corpus = data::build_teacher_corpus(600, 5, g);
  int cont = 0, rep = 0;
  for (const auto& s : corpus) {
    ASSERT_GE(s.size(), 2u);
    EXPECT_EQ(s.front(), vocab::kBos);
    if (s[1] == vocab::kContinue) ++cont;
    if (s[1] == vocab::kRepeat) ++rep;
  }
  EXPECT_GT(cont, 50);
  EXPECT_GT(rep, 50);
}

class CwSet : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const data::SyntheticGrammar g;
    asr_ = new std::vector<data::AsrPair>(data::build_asr_set(40, 42, g));
    cw_ = new std::vector<data::CwTuple>(data::build_cw_set(*asr_, blspkd::testing::pretrained_teacher()));
  }
  static void TearDownTestSuite() {
    delete asr_;
    delete cw_;
  }
  static std::vector<data::AsrPair>* asr_;
  static std::vector<data::CwTuple>* cw_;
};
std::vector<data::AsrPair>* CwSet::asr_ = nullptr;
std::vector<data::CwTuple>* CwSet::cw_ = nullptr;

TEST_F(CwSet, RegenerationReproducesContinuations) {
  const auto& lm = blspkd::testing::pretrained_teacher();
  const auto again = data::build_cw_set(*asr_, lm);
  ASSERT_EQ(again.size(), cw_->size());
  for (std::size_t i = 0; i < cw_->size(); ++i) {
    EXPECT_EQ(again[i].continuation, (*cw_)[i].continuation);
    EXPECT_EQ((*cw_)[i].continuation,
              model::greedy_continuation(lm, (*cw_)[i].pair.transcript, (*cw_)[i].prompt, data::kMaxContinuation));
  }
}

TEST_F(CwSet, ContinuationCapAndArgmax) {
  const auto& lm = blspkd::testing::pretrained_teacher();
  int nonempty = 0;
  for (const auto& t : *cw_) {
    EXPECT_LE(t.continuation.size(), data::kMaxContinuation);
    nonempty += !t.continuation.empty();
    auto ids = model::continuation_prompt(t.pair.transcript, t.prompt);
    const std::size_t base = ids.size() - 1;
    ids.insert(ids.end(), t.continuation.begin(), t.continuation.end());
    num::Tape<float> tape(false);
    const auto p = lm.next_token_distributions(lm.embed_tokens(tape, ids));
    for (std::size_t j = 0; j < t.continuation.size(); ++j) {
      const auto row = p.row(base + j);
      EXPECT_EQ(std::max_element(row.begin(), row.end()) - row.begin(), t.continuation[j]);
    }
  }
  EXPECT_GT(nonempty, 30);
}

TEST_F(CwSet, FileRoundTrip) {
  const auto path = temp_file("cw.jsonl");
  data::write_cw_set(path.string(), *cw_);
  const auto back = data::read_cw_set(path.string());
  ASSERT_EQ(back.size(), cw_->size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].continuation, (*cw_)[i].continuation);
    EXPECT_EQ(back[i].prompt, (*cw_)[i].prompt);
    EXPECT_EQ(back[i].pair.features, (*cw_)[i].pair.features);
  }
  data::write_asr_set(path.string(), *asr_);
  EXPECT_THROW(data::read_cw_set(path.string()), data::DatasetError);
  std::filesystem::remove(path);
}
