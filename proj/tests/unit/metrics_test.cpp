#include <gtest/gtest.h>

#include <cmath>

#include "blspkd/evaluation/metrics.hpp"
#include "blspkd/losses/losses.hpp"
#include "blspkd/numerics/random.hpp"

using namespace blspkd;
using eval::EvalError;
using num::Tensor;

namespace {

// a..z → small ids for readable examples
TokenSequence toks(const std::string& s) {
  TokenSequence out;
  for (char c : s)
    if (c != ' ') out.push_back(vocab::kFirstContent + (c - 'a'));
  return out;
}

TokenSequence random_seq(num::Rng& rng, std::size_t max_len, int alphabet) {
  TokenSequence s(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(max_len))));
  for (auto& t : s) t = static_cast<int>(rng.uniform_int(0, alphabet - 1));
  return s;
}

}  // namespace

TEST(Wer, Identical) { EXPECT_EQ(eval::wer(toks("a b c"), toks("a b c")), 0.0); }

TEST(Wer, OneSubstitution) { EXPECT_DOUBLE_EQ(eval::wer(toks("a x c"), toks("a b c")), 1.0 / 3.0); }

TEST(Wer, EmptyHypothesisIsAllDeletions) { EXPECT_EQ(eval::wer({}, toks("a b c")), 1.0); }

TEST(Wer, InsertionsCanExceedOne) { EXPECT_EQ(eval::wer(toks("a b c d"), toks("a")), 3.0); }

TEST(Wer, EmptyReferenceThrows) { EXPECT_THROW(eval::wer(toks("a"), {}), EvalError); }

TEST(EditDistance, MetricProperties) {
  num::Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_seq(rng, 10, 4), b = random_seq(rng, 10, 4), c = random_seq(rng, 10, 4);
    EXPECT_EQ(eval::edit_distance(a, a), 0u);
    EXPECT_EQ(eval::edit_distance(a, b), eval::edit_distance(b, a));
    EXPECT_LE(eval::edit_distance(a, c), eval::edit_distance(a, b) + eval::edit_distance(b, c));
    EXPECT_LE(eval::edit_distance(a, b), std::max(a.size(), b.size()));
  }
}

TEST(CorpusWer, PoolsEditsOverReferenceTokens) {
  EXPECT_DOUBLE_EQ(eval::corpus_wer({toks("a x c"), toks("d")}, {toks("a b c"), toks("d e")}), 2.0 / 5.0);
  EXPECT_THROW(eval::corpus_wer({}, {}), EvalError);
}

TEST(RougeL, HandExample) {
  EXPECT_EQ(eval::lcs_length(toks("a b c d"), toks("a c d")), 3u);
  // P = 3/4, R = 3/3 → F1 = 2·0.75·1/1.75
  EXPECT_NEAR(eval::rouge_l(toks("a b c d"), toks("a c d")), 2 * 0.75 / 1.75, 1e-12);
  // equal lengths: P = R = 3/4
  EXPECT_NEAR(eval::rouge_l(toks("a b c d"), toks("a c d e")), 0.75, 1e-12);
}

TEST(RougeL, DisjointIsZero) { EXPECT_EQ(eval::rouge_l(toks("a b"), toks("c d")), 0.0); }

TEST(Bleu, IdentityIs100) {
  const std::vector<TokenSequence> x{toks("a b c d e"), toks("b a"), toks("c")};
  EXPECT_NEAR(eval::corpus_bleu(x, x), 100.0, 1e-9);
}

TEST(Bleu, DisjointIsZero) {
  EXPECT_EQ(eval::corpus_bleu({toks("a b c d")}, {toks("e f g h")}), 0.0);
}

TEST(Bleu, BrevityPenaltyHandValue) {
  // all n-gram precisions are 1 (with add-one for n ≥ 2); BP = exp(1 − 5/4)
  EXPECT_NEAR(eval::corpus_bleu({toks("a b c d")}, {toks("a b c d e")}), 100.0 * std::exp(-0.25), 1e-9);
}

TEST(Bleu, SmoothedHandValue) {
  // cand "a b x d" vs ref "a b c d": p1 = 3/4, p2 = (1+1)/(3+1), p3 = (0+1)/(2+1), p4 = (0+1)/(1+1)
  const double expect = 100.0 * std::exp((std::log(0.75) + std::log(0.5) + std::log(1.0 / 3) + std::log(0.5)) / 4);
  EXPECT_NEAR(eval::corpus_bleu({toks("a b x d")}, {toks("a b c d")}), expect, 1e-9);
}

TEST(Bleu, ClipsRepeatedNgrams) {
  // "a a a a" vs "a b": unigram matches clip to 1 of 4
  const double b = eval::corpus_bleu({toks("a a a a")}, {toks("a b")});
  const double expect = 100.0 * std::exp((std::log(0.25) + std::log(1.0 / 4) + std::log(1.0 / 3) + std::log(1.0 / 2)) / 4);
  EXPECT_NEAR(b, expect, 1e-9);
}

TEST(Bleu, EmptyReferenceSetThrows) { EXPECT_THROW(eval::corpus_bleu({}, {}), EvalError); }

TEST(SelfMetrics, IdentityGivesPerfectScores) {
  num::Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TokenSequence> x;
    for (int i = 0; i < 5; ++i) {
      auto s = random_seq(rng, 12, 8);
      s.push_back(3);
      x.push_back(s);
    }
    const auto m = eval::self_metrics(x, x);
    EXPECT_NEAR(m.self_bleu, 100.0, 1e-9);
    EXPECT_NEAR(m.self_rougel, 1.0, 1e-12);
  }
}

TEST(SelfMetrics, DisjointVocabularies) {
  const auto m = eval::self_metrics({toks("a b c"), toks("a a")}, {toks("d e f"), toks("g")});
  EXPECT_EQ(m.self_bleu, 0.0);
  EXPECT_EQ(m.self_rougel, 0.0);
}

TEST(SelfMetrics, RangesOnRandomPairs) {
  num::Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<TokenSequence> a, b;
    for (int i = 0; i < 4; ++i) {
      a.push_back(random_seq(rng, 8, 5));
      b.push_back(random_seq(rng, 8, 5));
    }
    const auto m = eval::self_metrics(a, b);
    EXPECT_GE(m.self_bleu, 0.0);
    EXPECT_LE(m.self_bleu, 100.0);
    EXPECT_GE(m.self_rougel, 0.0);
    EXPECT_LE(m.self_rougel, 1.0);
  }
}

TEST(SelfMetrics, UnpairedOrEmptyThrows) {
  EXPECT_THROW(eval::self_metrics({}, {}), EvalError);
  EXPECT_THROW(eval::self_metrics({toks("a")}, {toks("a"), toks("b")}), EvalError);
}

TEST(DistillMetrics, IdenticalDistributions) {
  Tensor<double> p(2, 3, std::vector<double>{0.2, 0.5, 0.3, 1.0, 0.0, 0.0});
  const auto m = eval::distill_metrics(p, p);
  EXPECT_NEAR(m.mean_excess_kl, 0.0, 1e-15);
  EXPECT_EQ(m.top1_agreement, 1.0);
  EXPECT_EQ(m.positions, 2u);
}

TEST(DistillMetrics, HandExcessKl) {
  Tensor<double> p(1, 2, std::vector<double>{0.5, 0.5});
  Tensor<double> q(1, 2, std::vector<double>{0.25, 0.75});
  const auto m = eval::distill_metrics(p, q);
  // 0.8370 − ln 2
  EXPECT_NEAR(m.mean_excess_kl, 0.1438, 5e-5);
  EXPECT_NEAR(m.mean_excess_kl, 0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75), 1e-15);
}

TEST(DistillMetrics, OneHotTeacherArgmaxElsewhere) {
  Tensor<double> p(1, 3, std::vector<double>{0.0, 1.0, 0.0});
  Tensor<double> q(1, 3, std::vector<double>{0.7, 0.2, 0.1});
  EXPECT_EQ(eval::distill_metrics(p, q).top1_agreement, 0.0);
}

TEST(DistillMetrics, MatchesLossMinusEntropy) {
  num::Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<double> p(3, 6), q(3, 6);
    for (auto* t : {&p, &q}) {
      for (std::size_t r = 0; r < 3; ++r) {
        double z = 0;
        for (auto& v : t->row(r)) z += (v = rng.uniform() + 1e-3);
        for (auto& v : t->row(r)) v /= z;
      }
    }
    const auto m = eval::distill_metrics(p, q);
    EXPECT_NEAR(m.mean_excess_kl * 3, loss::resp_kl(p, q) - loss::entropy(p), 1e-12);
    EXPECT_GE(m.mean_excess_kl, -1e-12);
  }
}

TEST(DistillMetrics, AgreementInvariantUnderMonotoneLogitTransform) {
  num::Rng rng(4);
  eval::DistillAccumulator a, b;
  for (int r = 0; r < 200; ++r) {
    std::vector<float> teacher(8), logits(8), lp1(8), lp2(8);
    double z = 0;
    for (auto& v : teacher) z += (v = static_cast<float>(rng.uniform()));
    for (auto& v : teacher) v = static_cast<float>(v / z);
    for (auto& v : logits) v = static_cast<float>(rng.normal());
    // log-softmax of z and of the strictly increasing map 3z³ + z + 2
    auto lsm = [](std::vector<float> x, std::vector<float>& out) {
      const float mx = *std::max_element(x.begin(), x.end());
      double s = 0;
      for (float v : x) s += std::exp(v - mx);
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i] - mx - std::log(s));
    };
    lsm(logits, lp1);
    std::vector<float> warped(8);
    for (std::size_t i = 0; i < 8; ++i) warped[i] = 3 * logits[i] * logits[i] * logits[i] + logits[i] + 2;
    lsm(warped, lp2);
    a.add(std::span<const float>(teacher), std::span<const float>(lp1));
    b.add(std::span<const float>(teacher), std::span<const float>(lp2));
  }
  EXPECT_EQ(a.result().top1_agreement, b.result().top1_agreement);
}
