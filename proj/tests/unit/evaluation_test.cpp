#include <gtest/gtest.h>

#include <json.hpp>

#include "../support/fixtures.hpp"
#include "blspkd/evaluation/evaluate.hpp"

using namespace blspkd;
using eval::EvalError;

namespace {

struct EvalData {
  std::vector<data::AsrPair> train, heldout;
};

const EvalData& eval_data() {
  static const EvalData d = [] {
    const data::SyntheticGrammar g;
    const auto all = data::build_asr_set(400, 21, g);
    return EvalData{data::select(all, data::Split::train), data::select(all, data::Split::heldout)};
  }();
  return d;
}

train::SpeechSystem untrained(const std::string& preset) {
  const auto& b = blspkd::testing::pretrained_backbone();
  return train::SpeechSystem::create(b.lm, b.encoder, train::preset(preset));
}

eval::ProbeData embedding_states(const model::ToyLM<float>& lm, const std::vector<data::AsrPair>& pairs) {
  eval::ProbeData d;
  for (const auto& p : pairs) {
    num::Tape<float> tape(false);
    d.states.push_back(lm.embed_rows(tape, p.transcript).value());
    d.targets.push_back(p.transcript);
  }
  return d;
}

eval::ProbeOptions quick_probe() {
  eval::ProbeOptions o;
  o.steps = 300;
  return o;
}

}  // namespace

TEST(PromptedAsr, UntrainedAdapterIsNearChance) {
  const auto sys = untrained("kd4");
  const auto refs = eval::refs_of(eval_data().heldout, 40);
  const auto hyps = eval::prompted_asr(sys, refs);
  std::vector<TokenSequence> gold;
  for (const auto* p : refs) gold.push_back(p->transcript);
  EXPECT_GE(eval::corpus_wer(hyps, gold), 0.9);
}

TEST(PromptedAsr, DeterministicDecode) {
  const auto sys = untrained("kd5");
  const auto refs = eval::refs_of(eval_data().heldout, 8);
  EXPECT_EQ(eval::prompted_asr(sys, refs), eval::prompted_asr(sys, refs));
  EXPECT_EQ(eval::prompted_asr(sys, *refs[3]), eval::prompted_asr(sys, refs)[3]);
}

// Text-only prefixes must decode exactly like the token-level greedy path.
TEST(GreedyDecodeEmbedded, TextPrefixMatchesTokenDecode) {
  const auto& lm = blspkd::testing::pretrained_teacher();
  const auto& pairs = eval_data().heldout;
  std::vector<eval::PrefixRows> prefixes;
  std::vector<TokenSequence> want;
  for (std::size_t i = 0; i < 6; ++i) {
    const TokenSequence prompt = model::continuation_prompt(pairs[i].transcript, vocab::kContinue);
    num::Tape<float> tape(false);
    prefixes.push_back({lm.embed_rows(tape, prompt).value(), std::vector<model::Modality>(prompt.size(), model::Modality::text)});
    want.push_back(model::greedy_continuation(lm, pairs[i].transcript, vocab::kContinue, eval::kContinuationMaxLen));
  }
  EXPECT_EQ(eval::greedy_decode_embedded(lm, nullptr, prefixes, eval::kContinuationMaxLen), want);
}

TEST(Probe, ExactEmbeddingsAreNearlyPerfect) {
  const auto& lm = blspkd::testing::pretrained_teacher();
  const auto tr = embedding_states(lm, eval_data().train);
  const auto te = embedding_states(lm, eval_data().heldout);
  const auto fit = eval::fit_probe(tr, lm.config().vocab, quick_probe());
  EXPECT_LT(eval::probe_wer(fit.model, te), 0.05);
  EXPECT_LT(fit.final_loss, 0.5);
}

// Seed-random states carry no information: the probe can only learn the
// token prior, which for the toy grammar leaves WER close to 1.
TEST(Probe, RandomStatesAreNearChance) {
  num::Rng rng(123);
  auto random_states = [&](const std::vector<data::AsrPair>& pairs) {
    eval::ProbeData d;
    for (const auto& p : pairs) {
      d.states.push_back(rng.normal_tensor<float>(p.transcript.size(), 64, 1.0));
      d.targets.push_back(p.transcript);
    }
    return d;
  };
  const auto tr = random_states(eval_data().train);
  const auto te = random_states(eval_data().heldout);
  const auto fit = eval::fit_probe(tr, 64, quick_probe());
  EXPECT_GE(eval::probe_wer(fit.model, te), 0.8);
}

TEST(Probe, MisalignedOrEmptyDataThrows) {
  eval::ProbeData d;
  EXPECT_THROW(eval::fit_probe(d, 64, quick_probe()), EvalError);
  d.states.push_back(num::Tensor<float>(3, 8));
  d.targets.push_back(TokenSequence{7, 8});
  EXPECT_THROW(eval::fit_probe(d, 64, quick_probe()), EvalError);
}

TEST(TrainProbe, LeavesModelUntouchedAndChecksLayer) {
  auto sys = untrained("kd4");
  const auto tr = eval::refs_of(eval_data().train, 60);
  const auto te = eval::refs_of(eval_data().heldout, 20);
  auto o = quick_probe();
  o.steps = 20;
  auto all = sys.student_parameters();
  auto lm = sys.lm_parameters();
  const auto s0 = num::checksum(all), l0 = num::checksum(lm);
  for (std::size_t layer : {0u, 4u}) {
    const auto r = eval::train_probe(sys, layer, tr, te, o);
    EXPECT_EQ(r.layer, layer);
    EXPECT_EQ(r.checksum_before, r.checksum_after);
    EXPECT_GE(r.wer, 0.0);
    EXPECT_EQ(r.test_examples, te.size());
  }
  EXPECT_EQ(num::checksum(all), s0);
  EXPECT_EQ(num::checksum(lm), l0);
  EXPECT_THROW(eval::train_probe(sys, 5, tr, te, o), EvalError);
}

TEST(ProbeStates, LayerZeroIsAdapterOutput) {
  const auto sys = untrained("kd4");
  const auto refs = eval::refs_of(eval_data().heldout, 4);
  const auto d = eval::probe_states(sys, refs, 0);
  const auto s = eval::adapter_outputs(sys, refs, true);
  ASSERT_EQ(d.states.size(), refs.size());
  for (std::size_t i = 0; i < refs.size(); ++i) {
    EXPECT_EQ(d.targets[i], refs[i]->transcript);
    EXPECT_EQ(d.states[i].rows(), refs[i]->transcript.size());
    EXPECT_EQ(d.states[i].storage(), s[i].storage());
  }
  EXPECT_THROW(eval::probe_states(untrained("kd1"), refs, 0), EvalError);
}

TEST(DistillEval, RegionsPerAdapter) {
  const auto refs = eval::refs_of(eval_data().heldout, 6);
  const auto cf = eval::distill_eval(untrained("kd4"), refs);
  ASSERT_TRUE(cf.input.has_value());
  EXPECT_FALSE(cf.response.has_value());
  EXPECT_GE(cf.input->top1_agreement, 0.0);
  EXPECT_LE(cf.input->top1_agreement, 1.0);
  EXPECT_GE(cf.input->mean_excess_kl, -1e-6);
  EXPECT_FALSE(eval::distill_eval(untrained("kd1"), refs).input.has_value());
}

TEST(Evaluate, ReportIsInRangeAndSerializes) {
  auto sys = untrained("kd5");
  eval::EvalOptions o;
  o.max_examples = 10;
  o.probe_layers = {0};
  o.probe_train = 30;
  o.probe = quick_probe();
  o.probe.steps = 10;
  const auto rep = eval::evaluate(sys, "kd5", eval_data().heldout, eval_data().train, o);
  EXPECT_EQ(rep.examples, 10u);
  EXPECT_EQ(rep.records.size(), 10u);
  EXPECT_NO_THROW(eval::check_ranges(rep));
  EXPECT_EQ(rep.wer_probe.count(0), 1u);
  const auto j = nlohmann::json::parse(eval::to_json(rep));
  EXPECT_EQ(j.at("preset"), "kd5");
  EXPECT_TRUE(j.contains("self_bleu"));
  const std::string csv = eval::examples_csv(rep);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 11);
}

TEST(CheckRanges, RejectsOutOfRange) {
  eval::EvalReport r;
  EXPECT_NO_THROW(eval::check_ranges(r));
  r.self_bleu = 101;
  EXPECT_THROW(eval::check_ranges(r), EvalError);
  r.self_bleu = 50;
  r.self_rougel = -0.1;
  EXPECT_THROW(eval::check_ranges(r), EvalError);
  r.self_rougel = 0.5;
  r.wer_prompted = -1;
  EXPECT_THROW(eval::check_ranges(r), EvalError);
  r.wer_prompted = 1.5;
  r.distill.input = eval::DistillMetrics{0.1, 1.2};
  EXPECT_THROW(eval::check_ranges(r), EvalError);
}
