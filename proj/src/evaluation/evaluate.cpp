#include "blspkd/evaluation/evaluate.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "blspkd/trainer/trainer.hpp"

namespace blspkd::eval {

using model::EmbeddingSequence;
using model::Modality;
using num::Segment;
using num::Tape;
using num::Tensor;
using num::Var;

namespace {

constexpr std::size_t kChunk = 64;

template <class F>
void for_chunks(std::size_t n, F&& f) {
  for (std::size_t b = 0; b < n; b += kChunk) f(b, std::min(n, b + kChunk));
}

bool is_cformer(const train::SpeechSystem& sys) { return sys.adapter->kind() == model::AdapterKind::cformer; }

Tensor<float> slice(const Tensor<float>& x, std::size_t begin, std::size_t end) {
  Tensor<float> out(end - begin, x.cols());
  std::copy(x.data() + begin * x.cols(), x.data() + end * x.cols(), out.data());
  return out;
}

}  // namespace

AsrRefs refs_of(const std::vector<data::AsrPair>& pairs, std::size_t limit) {
  AsrRefs out;
  const std::size_t n = limit ? std::min(limit, pairs.size()) : pairs.size();
  for (std::size_t i = 0; i < n; ++i) out.push_back(&pairs[i]);
  return out;
}

std::vector<TokenSequence> greedy_decode_embedded(const model::ToyLM<float>& lm, const model::LinearHook<float>* hook,
                                                  const std::vector<PrefixRows>& prefixes, std::size_t max_len) {
  std::vector<TokenSequence> out(prefixes.size());
  for_chunks(prefixes.size(), [&](std::size_t b0, std::size_t b1) {
    std::vector<std::size_t> live(b1 - b0);
    std::iota(live.begin(), live.end(), b0);
    for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
      Tape<float> tape(false);
      std::vector<Var<float>> pieces;
      std::vector<Modality> tags;
      std::vector<Segment> segs;
      for (std::size_t i : live) {
        const auto& p = prefixes[i];
        if (p.rows.rows() != p.tags.size()) throw EvalError("decode: prefix rows and tags differ");
        segs.push_back(Segment{tags.size(), p.tags.size() + out[i].size()});
        if (p.rows.rows()) pieces.push_back(tape.constant(p.rows));
        tags.insert(tags.end(), p.tags.begin(), p.tags.end());
        if (!out[i].empty()) {
          pieces.push_back(lm.embed_rows(tape, out[i]));
          tags.insert(tags.end(), out[i].size(), Modality::text);
        }
      }
      Var<float> rows = pieces.size() == 1 ? pieces[0] : num::concat_rows(std::span<const Var<float>>(pieces));
      EmbeddingSequence<float> seq(rows, std::move(tags), segs);
      const Tensor<float>& logits = lm.forward(tape, seq, hook).logits.value();
      std::vector<std::size_t> next;
      for (std::size_t k = 0; k < live.size(); ++k) {
        if (segs[k].length == 0) continue;
        const auto r = logits.row(segs[k].offset + segs[k].length - 1);
        const int tok = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
        if (tok == vocab::kEos) continue;
        out[live[k]].push_back(tok);
        next.push_back(live[k]);
      }
      live = std::move(next);
    }
  });
  return out;
}

std::vector<Tensor<float>> adapter_outputs(const train::SpeechSystem& sys, const AsrRefs& pairs, bool counted) {
  std::vector<Tensor<float>> out;
  for_chunks(pairs.size(), [&](std::size_t b0, std::size_t b1) {
    std::size_t frames = 0;
    const std::size_t feat = pairs[b0]->features.cols();
    std::vector<Segment> segs;
    std::vector<std::size_t> counts;
    for (std::size_t i = b0; i < b1; ++i) {
      segs.push_back(Segment{frames, pairs[i]->features.rows()});
      frames += pairs[i]->features.rows();
      counts.push_back(pairs[i]->transcript.size());
    }
    Tensor<float> packed(frames, feat);
    for (std::size_t i = b0; i < b1; ++i) {
      const auto& f = pairs[i]->features;
      if (f.cols() != feat) throw num::DimensionError("adapter_outputs: mixed feature widths");
      std::copy(f.data(), f.data() + f.size(), packed.data() + segs[i - b0].offset * feat);
    }
    Tape<float> tape(false);
    Var<float> s_enc = sys.encoder.encode(tape, tape.constant(packed), segs);
    auto res = sys.adapter->forward(tape, s_enc, segs,
                                    counted ? std::span<const std::size_t>(counts) : std::span<const std::size_t>());
    const Tensor<float>& s = res.s_adp.value();
    for (const auto& sg : res.segments) out.push_back(slice(s, sg.offset, sg.offset + sg.length));
  });
  return out;
}

std::vector<PrefixRows> speech_prompts(const train::SpeechSystem& sys, const std::vector<Tensor<float>>& s_adp,
                                       int marker) {
  const Tensor<float>& E = sys.lm.embedding().value;
  const std::size_t d = E.cols();
  std::vector<PrefixRows> out;
  for (const auto& s : s_adp) {
    if (s.rows() && s.cols() != d) throw num::DimensionError("speech_prompts: adapter width differs from LM width");
    PrefixRows p;
    p.rows = Tensor<float>(s.rows() + 3, d);
    auto put = [&](std::size_t r, int id) { std::copy(E.row(id).begin(), E.row(id).end(), p.rows.row(r).begin()); };
    put(0, vocab::kBos);
    put(1, marker);
    std::copy(s.data(), s.data() + s.size(), p.rows.data() + 2 * d);
    put(s.rows() + 2, vocab::kEndOfInput);
    p.tags.assign(s.rows() + 3, Modality::speech);
    p.tags[0] = p.tags[1] = p.tags.back() = Modality::text;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<TokenSequence> prompted_asr(const train::SpeechSystem& sys, const AsrRefs& pairs) {
  return greedy_decode_embedded(sys.lm, sys.hook(), speech_prompts(sys, adapter_outputs(sys, pairs), vocab::kRepeat),
                                kRepeatMaxLen);
}

TokenSequence prompted_asr(const train::SpeechSystem& sys, const data::AsrPair& pair) {
  return prompted_asr(sys, AsrRefs{&pair})[0];
}

SelfOutputs self_outputs(const train::SpeechSystem& sys, const AsrRefs& pairs) {
  SelfOutputs o;
  o.speech = greedy_decode_embedded(sys.lm, sys.hook(),
                                    speech_prompts(sys, adapter_outputs(sys, pairs), vocab::kContinue),
                                    kContinuationMaxLen);
  std::vector<TokenSequence> prompts;
  for (const auto* p : pairs) prompts.push_back(model::continuation_prompt(p->transcript, vocab::kContinue));
  o.text = model::greedy_decode(sys.lm, prompts, kContinuationMaxLen);
  return o;
}

DistillEval distill_eval(const train::SpeechSystem& sys, const AsrRefs& pairs, const std::vector<data::CwTuple>* cw) {
  DistillEval out;
  const train::TrainConfig plain;
  auto score = [&](const std::vector<train::ExampleRef>& refs, bool response) {
    DistillAccumulator acc;
    for_chunks(refs.size(), [&](std::size_t b0, std::size_t b1) {
      std::vector<train::ExampleRef> chunk(refs.begin() + static_cast<std::ptrdiff_t>(b0),
                                           refs.begin() + static_cast<std::ptrdiff_t>(b1));
      const train::Batch batch = train::assemble_batch(chunk, plain);
      Tape<float> tape(false);
      const auto pass = train::run_passes(sys, batch, tape, train::FireMode::target_count);
      const Tensor<float> lp = num::log_softmax(pass.student_logits).value();
      const auto& region = response ? pass.response : pass.input;
      for (std::size_t k = 0; k < region.student.size(); ++k) {
        acc.add(pass.teacher_probs.row(region.teacher[k]), lp.row(region.student[k]));
      }
    });
    return acc.result();
  };
  if (is_cformer(sys) && !pairs.empty()) {
    std::vector<train::ExampleRef> refs;
    for (const auto* p : pairs) refs.push_back(train::ExampleRef{p, nullptr});
    out.input = score(refs, false);
  }
  if (cw != nullptr && !cw->empty()) {
    std::vector<train::ExampleRef> refs;
    for (const auto& t : *cw) refs.push_back(train::ExampleRef{&t.pair, &t});
    out.response = score(refs, true);
  }
  return out;
}

ProbeData probe_states(const train::SpeechSystem& sys, const AsrRefs& pairs, std::size_t layer) {
  if (layer > sys.lm.config().layers) {
    throw EvalError("probe: layer " + std::to_string(layer) + " out of range 0.." +
                    std::to_string(sys.lm.config().layers));
  }
  if (!is_cformer(sys)) throw EvalError("probe: needs a token-aligned (cformer) adapter");
  ProbeData data;
  const auto s_adp = adapter_outputs(sys, pairs, true);
  const Tensor<float>& E = sys.lm.embedding().value;
  const std::size_t d = E.cols();
  for_chunks(pairs.size(), [&](std::size_t b0, std::size_t b1) {
    std::size_t rows = 0;
    std::vector<Segment> segs;
    for (std::size_t i = b0; i < b1; ++i) {
      segs.push_back(Segment{rows, s_adp[i].rows() + 1});
      rows += s_adp[i].rows() + 1;
    }
    Tensor<float> packed(rows, d);
    std::vector<Modality> tags(rows, Modality::speech);
    for (std::size_t i = b0; i < b1; ++i) {
      const Segment& sg = segs[i - b0];
      std::copy(E.row(vocab::kBos).begin(), E.row(vocab::kBos).end(), packed.row(sg.offset).begin());
      tags[sg.offset] = Modality::text;
      std::copy(s_adp[i].data(), s_adp[i].data() + s_adp[i].size(), packed.data() + (sg.offset + 1) * d);
    }
    Tape<float> tape(false);
    EmbeddingSequence<float> seq(tape.constant(packed), std::move(tags), segs);
    const auto res = sys.lm.forward(tape, seq, sys.hook(), true);
    const Tensor<float>& h = res.hidden.at(layer).value();
    for (std::size_t i = b0; i < b1; ++i) {
      const Segment& sg = segs[i - b0];
      data.states.push_back(slice(h, sg.offset + 1, sg.offset + sg.length));
      data.targets.push_back(pairs[i]->transcript);
    }
  });
  return data;
}

namespace {

std::uint64_t system_checksum(train::SpeechSystem& sys) {
  auto params = sys.lm_parameters();
  for (auto* p : sys.student_parameters()) params.push_back(p);
  return num::checksum(params);
}

}  // namespace

ProbeResult train_probe(train::SpeechSystem& sys, std::size_t layer, const AsrRefs& train_pairs,
                        const AsrRefs& test_pairs, const ProbeOptions& opt) {
  ProbeResult r;
  r.layer = layer;
  r.checksum_before = system_checksum(sys);
  const ProbeData tr = probe_states(sys, train_pairs, layer);
  const ProbeData te = probe_states(sys, test_pairs, layer);
  ProbeFit fit = fit_probe(tr, sys.lm.config().vocab, opt);
  r.wer = probe_wer(fit.model, te);
  r.final_loss = fit.final_loss;
  r.train_examples = tr.states.size();
  r.test_examples = te.states.size();
  r.checksum_after = system_checksum(sys);
  return r;
}

EvalReport evaluate(train::SpeechSystem& sys, const std::string& preset, const std::vector<data::AsrPair>& heldout,
                    const std::vector<data::AsrPair>& probe_train, const EvalOptions& opt) {
  if (heldout.empty()) throw EvalError("evaluate: empty evaluation set");
  EvalReport rep;
  rep.preset = preset;
  const std::vector<data::AsrPair> subset(heldout.begin(),
                                          heldout.begin() + static_cast<std::ptrdiff_t>(
                                                                std::min(opt.max_examples, heldout.size())));
  const AsrRefs refs = refs_of(subset);
  rep.examples = refs.size();

  const auto s_adp = adapter_outputs(sys, refs);
  const auto prompted = greedy_decode_embedded(sys.lm, sys.hook(), speech_prompts(sys, s_adp, vocab::kRepeat),
                                               kRepeatMaxLen);
  const SelfOutputs self = self_outputs(sys, refs);
  std::vector<TokenSequence> ref_tokens;
  for (const auto* p : refs) ref_tokens.push_back(p->transcript);
  rep.wer_prompted = corpus_wer(prompted, ref_tokens);
  const SelfMetrics sm = self_metrics(self.speech, self.text);
  rep.self_bleu = sm.self_bleu;
  rep.self_rougel = sm.self_rougel;

  // Response targets = the teacher's own continuations (as in CW data).
  std::vector<data::CwTuple> cw;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    if (self.text[i].empty()) continue;
    cw.push_back(data::CwTuple{subset[i], vocab::kContinue, self.text[i]});
  }
  rep.distill = distill_eval(sys, refs, &cw);

  if (is_cformer(sys) && !opt.probe_layers.empty()) {
    const AsrRefs ptrain = refs_of(probe_train, opt.probe_train);
    for (std::size_t layer : opt.probe_layers) rep.wer_probe[layer] = train_probe(sys, layer, ptrain, refs, opt.probe).wer;
  }

  for (std::size_t i = 0; i < refs.size(); ++i) {
    ExampleRecord e;
    e.index = i;
    e.seed = refs[i]->seed;
    e.ref = refs[i]->transcript;
    e.prompted = prompted[i];
    e.speech_output = self.speech[i];
    e.text_output = self.text[i];
    e.wer_prompted = wer(e.prompted, e.ref);
    e.fired = s_adp[i].rows();
    rep.records.push_back(std::move(e));
  }
  check_ranges(rep);
  return rep;
}

void check_ranges(const EvalReport& r) {
  auto in = [](double v, double lo, double hi, const char* what) {
    if (!(v >= lo && v <= hi)) throw EvalError(std::string("metric out of range: ") + what + " = " + std::to_string(v));
  };
  in(r.self_bleu, 0.0, 100.0, "self_bleu");
  in(r.self_rougel, 0.0, 1.0, "self_rougel");
  in(r.wer_prompted, 0.0, 1e300, "wer_prompted");
  for (const auto& [layer, w] : r.wer_probe) in(w, 0.0, 1e300, "wer_probe");
  for (const auto* m : {&r.distill.input, &r.distill.response}) {
    if (!*m) continue;
    in((*m)->top1_agreement, 0.0, 1.0, "top1_agreement");
    in((*m)->mean_excess_kl, -1e-6, 1e300, "mean_excess_kl");
  }
}

std::string tokens_str(const TokenSequence& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(s[i]);
  }
  return out;
}

std::string to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["preset"] = r.preset;
  j["examples"] = r.examples;
  j["self_bleu"] = r.self_bleu;
  j["self_rougel"] = r.self_rougel;
  j["wer_prompted"] = r.wer_prompted;
  nlohmann::ordered_json probe = nlohmann::ordered_json::object();
  for (const auto& [layer, w] : r.wer_probe) probe[std::to_string(layer)] = w;
  j["wer_probe"] = probe;
  // Headline distillation numbers: input region when aligned, else response.
  const auto& head = r.distill.input ? r.distill.input : r.distill.response;
  j["mean_excess_kl"] = head ? nlohmann::ordered_json(head->mean_excess_kl) : nlohmann::ordered_json();
  j["top1_agreement"] = head ? nlohmann::ordered_json(head->top1_agreement) : nlohmann::ordered_json();
  auto region = [](const std::optional<DistillMetrics>& m) {
    if (!m) return nlohmann::ordered_json();
    nlohmann::ordered_json o;
    o["mean_excess_kl"] = m->mean_excess_kl;
    o["top1_agreement"] = m->top1_agreement;
    o["positions"] = m->positions;
    return o;
  };
  j["input_region"] = region(r.distill.input);
  j["response_region"] = region(r.distill.response);
  return j.dump(2) + "\n";
}

std::string examples_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "index,seed,fired,wer_prompted,ref,prompted,speech_output,text_output\n";
  for (const auto& e : r.records) {
    os << e.index << ',' << e.seed << ',' << e.fired << ',' << nlohmann::json(e.wer_prompted).dump() << ','
       << tokens_str(e.ref) << ',' << tokens_str(e.prompted) << ',' << tokens_str(e.speech_output) << ','
       << tokens_str(e.text_output) << '\n';
  }
  return os.str();
}

}  // namespace blspkd::eval
