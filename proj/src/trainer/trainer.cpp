#include "blspkd/trainer/trainer.hpp"

#include <chrono>
#include <cmath>

#include <json.hpp>

namespace blspkd::train {

using loss::Term;
using model::EmbeddingSequence;
using model::Modality;

Batch assemble_batch(const std::vector<ExampleRef>& examples, const TrainConfig& cfg) {
  const bool needs_y = cfg.has(Term::resp_kl) || cfg.has(Term::resp_ce);
  Batch b;
  std::size_t frames = 0, feat = 0;
  for (const auto& e : examples) {
    if (e.pair == nullptr) throw ConfigError("assemble_batch: example without an ASR pair");
    frames += e.pair->features.rows();
    feat = e.pair->features.cols();
  }
  if (needs_y && !cfg.data.asr) {
    for (const auto& e : examples) {
      if (e.cw == nullptr) throw ConfigError("assemble_batch: response loss requested but example lacks y");
    }
  }
  b.frames = Tensor<float>(frames, feat);
  std::size_t frow = 0;
  for (const auto& e : examples) {
    ExampleLayout L;
    L.cw = e.cw != nullptr;
    L.x = e.pair->transcript;
    if (L.cw) {
      L.prompt = e.cw->prompt;
      L.y = e.cw->continuation;
    }
    L.frames = e.pair->features.rows();
    const std::size_t t0 = b.teacher_ids.size();
    b.teacher_ids.push_back(vocab::kBos);
    if (L.cw) b.teacher_ids.push_back(L.prompt);
    b.teacher_ids.insert(b.teacher_ids.end(), L.x.begin(), L.x.end());
    if (L.cw) {
      b.teacher_ids.push_back(vocab::kEndOfInput);
      b.teacher_ids.insert(b.teacher_ids.end(), L.y.begin(), L.y.end());
    }
    L.teacher = Segment{t0, b.teacher_ids.size() - t0};
    L.frame_seg = Segment{frow, L.frames};
    const auto& src = e.pair->features;
    if (src.cols() != feat) throw num::DimensionError("assemble_batch: mixed feature widths");
    std::copy(src.data(), src.data() + src.size(), b.frames.data() + frow * feat);
    frow += L.frames;
    b.teacher_segments.push_back(L.teacher);
    b.frame_segments.push_back(L.frame_seg);
    b.counts.push_back(L.x.size());
    b.examples.push_back(std::move(L));
  }
  return b;
}

PassResult run_passes(const SpeechSystem& sys, const Batch& batch, Tape<float>& tape, FireMode mode,
                      bool with_teacher) {
  PassResult r;
  if (with_teacher) {
    Tape<float> tt(false);
    EmbeddingSequence<float> seq(sys.lm.embed_rows(tt, batch.teacher_ids),
                                 std::vector<Modality>(batch.teacher_ids.size(), Modality::text),
                                 batch.teacher_segments);
    r.teacher_probs = num::softmax(sys.lm.forward(tt, seq).logits).value();
  }

  Var<float> frames = tape.constant(batch.frames);
  Var<float> s_enc = sys.encoder.encode(tape, frames, batch.frame_segments);
  const bool counted = mode == FireMode::target_count;
  r.adapter = sys.adapter->forward(tape, s_enc, batch.frame_segments,
                                   counted ? std::span<const std::size_t>(batch.counts)
                                           : std::span<const std::size_t>());
  r.s_adp = r.adapter.s_adp;
  const bool cformer = sys.adapter->kind() == model::AdapterKind::cformer;

  std::vector<Var<float>> pieces;
  std::vector<Modality> tags;
  std::size_t row = 0;
  for (std::size_t e = 0; e < batch.examples.size(); ++e) {
    const ExampleLayout& L = batch.examples[e];
    const Segment sa = r.adapter.segments[e];
    std::vector<int> prefix{vocab::kBos};
    if (L.cw) prefix.push_back(L.prompt);
    std::vector<int> suffix;
    if (L.cw) {
      suffix.push_back(vocab::kEndOfInput);
      suffix.insert(suffix.end(), L.y.begin(), L.y.end());
    }
    const std::size_t start = row;
    pieces.push_back(sys.lm.embed_rows(tape, prefix));
    tags.insert(tags.end(), prefix.size(), Modality::text);
    if (sa.length > 0) {
      pieces.push_back(num::slice_rows(r.s_adp, sa.offset, sa.offset + sa.length));
      tags.insert(tags.end(), sa.length, Modality::speech);
    }
    if (!suffix.empty()) {
      pieces.push_back(sys.lm.embed_rows(tape, suffix));
      tags.insert(tags.end(), suffix.size(), Modality::text);
    }
    const std::size_t len = prefix.size() + sa.length + suffix.size();
    r.student_segments.push_back(Segment{start, len});
    row += len;

    // Position k of the input region predicts x_{k+1}.
    const std::size_t base = prefix.size() - 1;
    if (cformer && sa.length == L.x.size()) {
      for (std::size_t k = 0; k < L.x.size(); ++k) {
        r.input.teacher.push_back(L.teacher.offset + base + k);
        r.input.student.push_back(start + base + k);
        r.input.example.push_back(e);
      }
    }
    if (L.cw) {
      const std::size_t t_eoi = L.teacher.offset + prefix.size() + L.x.size();
      const std::size_t s_eoi = start + prefix.size() + sa.length;
      for (std::size_t j = 0; j < L.y.size(); ++j) {
        r.response.teacher.push_back(t_eoi + j);
        r.response.student.push_back(s_eoi + j);
        r.response.example.push_back(e);
      }
    }
  }
  Var<float> rows = pieces.size() == 1 ? pieces[0] : num::concat_rows(std::span<const Var<float>>(pieces));
  EmbeddingSequence<float> seq(rows, std::move(tags), r.student_segments);
  r.student_logits = sys.lm.forward(tape, seq, sys.hook()).logits;
  return r;
}

namespace {

// Teacher rows gathered onto the student rows of a region; other rows zero.
Tensor<float> region_targets(const PassResult& pass, const RegionRows& region, double* entropy) {
  const std::size_t V = pass.teacher_probs.cols();
  Tensor<float> t(pass.student_logits.rows(), V);
  double h = 0.0;
  for (std::size_t k = 0; k < region.student.size(); ++k) {
    const auto src = pass.teacher_probs.row(region.teacher[k]);
    auto dst = t.row(region.student[k]);
    for (std::size_t v = 0; v < V; ++v) {
      dst[v] = src[v];
      if (src[v] > 0.0f) h -= static_cast<double>(src[v]) * std::log(static_cast<double>(src[v]));
    }
  }
  *entropy = h;
  return t;
}

}  // namespace

loss::LossBundle<float> build_losses(const SpeechSystem& sys, const Batch& batch, const PassResult& pass,
                                     const TrainConfig& cfg, StepStats* stats) {
  loss::LossBundle<float> bundle;
  bundle.weights = cfg.weights;
  const std::size_t B = batch.examples.size();
  const float w = 1.0f / static_cast<float>(B);
  double kl_excess = 0.0;
  std::size_t kl_positions = 0;

  auto distill = [&](Term t, const RegionRows& region) {
    if (!cfg.has(t) || region.student.empty()) return;
    double h = 0.0;
    Tensor<float> target = region_targets(pass, region, &h);
    Var<float> l = num::scale(loss::soft_ce(pass.student_logits, target), w);
    bundle.set(t, l);
    kl_excess += static_cast<double>(l.value().item()) * static_cast<double>(B) - h;
    kl_positions += region.student.size();
  };
  distill(Term::input_kl, pass.input);
  distill(Term::resp_kl, pass.response);

  if (cfg.has(Term::resp_ce) && !pass.response.student.empty()) {
    std::vector<int> targets(pass.student_logits.rows(), -1);
    for (std::size_t k = 0; k < pass.response.student.size(); ++k) {
      const auto& L = batch.examples[pass.response.example[k]];
      const std::size_t j = pass.response.teacher[k] -
                            (L.teacher.offset + 2 + L.x.size());  // index into y
      targets[pass.response.student[k]] = L.y[j];
    }
    bundle.set(Term::resp_ce, num::scale(loss::resp_ce(pass.student_logits, std::span<const int>(targets)), w));
  }
  if (cfg.has(Term::cif) && !pass.adapter.alpha_raw.empty()) {
    Var<float> acc;
    for (std::size_t e = 0; e < B; ++e) {
      Var<float> l = loss::cif_loss(pass.adapter.alpha_raw[e], batch.counts[e]);
      acc = acc.valid() ? num::add(acc, l) : l;
    }
    bundle.set(Term::cif, num::scale(acc, w));
  }
  if (cfg.has(Term::asr)) {
    if (!sys.asr_head) throw ConfigError("asr loss requested but the system has no ASR head");
    Var<float> acc;
    for (std::size_t e = 0; e < B; ++e) {
      const Segment sa = pass.adapter.segments[e];
      Var<float> s = num::slice_rows(pass.s_adp, sa.offset, sa.offset + sa.length);
      Var<float> l = loss::asr_loss(s, std::span<const int>(batch.examples[e].x), *sys.asr_head);
      acc = acc.valid() ? num::add(acc, l) : l;
    }
    bundle.set(Term::asr, num::scale(acc, w));
  }
  if (stats != nullptr) {
    stats->values = loss::values_of(bundle);
    stats->kl_positions = kl_positions;
    stats->excess_kl = kl_positions ? kl_excess / static_cast<double>(kl_positions) : 0.0;
  }
  return bundle;
}

Trainer::Trainer(SpeechSystem& sys, TrainConfig cfg) : sys_(sys), cfg_(std::move(cfg)) {
  validate(cfg_);
  params_ = sys_.student_parameters();
}

StepStats Trainer::compute_gradients(const Batch& batch) {
  // A diverged parameter would otherwise surface as an arbitrary contract
  // failure deep in the forward pass.
  for (const auto* p : params_) {
    for (float v : p->value.storage()) {
      if (!std::isfinite(v)) {
        throw model::TrainingError("non-finite parameter " + p->name + " at step " + std::to_string(step_));
      }
    }
  }
  for (auto* p : params_) p->zero_grad();
  Tape<float> tape;
  PassResult pass = run_passes(sys_, batch, tape, FireMode::target_count);
  StepStats st;
  loss::LossBundle<float> bundle = build_losses(sys_, batch, pass, cfg_, &st);
  if (bundle.empty()) throw ConfigError("batch produced no loss terms for preset " + cfg_.preset);
  Var<float> total = loss::combine(bundle);
  st.total = static_cast<double>(total.value().item());
  if (!std::isfinite(st.total)) {
    std::string terms;
    for (Term t : loss::kAllTerms)
      if (auto v = st.values.get(t)) terms += std::string(" ") + loss::term_name(t) + "=" + std::to_string(*v);
    throw model::TrainingError("non-finite loss at step " + std::to_string(step_) + ":" + terms);
  }
  tape.backward(total);
  return st;
}

StepStats Trainer::step(const Batch& batch) {
  StepStats st = compute_gradients(batch);
  const double lr = num::warmup_lr(cfg_.lr, step_, cfg_.warmup_steps());
  if (cfg_.optimizer == "sgd") {
    num::sgd_step(params_, lr);
  } else {
    adam_.step(params_, lr);
  }
  ++step_;
  return st;
}

std::vector<ExampleRef> sample_batch(const TrainData& data, const TrainConfig& cfg, std::size_t step) {
  const bool use_asr = cfg.data.asr, use_cw = cfg.data.cw;
  if (use_asr && (data.asr == nullptr || data.asr->empty())) throw ConfigError("training needs ASR data");
  if (use_cw && (data.cw == nullptr || data.cw->empty())) throw ConfigError("training needs CW data");
  num::Rng rng(num::derive_seed(cfg.seed, 1000003 + step));
  std::vector<ExampleRef> out;
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    const bool cw = use_cw && (!use_asr || b % 2 == 1);
    if (cw) {
      const auto& t = (*data.cw)[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(data.cw->size()) - 1))];
      out.push_back(ExampleRef{&t.pair, &t});
    } else {
      const auto& p = (*data.asr)[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(data.asr->size()) - 1))];
      out.push_back(ExampleRef{&p, nullptr});
    }
  }
  return out;
}

std::string log_line(const LogRecord& rec) {
  nlohmann::ordered_json j;
  j["step"] = rec.step;
  j["lr"] = rec.lr;
  j["total"] = rec.stats.total;
  for (Term t : loss::kAllTerms)
    if (auto v = rec.stats.values.get(t)) j[loss::term_name(t)] = *v;
  j["excess_kl"] = rec.stats.excess_kl;
  j["wall"] = rec.wall;
  return j.dump();
}

TrainReport run(SpeechSystem& sys, const TrainConfig& cfg, const TrainData& data,
                const std::function<void(const LogRecord&)>& on_log) {
  TrainReport rep;
  auto lm_params = sys.lm_parameters();
  auto enc_params = sys.encoder_parameters();
  rep.lm_checksum_before = num::checksum(lm_params);
  rep.encoder_checksum_before = num::checksum(enc_params);
  Trainer trainer(sys, cfg);
  const auto t0 = std::chrono::steady_clock::now();
  try {
    for (std::size_t s = 0; s < cfg.steps; ++s) {
      const Batch batch = assemble_batch(sample_batch(data, cfg, s), cfg);
      const double lr = num::warmup_lr(cfg.lr, s, cfg.warmup_steps());
      StepStats st = trainer.step(batch);
      if (cfg.log_every > 0 && (s % cfg.log_every == 0 || s + 1 == cfg.steps)) {
        LogRecord rec{s, st, lr,
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
        if (on_log) on_log(rec);
        rep.log.push_back(std::move(rec));
      }
      rep.steps = s + 1;
    }
  } catch (const model::TrainingError& e) {
    rep.aborted = true;
    rep.abort_reason = e.what();
  }
  rep.lm_checksum_after = num::checksum(lm_params);
  rep.encoder_checksum_after = num::checksum(enc_params);
  return rep;
}

}  // namespace blspkd::train
