#include "blspkd/evaluation/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>

namespace blspkd::eval {

namespace {
constexpr double kFloor = 1e-12;  // same floor as the distillation losses
}

std::size_t edit_distance(const TokenSequence& a, const TokenSequence& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double wer(const TokenSequence& hyp, const TokenSequence& ref) {
  if (ref.empty()) throw EvalError("wer: empty reference");
  return static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(ref.size());
}

double corpus_wer(const std::vector<TokenSequence>& hyps, const std::vector<TokenSequence>& refs) {
  if (hyps.size() != refs.size()) throw EvalError("corpus_wer: hypothesis/reference count mismatch");
  std::size_t edits = 0, total = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].empty()) throw EvalError("corpus_wer: empty reference");
    edits += edit_distance(hyps[i], refs[i]);
    total += refs[i].size();
  }
  if (total == 0) throw EvalError("corpus_wer: empty reference set");
  return static_cast<double>(edits) / static_cast<double>(total);
}

namespace {

using NGram = std::vector<int>;

std::map<NGram, std::size_t> ngram_counts(const TokenSequence& s, std::size_t n) {
  std::map<NGram, std::size_t> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[NGram(s.begin() + i, s.begin() + i + n)];
  return out;
}

}  // namespace

double corpus_bleu(const std::vector<TokenSequence>& candidates, const std::vector<TokenSequence>& references) {
  if (references.empty()) throw EvalError("bleu: empty reference set");
  if (candidates.size() != references.size()) throw EvalError("bleu: candidate/reference count mismatch");
  constexpr std::size_t N = 4;
  std::array<double, N> match{}, total{};
  double c_len = 0.0, r_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    c_len += static_cast<double>(candidates[i].size());
    r_len += static_cast<double>(references[i].size());
    for (std::size_t n = 1; n <= N; ++n) {
      const auto c = ngram_counts(candidates[i], n);
      const auto r = ngram_counts(references[i], n);
      for (const auto& [g, k] : c) {
        total[n - 1] += static_cast<double>(k);
        const auto it = r.find(g);
        if (it != r.end()) match[n - 1] += static_cast<double>(std::min(k, it->second));
      }
    }
  }
  if (c_len == 0.0 || match[0] == 0.0) return 0.0;
  double log_p = std::log(match[0] / total[0]);
  for (std::size_t n = 2; n <= N; ++n) log_p += std::log((match[n - 1] + 1.0) / (total[n - 1] + 1.0));
  const double bp = c_len > r_len ? 1.0 : std::exp(1.0 - r_len / c_len);
  return 100.0 * bp * std::exp(log_p / static_cast<double>(N));
}

std::size_t lcs_length(const TokenSequence& a, const TokenSequence& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const TokenSequence& candidate, const TokenSequence& reference) {
  if (candidate.empty() && reference.empty()) return 1.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

SelfMetrics self_metrics(const std::vector<TokenSequence>& speech_outputs,
                         const std::vector<TokenSequence>& text_outputs) {
  if (text_outputs.empty()) throw EvalError("self_metrics: empty reference set");
  if (speech_outputs.size() != text_outputs.size()) throw EvalError("self_metrics: outputs are not paired");
  SelfMetrics m;
  m.self_bleu = corpus_bleu(speech_outputs, text_outputs);
  double acc = 0.0;
  for (std::size_t i = 0; i < text_outputs.size(); ++i) acc += rouge_l(speech_outputs[i], text_outputs[i]);
  m.self_rougel = acc / static_cast<double>(text_outputs.size());
  return m;
}

void DistillAccumulator::add(std::span<const double> teacher, std::span<const double> student_probs) {
  if (teacher.size() != student_probs.size()) throw EvalError("distill_metrics: row width mismatch");
  double kl = 0.0;
  for (std::size_t v = 0; v < teacher.size(); ++v) {
    if (teacher[v] > 0.0) kl += teacher[v] * (std::log(teacher[v]) - std::log(std::max(student_probs[v], kFloor)));
  }
  const auto ta = std::max_element(teacher.begin(), teacher.end()) - teacher.begin();
  const auto sa = std::max_element(student_probs.begin(), student_probs.end()) - student_probs.begin();
  kl_ += kl;
  agree_ += ta == sa ? 1 : 0;
  ++n_;
}

void DistillAccumulator::add(std::span<const float> teacher, std::span<const float> student_log_probs) {
  if (teacher.size() != student_log_probs.size()) throw EvalError("distill_metrics: row width mismatch");
  double kl = 0.0;
  for (std::size_t v = 0; v < teacher.size(); ++v) {
    const double p = teacher[v];
    if (p > 0.0) kl += p * (std::log(p) - std::max(static_cast<double>(student_log_probs[v]), std::log(kFloor)));
  }
  const auto ta = std::max_element(teacher.begin(), teacher.end()) - teacher.begin();
  const auto sa = std::max_element(student_log_probs.begin(), student_log_probs.end()) - student_log_probs.begin();
  kl_ += kl;
  agree_ += ta == sa ? 1 : 0;
  ++n_;
}

DistillMetrics DistillAccumulator::result() const {
  DistillMetrics m;
  m.positions = n_;
  if (n_ == 0) return m;
  m.mean_excess_kl = kl_ / static_cast<double>(n_);
  m.top1_agreement = static_cast<double>(agree_) / static_cast<double>(n_);
  return m;
}

DistillMetrics distill_metrics(const num::Tensor<double>& teacher, const num::Tensor<double>& student) {
  if (!teacher.same_shape(student)) throw EvalError("distill_metrics: shape mismatch");
  DistillAccumulator acc;
  for (std::size_t r = 0; r < teacher.rows(); ++r) acc.add(teacher.row(r), student.row(r));
  return acc.result();
}

}  // namespace blspkd::eval
