#include "blspkd/datagen/datagen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "blspkd/numerics/checkpoint.hpp"

namespace blspkd::data {

static_assert(std::endian::native == std::endian::little, "feature payloads assume a little-endian host");

namespace {

constexpr int kC = vocab::kContentCount;

int content_index(int id) {
  if (!vocab::is_content(id)) throw DatasetError("grammar: id " + std::to_string(id) + " is not a content token");
  return id - vocab::kFirstContent;
}

}  // namespace

SyntheticGrammar::SyntheticGrammar(GrammarConfig cfg) : cfg_(cfg) {
  if (cfg_.min_len < 1 || cfg_.max_len < cfg_.min_len) throw DatasetError("grammar: bad length range");
  if (cfg_.successors < 1 || cfg_.successors >= static_cast<std::size_t>(kC)) {
    throw DatasetError("grammar: successor count out of range");
  }
  num::Rng rng(cfg_.seed);
  // The ring successor b -> b+1 keeps the token graph strongly connected.
  succ_.resize(kC);
  for (int b = 0; b < kC; ++b) {
    auto& s = succ_[b];
    s.push_back((b + 1) % kC);
    while (s.size() < cfg_.successors) {
      const int c = static_cast<int>(rng.uniform_int(0, kC - 1));
      if (c == b || std::find(s.begin(), s.end(), c) != s.end()) continue;
      s.push_back(c);
    }
    std::sort(s.begin(), s.end());
  }
  std::vector<double> base(static_cast<std::size_t>(kC) * kC, 0.0);
  for (int b = 0; b < kC; ++b)
    for (int c : succ_[b]) base[b * kC + c] = 0.2 + rng.uniform();
  table_.resize(static_cast<std::size_t>(kC) * kC);
  for (int a = 0; a < kC; ++a) {
    for (int b = 0; b < kC; ++b) {
      Row& r = table_[a * kC + b];
      double z = 0.0;
      for (int c : succ_[b]) {
        const double w = base[b * kC + c] * std::exp(0.8 * rng.normal());
        r.next.push_back(c);
        r.prob.push_back(w);
        z += w;
      }
      for (auto& p : r.prob) p /= z;
    }
  }
  compute_stationary();
}

void SyntheticGrammar::compute_stationary() {
  // Power iteration on the pair chain (a, b) -> (b, c), started uniform over
  // the pairs the grammar can produce.
  const std::size_t P = static_cast<std::size_t>(kC) * kC;
  std::vector<double> pi(P, 0.0), next(P);
  std::size_t live = 0;
  for (int a = 0; a < kC; ++a)
    for (int b : succ_[a]) {
      pi[a * kC + b] = 1.0;
      ++live;
    }
  for (auto& v : pi) v /= static_cast<double>(live);
  for (int it = 0; it < 5000; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (int a = 0; a < kC; ++a) {
      for (int b : succ_[a]) {
        const double m = pi[a * kC + b];
        if (m == 0.0) continue;
        const Row& r = table_[a * kC + b];
        for (std::size_t k = 0; k < r.next.size(); ++k) next[b * kC + r.next[k]] += m * r.prob[k];
      }
    }
    double diff = 0.0;
    for (std::size_t i = 0; i < P; ++i) diff += std::abs(next[i] - pi[i]);
    // Damped step guards against periodic components.
    for (std::size_t i = 0; i < P; ++i) pi[i] = 0.5 * (pi[i] + next[i]);
    if (diff < 1e-13) break;
  }
  pair_stationary_ = pi;
  stationary_.assign(kC, 0.0);
  for (int a = 0; a < kC; ++a)
    for (int b = 0; b < kC; ++b) stationary_[b] += pi[a * kC + b];
}

const SyntheticGrammar::Row& SyntheticGrammar::row(int a, int b) const {
  return table_[content_index(a) * kC + content_index(b)];
}

double SyntheticGrammar::transition(int a, int b, int c) const {
  const Row& r = row(a, b);
  const int ci = content_index(c);
  for (std::size_t k = 0; k < r.next.size(); ++k)
    if (r.next[k] == ci) return r.prob[k];
  return 0.0;
}

int SyntheticGrammar::draw(const Row& r, num::Rng& rng) const {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t k = 0; k < r.next.size(); ++k) {
    acc += r.prob[k];
    if (u < acc) return r.next[k] + vocab::kFirstContent;
  }
  return r.next.back() + vocab::kFirstContent;
}

TokenSequence SyntheticGrammar::sample(num::Rng& rng) const {
  const auto len = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(cfg_.min_len), static_cast<std::int64_t>(cfg_.max_len)));
  return sample(rng, len);
}

TokenSequence SyntheticGrammar::sample(num::Rng& rng, std::size_t length) const {
  TokenSequence x;
  if (length == 0) return x;
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t pick = pair_stationary_.size() - 1;
  for (std::size_t i = 0; i < pair_stationary_.size(); ++i) {
    acc += pair_stationary_[i];
    if (u < acc && pair_stationary_[i] > 0.0) {
      pick = i;
      break;
    }
  }
  while (pair_stationary_[pick] == 0.0) --pick;
  x.push_back(static_cast<int>(pick / kC) + vocab::kFirstContent);
  if (length == 1) return x;
  x.push_back(static_cast<int>(pick % kC) + vocab::kFirstContent);
  while (x.size() < length) x.push_back(draw(row(x[x.size() - 2], x.back()), rng));
  return x;
}

TokenSequence SyntheticGrammar::continue_from(const TokenSequence& context, std::size_t n,
                                              num::Rng& rng) const {
  if (context.size() < 2) throw DatasetError("continue_from: need at least two context tokens");
  TokenSequence all(context.end() - 2, context.end());
  for (std::size_t i = 0; i < n; ++i) all.push_back(draw(row(all[all.size() - 2], all.back()), rng));
  return TokenSequence(all.begin() + 2, all.end());
}

Tensor<float> speech_prototypes(const SpeechConfig& cfg) {
  num::Rng rng(cfg.voice_seed);
  return rng.normal_tensor<float>(vocab::kSize, cfg.feat_dim, 1.0);
}

FeatureSequence synth_speech(const TokenSequence& x, std::uint64_t seed, const SpeechConfig& cfg) {
  const Tensor<float> proto = speech_prototypes(cfg);
  num::Rng rng(seed);
  FeatureSequence out;
  std::size_t total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const int k = cfg.forced_frames > 0 ? cfg.forced_frames
                                        : static_cast<int>(rng.uniform_int(cfg.min_frames, cfg.max_frames));
    out.frames_per_token.push_back(k);
    total += static_cast<std::size_t>(k);
  }
  out.frames = Tensor<float>(total, cfg.feat_dim);
  std::size_t r = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] < 0 || x[i] >= vocab::kSize) throw DatasetError("synth_speech: id out of range");
    for (int f = 0; f < out.frames_per_token[i]; ++f, ++r) {
      for (std::size_t c = 0; c < cfg.feat_dim; ++c) {
        out.frames(r, c) =
            proto(static_cast<std::size_t>(x[i]), c) + static_cast<float>(cfg.noise * rng.normal());
      }
    }
  }
  return out;
}

const char* split_name(Split s) { return s == Split::train ? "train" : "heldout"; }

Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "heldout") return Split::heldout;
  throw DatasetError("unknown split tag '" + s + "'");
}

Split split_of(const TokenSequence& x, unsigned heldout_percent) {
  std::string bytes(reinterpret_cast<const char*>(x.data()), x.size() * sizeof(int));
  return num::fnv1a(bytes) % 100 < heldout_percent ? Split::heldout : Split::train;
}

std::vector<AsrPair> build_asr_set(std::size_t count, std::uint64_t seed, const SyntheticGrammar& g,
                                   const SpeechConfig& speech) {
  std::vector<AsrPair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t s = num::derive_seed(seed, i);
    num::Rng rng(s);
    AsrPair p;
    p.transcript = g.sample(rng);
    FeatureSequence f = synth_speech(p.transcript, num::derive_seed(s, 1), speech);
    p.features = std::move(f.frames);
    p.frames_per_token = std::move(f.frames_per_token);
    p.seed = s;
    p.split = split_of(p.transcript);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<CwTuple> build_cw_set(const std::vector<AsrPair>& asr, const model::ToyLM<float>& teacher,
                                  std::size_t max_len) {
  std::vector<CwTuple> out;
  out.reserve(asr.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t b = 0; b < asr.size(); b += kChunk) {
    std::vector<TokenSequence> prompts;
    for (std::size_t i = b; i < std::min(asr.size(), b + kChunk); ++i) {
      prompts.push_back(model::continuation_prompt(asr[i].transcript, vocab::kContinue));
    }
    auto ys = model::greedy_decode(teacher, prompts, max_len);
    for (std::size_t k = 0; k < ys.size(); ++k) {
      out.push_back(CwTuple{asr[b + k], vocab::kContinue, std::move(ys[k])});
    }
  }
  return out;
}

template <class E>
std::vector<E> select(const std::vector<E>& set, Split split) {
  std::vector<E> out;
  for (const auto& e : set) {
    if constexpr (std::is_same_v<E, CwTuple>) {
      if (e.pair.split == split) out.push_back(e);
    } else {
      if (e.split == split) out.push_back(e);
    }
  }
  return out;
}
template std::vector<AsrPair> select(const std::vector<AsrPair>&, Split);
template std::vector<CwTuple> select(const std::vector<CwTuple>&, Split);

std::vector<model::LabelledFrames> frame_labels(const std::vector<AsrPair>& pairs) {
  std::vector<model::LabelledFrames> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    model::LabelledFrames l;
    l.frames = &p.features;
    for (std::size_t j = 0; j < p.transcript.size(); ++j) l.frame_tokens.insert(l.frame_tokens.end(), p.frames_per_token[j], p.transcript[j]);
    out.push_back(std::move(l));
  }
  return out;
}

std::vector<TokenSequence> build_teacher_corpus(std::size_t count, std::uint64_t seed,
                                                const SyntheticGrammar& g) {
  std::vector<TokenSequence> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    num::Rng rng(num::derive_seed(seed, i));
    const TokenSequence x = g.sample(rng);
    TokenSequence s{vocab::kBos};
    switch (i % 3) {
      case 0:
        s.insert(s.end(), x.begin(), x.end());
        break;
      case 1: {
        s.push_back(vocab::kContinue);
        s.insert(s.end(), x.begin(), x.end());
        s.push_back(vocab::kEndOfInput);
        const auto n = static_cast<std::size_t>(rng.uniform_int(4, 16));
        const TokenSequence y = g.continue_from(x, n, rng);
        s.insert(s.end(), y.begin(), y.end());
        break;
      }
      default:
        s.push_back(vocab::kRepeat);
        s.insert(s.end(), x.begin(), x.end());
        s.push_back(vocab::kEndOfInput);
        s.insert(s.end(), x.begin(), x.end());
        break;
    }
    s.push_back(vocab::kEos);
    out.push_back(std::move(s));
  }
  return out;
}

void write_corpus(const std::string& path, const std::vector<TokenSequence>& corpus) {
  std::ostringstream os;
  for (const auto& s : corpus) {
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? " " : "") << s[i];
    os << '\n';
  }
  num::write_file(path, os.str());
}

std::vector<TokenSequence> read_corpus(const std::string& path) {
  std::istringstream is(num::read_file(path));
  std::vector<TokenSequence> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    TokenSequence s;
    std::string tok;
    while (ls >> tok) {
      try {
        std::size_t used = 0;
        const int id = std::stoi(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        s.push_back(id);
      } catch (const std::exception&) {
        throw DatasetError(path + ":" + std::to_string(lineno) + ": bad token '" + tok + "'");
      }
    }
    if (!s.empty()) out.push_back(std::move(s));
  }
  return out;
}

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::uint8_t* data, std::size_t size) {
  std::string out;
  out.reserve((size + 2) / 3 * 4);
  for (std::size_t i = 0; i < size; i += 3) {
    std::uint32_t v = static_cast<std::uint32_t>(data[i]) << 16;
    if (i + 1 < size) v |= static_cast<std::uint32_t>(data[i + 1]) << 8;
    if (i + 2 < size) v |= data[i + 2];
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(i + 1 < size ? kB64[(v >> 6) & 63] : '=');
    out.push_back(i + 2 < size ? kB64[v & 63] : '=');
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw DatasetError("base64: length not a multiple of 4");
  auto val = [](char ch) -> int {
    if (ch >= 'A' && ch <= 'Z') return ch - 'A';
    if (ch >= 'a' && ch <= 'z') return ch - 'a' + 26;
    if (ch >= '0' && ch <= '9') return ch - '0' + 52;
    if (ch == '+') return 62;
    if (ch == '/') return 63;
    throw DatasetError(std::string("base64: invalid character '") + ch + "'");
  };
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    const bool p2 = text[i + 2] == '=', p3 = text[i + 3] == '=';
    if ((p2 && !p3) || ((p2 || p3) && i + 4 != text.size())) throw DatasetError("base64: misplaced padding");
    std::uint32_t v = static_cast<std::uint32_t>(val(text[i])) << 18 |
                      static_cast<std::uint32_t>(val(text[i + 1])) << 12;
    if (!p2) v |= static_cast<std::uint32_t>(val(text[i + 2])) << 6;
    if (!p3) v |= static_cast<std::uint32_t>(val(text[i + 3]));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    if (!p2) out.push_back(static_cast<std::uint8_t>(v >> 8));
    if (!p3) out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

namespace {

using nlohmann::json;

json pair_json(const AsrPair& p) {
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(p.features.data());
  return json{{"transcript", p.transcript},
              {"frames", p.features.rows()},
              {"feat_dim", p.features.cols()},
              {"features", base64_encode(bytes, p.features.size() * sizeof(float))},
              {"frames_per_token", p.frames_per_token},
              {"seed", p.seed},
              {"split", split_name(p.split)}};
}

AsrPair pair_from_json(const json& j) {
  AsrPair p;
  p.transcript = j.at("transcript").get<TokenSequence>();
  const auto rows = j.at("frames").get<std::size_t>();
  const auto cols = j.at("feat_dim").get<std::size_t>();
  const auto bytes = base64_decode(j.at("features").get<std::string>());
  if (bytes.size() != rows * cols * sizeof(float)) throw DatasetError("feature payload size mismatch");
  p.features = Tensor<float>(rows, cols);
  if (!bytes.empty()) std::memcpy(p.features.data(), bytes.data(), bytes.size());
  p.frames_per_token = j.at("frames_per_token").get<std::vector<int>>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.split = split_from_name(j.at("split").get<std::string>());
  return p;
}

template <class F>
void for_each_line(const std::string& path, F&& f) {
  std::istringstream is(num::read_file(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      f(json::parse(line));
    } catch (const json::exception& e) {
      throw DatasetError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

}  // namespace

void write_asr_set(const std::string& path, const std::vector<AsrPair>& set) {
  std::string out;
  for (const auto& p : set) out += pair_json(p).dump() + "\n";
  num::write_file(path, out);
}

std::vector<AsrPair> read_asr_set(const std::string& path) {
  std::vector<AsrPair> out;
  for_each_line(path, [&](const json& j) { out.push_back(pair_from_json(j)); });
  return out;
}

void write_cw_set(const std::string& path, const std::vector<CwTuple>& set) {
  std::string out;
  for (const auto& t : set) {
    json j = pair_json(t.pair);
    j["prompt"] = t.prompt;
    j["continuation"] = t.continuation;
    out += j.dump() + "\n";
  }
  num::write_file(path, out);
}

std::vector<CwTuple> read_cw_set(const std::string& path) {
  std::vector<CwTuple> out;
  for_each_line(path, [&](const json& j) {
    if (!j.contains("continuation")) throw DatasetError(path + ": record lacks a continuation");
    out.push_back(CwTuple{pair_from_json(j), j.at("prompt").get<int>(),
                          j.at("continuation").get<TokenSequence>()});
  });
  return out;
}

}  // namespace blspkd::data
