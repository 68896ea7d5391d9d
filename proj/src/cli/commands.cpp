#include "blspkd/cli/commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "blspkd/numerics/checkpoint.hpp"

namespace blspkd::cli {

using nlohmann::ordered_json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const auto x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw train::ConfigError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw train::ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

std::string join(const std::vector<std::string>& v, const char* sep = ",") {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
  return out;
}

template <class T>
std::string join_num(const std::vector<T>& v) {
  std::vector<std::string> s;
  for (const auto& x : v) s.push_back(std::to_string(x));
  return join(s);
}

std::string num_str(double v) { return ordered_json(v).dump(); }

}  // namespace

// ------------------------------------------------------------------ config

void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "data.grammar_seed") c.grammar.seed = to_uint(key, v);
  else if (key == "data.asr_count") c.asr_count = to_uint(key, v);
  else if (key == "data.asr_seed") c.asr_seed = to_uint(key, v);
  else if (key == "data.corpus_count") c.corpus_count = to_uint(key, v);
  else if (key == "data.corpus_seed") c.corpus_seed = to_uint(key, v);
  else if (key == "speech.noise") c.speech.noise = to_double(key, v);
  else if (key == "speech.min_frames") c.speech.min_frames = static_cast<int>(to_uint(key, v));
  else if (key == "speech.max_frames") c.speech.max_frames = static_cast<int>(to_uint(key, v));
  else if (key == "speech.voice_seed") c.speech.voice_seed = to_uint(key, v);
  else if (key == "pretrain.steps") c.pretrain.steps = to_uint(key, v);
  else if (key == "pretrain.lr") c.pretrain.lr = to_double(key, v);
  else if (key == "pretrain.batch") c.pretrain.batch = to_uint(key, v);
  else if (key == "pretrain.seed") c.pretrain.seed = to_uint(key, v);
  else if (key == "encoder_pretrain.steps") c.encoder_pretrain.steps = to_uint(key, v);
  else if (key == "encoder_pretrain.lr") c.encoder_pretrain.lr = to_double(key, v);
  else if (key == "encoder_pretrain.batch") c.encoder_pretrain.batch = to_uint(key, v);
  else if (key == "encoder_pretrain.seed") c.encoder_pretrain.seed = to_uint(key, v);
  else if (key == "eval.examples") c.eval.max_examples = to_uint(key, v);
  else if (key == "eval.probe_train") c.eval.probe_train = to_uint(key, v);
  else if (key == "eval.probe_layers") {
    c.eval.probe_layers.clear();
    for (const auto& s : train::split_list(v)) c.eval.probe_layers.push_back(to_uint(key, s));
  } else if (key == "probe.steps") c.eval.probe.steps = to_uint(key, v);
  else if (key == "probe.lr") c.eval.probe.lr = to_double(key, v);
  else if (key == "probe.batch") c.eval.probe.batch = to_uint(key, v);
  else if (key == "probe.seed") c.eval.probe.seed = to_uint(key, v);
  else if (key == "reproduce.seeds") {
    c.seeds.clear();
    for (const auto& s : train::split_list(v)) c.seeds.push_back(to_uint(key, s));
    if (c.seeds.empty()) throw train::ConfigError("config: reproduce.seeds is empty");
  } else if (key == "reproduce.presets") {
    c.presets = train::split_list(v);
    for (const auto& p : c.presets) (void)train::preset(p);  // validates the name
    if (c.presets.empty()) throw train::ConfigError("config: reproduce.presets is empty");
  } else {
    train::apply_setting(c.train, key, v);
    c.train_settings[key] = v;
  }
}

ExperimentConfig make_experiment(const std::map<std::string, std::string>& settings) {
  ExperimentConfig c;
  if (auto it = settings.find("preset"); it != settings.end()) apply_setting(c, "preset", it->second);
  for (const auto& [k, v] : settings)
    if (k != "preset") apply_setting(c, k, v);
  train::validate(c.train);
  return c;
}

ExperimentConfig parse_experiment(const std::string& text) { return make_experiment(train::parse_key_values(text)); }

std::string to_text(const ExperimentConfig& c) {
  std::ostringstream os;
  os << "# experiment\n";
  os << "data.grammar_seed = " << c.grammar.seed << "\n";
  os << "data.asr_count = " << c.asr_count << "\n";
  os << "data.asr_seed = " << c.asr_seed << "\n";
  os << "data.corpus_count = " << c.corpus_count << "\n";
  os << "data.corpus_seed = " << c.corpus_seed << "\n";
  os << "speech.noise = " << num_str(c.speech.noise) << "\n";
  os << "speech.min_frames = " << c.speech.min_frames << "\n";
  os << "speech.max_frames = " << c.speech.max_frames << "\n";
  os << "speech.voice_seed = " << c.speech.voice_seed << "\n";
  os << "pretrain.steps = " << c.pretrain.steps << "\n";
  os << "pretrain.lr = " << num_str(c.pretrain.lr) << "\n";
  os << "pretrain.batch = " << c.pretrain.batch << "\n";
  os << "pretrain.seed = " << c.pretrain.seed << "\n";
  os << "encoder_pretrain.steps = " << c.encoder_pretrain.steps << "\n";
  os << "encoder_pretrain.lr = " << num_str(c.encoder_pretrain.lr) << "\n";
  os << "encoder_pretrain.batch = " << c.encoder_pretrain.batch << "\n";
  os << "encoder_pretrain.seed = " << c.encoder_pretrain.seed << "\n";
  os << "eval.examples = " << c.eval.max_examples << "\n";
  os << "eval.probe_layers = " << join_num(c.eval.probe_layers) << "\n";
  os << "eval.probe_train = " << c.eval.probe_train << "\n";
  os << "probe.steps = " << c.eval.probe.steps << "\n";
  os << "probe.lr = " << num_str(c.eval.probe.lr) << "\n";
  os << "probe.batch = " << c.eval.probe.batch << "\n";
  os << "probe.seed = " << c.eval.probe.seed << "\n";
  os << "reproduce.seeds = " << join_num(c.seeds) << "\n";
  os << "reproduce.presets = " << join(c.presets) << "\n";
  os << "# training\n" << train::to_text(c.train);
  return os.str();
}

train::TrainConfig train_config_for(const ExperimentConfig& cfg, const std::string& preset, std::uint64_t seed) {
  train::TrainConfig t = train::preset(preset);
  for (const auto& [k, v] : cfg.train_settings) {
    if (k == "preset" || k == "name") continue;
    train::apply_setting(t, k, v);
  }
  t.seed = seed;
  train::validate(t);
  return t;
}

// ------------------------------------------------------------------ run dir

RunDir::RunDir(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

fs::path RunDir::file(const std::string& rel) const {
  const fs::path r(rel);
  if (r.empty() || r.is_absolute()) throw std::invalid_argument("run dir: bad artifact path '" + rel + "'");
  for (const auto& part : r)
    if (part == "..") throw std::invalid_argument("run dir: artifact path leaves the run directory: " + rel);
  const fs::path full = dir_ / r;
  fs::create_directories(full.parent_path());
  return full;
}

fs::path RunDir::write(const std::string& rel, const std::string& bytes, const std::string& kind, bool vol) {
  const fs::path p = file(rel);
  num::write_file(p, bytes);
  artifacts_.push_back(Artifact{rel, kind, vol ? 0 : num::fnv1a(bytes), vol});
  return p;
}

fs::path RunDir::adopt(const std::string& rel, const std::string& kind, bool vol) {
  const fs::path p = file(rel);
  artifacts_.push_back(Artifact{rel, kind, vol ? 0 : num::fnv1a(num::read_file(p)), vol});
  return p;
}

void RunDir::note_input(const std::string& role, const fs::path& p) {
  inputs_.emplace_back(role, num::hash_hex(num::fnv1a(read_input(p))));
}

void RunDir::write_manifest(const std::string& command, const std::string& config_text, std::uint64_t seed) {
  ordered_json j;
  j["tool_version"] = kToolVersion;
  j["command"] = command;
  j["seed"] = seed;
  j["config_hash"] = num::hash_hex(num::fnv1a(config_text));
  ordered_json inputs = ordered_json::array();
  for (const auto& [role, h] : inputs_) inputs.push_back({{"role", role}, {"fnv1a", h}});
  j["inputs"] = inputs;
  ordered_json datasets = ordered_json::array(), ckpts = ordered_json::array(), reports = ordered_json::array(),
               all = ordered_json::array();
  for (const auto& a : artifacts_) {
    ordered_json e{{"path", a.path}, {"kind", a.kind}};
    e["fnv1a"] = a.volatile_ ? ordered_json() : ordered_json(num::hash_hex(a.hash));
    if (a.volatile_) e["volatile"] = true;
    all.push_back(e);
    if (a.kind == "dataset") datasets.push_back({{"path", a.path}, {"fnv1a", e["fnv1a"]}});
    if (a.kind == "checkpoint") ckpts.push_back(a.path);
    if (a.kind == "report") reports.push_back(a.path);
  }
  j["datasets"] = datasets;
  j["checkpoints"] = ckpts;
  j["reports"] = reports;
  j["artifacts"] = all;
  num::write_file(file("manifest.json"), j.dump(2) + "\n");
}

fs::path run_root() {
  const char* env = std::getenv(kRunRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path run_path(const std::string& name) {
  if (name.empty() || name.find("..") != std::string::npos || fs::path(name).is_absolute()) {
    throw std::invalid_argument("bad run name '" + name + "'");
  }
  return run_root() / name;
}

std::string read_input(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw MissingFileError(p);
  return num::read_file(p);
}

// ----------------------------------------------------------------- commands

DatagenResult cmd_datagen(const ExperimentConfig& cfg, RunDir& run) {
  const data::SyntheticGrammar g(cfg.grammar);
  DatagenResult r;
  r.asr = data::build_asr_set(cfg.asr_count, cfg.asr_seed, g, cfg.speech);
  r.corpus = data::build_teacher_corpus(cfg.corpus_count, cfg.corpus_seed, g);
  data::write_asr_set(run.file("data/asr.jsonl").string(), r.asr);
  run.adopt("data/asr.jsonl", "dataset");
  data::write_corpus(run.file("data/corpus.txt").string(), r.corpus);
  run.adopt("data/corpus.txt", "dataset");
  return r;
}

Backbone fresh_backbone() {
  const train::BackboneSeeds seeds;
  return Backbone{model::ToyLM<float>(model::LmConfig{}, seeds.lm),
                  model::ToySpeechEncoder<float>(model::EncoderConfig{}, seeds.encoder)};
}

Backbone cmd_pretrain(const ExperimentConfig& cfg, const std::vector<TokenSequence>& corpus,
                      const std::vector<data::AsrPair>& asr, RunDir& run) {
  Backbone b = fresh_backbone();
  const data::SyntheticGrammar g(cfg.grammar);
  // held-out text from a different corpus seed
  const auto heldout = data::build_teacher_corpus(600, num::derive_seed(cfg.corpus_seed, 77), g);
  const double ce_before = model::sequence_cross_entropy(b.lm, heldout);
  model::pretrain_teacher(b.lm, corpus, cfg.pretrain);
  const double ce_after = model::sequence_cross_entropy(b.lm, heldout);
  const auto asr_train = data::select(asr, data::Split::train);
  const auto enc = model::pretrain_encoder(b.encoder, data::frame_labels(asr_train), b.lm.config().vocab,
                                           cfg.encoder_pretrain);
  train::save_backbone(run.file("teacher.ckpt").string(), b.lm, b.encoder);
  run.adopt("teacher.ckpt", "checkpoint");
  ordered_json j;
  j["steps"] = cfg.pretrain.steps;
  j["heldout_ce_before"] = ce_before;
  j["heldout_ce_after"] = ce_after;
  j["uniform_ce"] = std::log(static_cast<double>(b.lm.config().vocab));
  j["encoder_steps"] = cfg.encoder_pretrain.steps;
  j["encoder_pairs"] = asr_train.size();
  j["encoder_loss_first"] = enc.first_loss;
  j["encoder_loss_final"] = enc.final_loss;
  run.write("pretrain_report.json", j.dump(2) + "\n", "report");
  return b;
}

Backbone load_backbone(const fs::path& ckpt) {
  if (!fs::is_regular_file(ckpt)) throw MissingFileError(ckpt);
  Backbone b = fresh_backbone();
  train::load_backbone(ckpt.string(), b.lm, b.encoder);
  b.lm.set_trainable(false);
  return b;
}

namespace {

ordered_json stats_json(const train::StepStats& st) {
  ordered_json j;
  j["total"] = st.total;
  for (loss::Term t : loss::kAllTerms)
    if (auto v = st.values.get(t)) j[loss::term_name(t)] = *v;
  j["excess_kl"] = st.excess_kl;
  return j;
}

}  // namespace

TrainOutcome cmd_train(const Backbone& backbone, const train::TrainConfig& cfg, const std::vector<data::AsrPair>& asr,
                       const std::vector<data::CwTuple>* cw, RunDir& run, const std::string& prefix) {
  train::validate(cfg);
  const auto asr_train = data::select(asr, data::Split::train);
  std::vector<data::CwTuple> own_cw;
  const std::vector<data::CwTuple>* cw_train = cw;
  if (cfg.data.cw && cw == nullptr) {
    own_cw = data::build_cw_set(asr_train, backbone.lm);
    data::write_cw_set(run.file(prefix + "data/cw.jsonl").string(), own_cw);
    run.adopt(prefix + "data/cw.jsonl", "dataset");
    cw_train = &own_cw;
  }
  std::vector<data::CwTuple> cw_sel;
  if (cw_train && cw_train != &own_cw) {
    for (const auto& t : *cw_train)
      if (t.pair.split == data::Split::train) cw_sel.push_back(t);
    cw_train = &cw_sel;
  }
  TrainOutcome out{train::SpeechSystem::create(backbone.lm, backbone.encoder, cfg), {}};
  const train::TrainData td{&asr_train, cfg.data.cw ? cw_train : nullptr};
  std::string log;
  out.report = train::run(out.system, cfg, td, [&](const train::LogRecord& r) { log += train::log_line(r) + "\n"; });
  run.write(prefix + "train_log.jsonl", log, "log", true);
  run.write(prefix + "train_config.txt", train::to_text(cfg), "config");
  num::save_checkpoint(run.file(prefix + "student.ckpt"), out.system.student_records());
  run.adopt(prefix + "student.ckpt", "checkpoint");

  ordered_json j;
  j["preset"] = cfg.preset;
  j["seed"] = cfg.seed;
  j["steps"] = out.report.steps;
  j["configured_steps"] = cfg.steps;
  j["aborted"] = out.report.aborted;
  if (out.report.aborted) j["abort_reason"] = out.report.abort_reason;
  j["lm_frozen"] = out.report.lm_checksum_before == out.report.lm_checksum_after;
  j["encoder_changed"] = out.report.encoder_checksum_before != out.report.encoder_checksum_after;
  j["checkpoint"] = prefix + "student.ckpt";
  ordered_json logs = ordered_json::array();
  for (const auto& r : out.report.log) {
    ordered_json e;
    e["step"] = r.step;
    e["lr"] = r.lr;
    e.update(stats_json(r.stats));
    logs.push_back(e);
  }
  j["log"] = logs;
  run.write(prefix + "train_report.json", j.dump(2) + "\n", "report");
  if (out.report.aborted) throw model::TrainingError(out.report.abort_reason);
  return out;
}

train::SpeechSystem load_system(const Backbone& backbone, const train::TrainConfig& cfg, const fs::path& student_ckpt) {
  if (!fs::is_regular_file(student_ckpt)) throw MissingFileError(student_ckpt);
  train::SpeechSystem sys = train::SpeechSystem::create(backbone.lm, backbone.encoder, cfg);
  sys.load_student(num::load_checkpoint(student_ckpt));
  return sys;
}

eval::EvalReport cmd_eval(train::SpeechSystem& sys, const train::TrainConfig& cfg, const ExperimentConfig& exp,
                          const std::vector<data::AsrPair>& asr, RunDir& run, const std::string& prefix) {
  const auto heldout = data::select(asr, data::Split::heldout);
  const auto probe_train = data::select(asr, data::Split::train);
  eval::EvalOptions opt = exp.eval;
  if (sys.adapter->kind() != model::AdapterKind::cformer) opt.probe_layers.clear();
  eval::EvalReport rep = eval::evaluate(sys, cfg.preset, heldout, probe_train, opt);
  run.write(prefix + "eval_report.json", eval::to_json(rep), "report");
  run.write(prefix + "eval_examples.csv", eval::examples_csv(rep), "report");
  return rep;
}

eval::ProbeResult cmd_probe(train::SpeechSystem& sys, std::size_t layer, const ExperimentConfig& exp,
                            const std::vector<data::AsrPair>& asr, RunDir& run) {
  const auto heldout = data::select(asr, data::Split::heldout);
  const auto train_set = data::select(asr, data::Split::train);
  const auto r = eval::train_probe(sys, layer, eval::refs_of(train_set, exp.eval.probe_train),
                                   eval::refs_of(heldout, exp.eval.max_examples), exp.eval.probe);
  ordered_json j;
  j["layer"] = r.layer;
  j["wer"] = r.wer;
  j["final_train_ce"] = r.final_loss;
  j["train_examples"] = r.train_examples;
  j["test_examples"] = r.test_examples;
  j["probe_steps"] = exp.eval.probe.steps;
  j["model_unchanged"] = r.checksum_before == r.checksum_after;
  run.write("probe_report.json", j.dump(2) + "\n", "report");
  return r;
}

DecodeResult cmd_decode(const train::SpeechSystem& sys, const data::AsrPair& example, bool dump_alignment,
                        RunDir& run) {
  DecodeResult r;
  const eval::AsrRefs refs{&example};
  const auto s_adp = eval::adapter_outputs(sys, refs);
  r.fired = s_adp[0].rows();
  r.prompted = eval::greedy_decode_embedded(sys.lm, sys.hook(), eval::speech_prompts(sys, s_adp, vocab::kRepeat),
                                            eval::kRepeatMaxLen)[0];
  r.continuation = eval::greedy_decode_embedded(sys.lm, sys.hook(),
                                                eval::speech_prompts(sys, s_adp, vocab::kContinue),
                                                eval::kContinuationMaxLen)[0];
  if (dump_alignment) {
    if (sys.adapter->kind() != model::AdapterKind::cformer) {
      throw train::ConfigError("--dump-alignment needs a cformer adapter");
    }
    num::Tape<float> tape(false);
    const num::Segment seg{0, example.features.rows()};
    auto s_enc = sys.encoder.encode(tape, tape.constant(example.features), std::span<const num::Segment>(&seg, 1));
    auto out = sys.adapter->forward(tape, s_enc, std::span<const num::Segment>(&seg, 1));
    r.alignment_csv = cif::alignment_csv(out.alignment.at(0));
    run.write("alignment.csv", *r.alignment_csv, "report");
  }
  ordered_json j;
  j["transcript"] = eval::tokens_str(example.transcript);
  j["fired"] = r.fired;
  j["prompted"] = eval::tokens_str(r.prompted);
  j["wer_prompted"] = eval::wer(r.prompted, example.transcript);
  j["continuation"] = eval::tokens_str(r.continuation);
  run.write("decode.json", j.dump(2) + "\n", "report");
  return r;
}

// --------------------------------------------------------------- reproduce

namespace {

std::string tunable_str(const train::Tunable& t) {
  std::vector<std::string> v;
  if (t.encoder) v.push_back("encoder");
  if (t.adapter) v.push_back("adapter");
  if (t.llm_plora) v.push_back("llm(plora)");
  return join(v, "+");
}

std::string losses_str(const train::TrainConfig& c) {
  std::vector<std::string> v;
  for (loss::Term t : loss::kAllTerms)
    if (c.has(t)) v.push_back(loss::term_name(t));
  return join(v, "+");
}

std::string data_str(const train::DataSet& d) {
  std::vector<std::string> v;
  if (d.asr) v.push_back("asr");
  if (d.cw) v.push_back("cw");
  return join(v, "+");
}

std::string fixed(std::optional<double> v, int digits) {
  if (!v) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << *v;
  return os.str();
}

std::optional<double> mean_of(const std::vector<std::optional<double>>& xs) {
  double s = 0;
  for (const auto& x : xs) {
    if (!x) return std::nullopt;
    s += *x;
  }
  return xs.empty() ? std::nullopt : std::optional<double>(s / static_cast<double>(xs.size()));
}

}  // namespace

ReproduceReport cmd_reproduce(const ExperimentConfig& cfg, RunDir& run) {
  ReproduceReport rep;
  const DatagenResult data = cmd_datagen(cfg, run);
  const Backbone backbone = cmd_pretrain(cfg, data.corpus, data.asr, run);
  const auto asr_train = data::select(data.asr, data::Split::train);
  bool need_cw = false;
  for (const auto& p : cfg.presets) need_cw = need_cw || train::preset(p).data.cw;
  std::vector<data::CwTuple> cw;
  if (need_cw) {
    cw = data::build_cw_set(asr_train, backbone.lm);
    data::write_cw_set(run.file("data/cw.jsonl").string(), cw);
    run.adopt("data/cw.jsonl", "dataset");
  }

  for (const auto& name : cfg.presets) {
    ReproduceRow row;
    row.preset = name;
    std::vector<std::optional<double>> bleu, rouge, werp, probe0, kl, agree;
    for (std::uint64_t seed : cfg.seeds) {
      const train::TrainConfig tc = train_config_for(cfg, name, seed);
      row.adapter = model::adapter_name(tc.adapter);
      row.tunable = tunable_str(tc.tunable);
      row.losses = losses_str(tc);
      row.data = data_str(tc.data);
      const std::string prefix = "presets/" + name + "/seed" + std::to_string(seed) + "/";
      TrainOutcome o = cmd_train(backbone, tc, data.asr, need_cw ? &cw : nullptr, run, prefix);
      eval::EvalReport er = cmd_eval(o.system, tc, cfg, data.asr, run, prefix);
      bleu.push_back(er.self_bleu);
      rouge.push_back(er.self_rougel);
      werp.push_back(er.wer_prompted);
      probe0.push_back(er.wer_probe.count(0) ? std::optional<double>(er.wer_probe.at(0)) : std::nullopt);
      const auto& head = er.distill.input ? er.distill.input : er.distill.response;
      kl.push_back(head ? std::optional<double>(head->mean_excess_kl) : std::nullopt);
      agree.push_back(head ? std::optional<double>(head->top1_agreement) : std::nullopt);
      row.per_seed.push_back(std::move(er));
    }
    row.self_bleu = *mean_of(bleu);
    row.self_rougel = *mean_of(rouge);
    row.wer_prompted = *mean_of(werp);
    row.wer_probe0 = mean_of(probe0);
    row.mean_excess_kl = mean_of(kl);
    row.top1_agreement = mean_of(agree);
    rep.rows.push_back(std::move(row));
  }

  std::ostringstream md, csv;
  md << "# Comparison (mean over seeds " << join_num(cfg.seeds) << ")\n\n";
  md << "| System | Adapter | Tunable | Loss | Data | Self-BLEU | Self-RougeL | WER prompted | WER probe L0 | "
        "excess KL | top-1 agree |\n";
  md << "|---|---|---|---|---|---|---|---|---|---|---|\n";
  csv << "system,adapter,tunable,loss,data,self_bleu,self_rougel,wer_prompted,wer_probe0,excess_kl,top1_agreement\n";
  ordered_json j;
  j["seeds"] = cfg.seeds;
  j["config_hash"] = num::hash_hex(num::fnv1a(to_text(cfg)));
  ordered_json rows = ordered_json::array();
  for (const auto& r : rep.rows) {
    md << "| " << r.preset << " | " << r.adapter << " | " << r.tunable << " | " << r.losses << " | " << r.data << " | "
       << fixed(r.self_bleu, 2) << " | " << fixed(r.self_rougel, 4) << " | " << fixed(r.wer_prompted, 4) << " | "
       << fixed(r.wer_probe0, 4) << " | " << fixed(r.mean_excess_kl, 4) << " | " << fixed(r.top1_agreement, 4)
       << " |\n";
    csv << r.preset << ',' << r.adapter << ',' << r.tunable << ',' << r.losses << ',' << r.data << ','
        << fixed(r.self_bleu, 4) << ',' << fixed(r.self_rougel, 6) << ',' << fixed(r.wer_prompted, 6) << ','
        << fixed(r.wer_probe0, 6) << ',' << fixed(r.mean_excess_kl, 6) << ',' << fixed(r.top1_agreement, 6) << '\n';
    ordered_json o;
    o["system"] = r.preset;
    o["adapter"] = r.adapter;
    o["tunable"] = r.tunable;
    o["loss"] = r.losses;
    o["data"] = r.data;
    o["self_bleu"] = r.self_bleu;
    o["self_rougel"] = r.self_rougel;
    o["wer_prompted"] = r.wer_prompted;
    o["wer_probe0"] = r.wer_probe0 ? ordered_json(*r.wer_probe0) : ordered_json();
    o["mean_excess_kl"] = r.mean_excess_kl ? ordered_json(*r.mean_excess_kl) : ordered_json();
    o["top1_agreement"] = r.top1_agreement ? ordered_json(*r.top1_agreement) : ordered_json();
    ordered_json seeds = ordered_json::array();
    for (const auto& e : r.per_seed) seeds.push_back(nlohmann::ordered_json::parse(eval::to_json(e)));
    o["per_seed"] = seeds;
    rows.push_back(o);
  }
  j["rows"] = rows;
  rep.markdown = md.str();
  rep.csv = csv.str();
  rep.json = j.dump(2) + "\n";
  run.write("reproduce_report.md", rep.markdown, "report");
  run.write("reproduce_report.csv", rep.csv, "report");
  run.write("reproduce_report.json", rep.json, "report");
  return rep;
}

}  // namespace blspkd::cli
