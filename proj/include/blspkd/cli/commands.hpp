#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "blspkd/datagen/datagen.hpp"
#include "blspkd/evaluation/evaluate.hpp"
#include "blspkd/trainer/trainer.hpp"

namespace blspkd::cli {

namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "blspkd 0.1.0";
inline constexpr const char* kRunRootEnv = "BLSPKD_RUN_ROOT";

// Process exit codes; every failure class has its own.
enum Exit : int {
  kOk = 0,
  kUsage = 2,
  kMissingFile = 3,
  kInvalidConfig = 4,
  kUnknownPreset = 5,
  kRuntime = 6,
};

struct MissingFileError : std::runtime_error {
  explicit MissingFileError(const fs::path& p) : std::runtime_error("missing file: " + p.string()) {}
};

// Everything a pipeline stage needs besides the per-run training config.
struct ExperimentConfig {
  data::GrammarConfig grammar;
  data::SpeechConfig speech;
  std::size_t asr_count = 10000;
  std::uint64_t asr_seed = 42;
  std::size_t corpus_count = 20000;
  std::uint64_t corpus_seed = 5;

  model::PretrainOptions pretrain{3000, 1e-3, 16, 1, 0.05};
  model::EncoderPretrainOptions encoder_pretrain;

  train::TrainConfig train = train::preset("kd4");
  std::map<std::string, std::string> train_settings;  // as given, re-applied per preset

  eval::EvalOptions eval{400, {0}, 2000, {}};

  std::vector<std::uint64_t> seeds{1};
  std::vector<std::string> presets = train::preset_names();
};

// `key = value` text. Training keys are the TrainConfig keys; the rest are
// data.*, speech.*, pretrain.*, encoder_pretrain.*, eval.*, probe.* and reproduce.*.
void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value);
ExperimentConfig parse_experiment(const std::string& text);
// Merges settings (later wins) and applies them with `preset` first.
ExperimentConfig make_experiment(const std::map<std::string, std::string>& settings);
// Canonical text (stable order); parse_experiment(to_text(c)) == c.
std::string to_text(const ExperimentConfig& cfg);
// Training config for one preset/seed with the experiment's overrides.
train::TrainConfig train_config_for(const ExperimentConfig& cfg, const std::string& preset, std::uint64_t seed);

// Output directory of one command invocation. All writes go through it;
// paths leaving the directory are rejected.
class RunDir {
 public:
  explicit RunDir(fs::path dir);
  const fs::path& path() const { return dir_; }
  fs::path file(const std::string& rel) const;
  // Writes and records an artifact (kind: dataset, checkpoint, report, log).
  fs::path write(const std::string& rel, const std::string& bytes, const std::string& kind, bool volatile_ = false);
  // Records a file some other writer already put at `rel`.
  fs::path adopt(const std::string& rel, const std::string& kind, bool volatile_ = false);
  void note_input(const std::string& role, const fs::path& p);
  // Writes manifest.json listing every artifact with its hash.
  void write_manifest(const std::string& command, const std::string& config_text, std::uint64_t seed);

 private:
  struct Artifact {
    std::string path, kind;
    std::uint64_t hash = 0;
    bool volatile_ = false;  // content depends on wall time; not hashed
  };
  fs::path dir_;
  std::vector<Artifact> artifacts_;
  std::vector<std::pair<std::string, std::string>> inputs_;  // role, hash
};

// <root>/<name>, root from BLSPKD_RUN_ROOT (default ./runs).
fs::path run_root();
fs::path run_path(const std::string& name);

std::string read_input(const fs::path& p);

// ----------------------------------------------------------------- commands

struct DatagenResult {
  std::vector<data::AsrPair> asr;
  std::vector<TokenSequence> corpus;
};
DatagenResult cmd_datagen(const ExperimentConfig& cfg, RunDir& run);

struct Backbone {
  model::ToyLM<float> lm;
  model::ToySpeechEncoder<float> encoder;
};
Backbone fresh_backbone();
// Teacher LM pretraining on the corpus plus speech-encoder pretraining on
// the train split of `asr`; writes teacher.ckpt (LM + pretrained encoder).
Backbone cmd_pretrain(const ExperimentConfig& cfg, const std::vector<TokenSequence>& corpus,
                      const std::vector<data::AsrPair>& asr, RunDir& run);
Backbone load_backbone(const fs::path& ckpt);

struct TrainOutcome {
  train::SpeechSystem system;
  train::TrainReport report;
};
// CW tuples are built from the teacher on demand.
TrainOutcome cmd_train(const Backbone& backbone, const train::TrainConfig& cfg, const std::vector<data::AsrPair>& asr,
                       const std::vector<data::CwTuple>* cw, RunDir& run, const std::string& prefix = "");
train::SpeechSystem load_system(const Backbone& backbone, const train::TrainConfig& cfg, const fs::path& student_ckpt);

eval::EvalReport cmd_eval(train::SpeechSystem& sys, const train::TrainConfig& cfg, const ExperimentConfig& exp,
                          const std::vector<data::AsrPair>& asr, RunDir& run, const std::string& prefix = "");

eval::ProbeResult cmd_probe(train::SpeechSystem& sys, std::size_t layer, const ExperimentConfig& exp,
                            const std::vector<data::AsrPair>& asr, RunDir& run);

struct DecodeResult {
  TokenSequence prompted;
  TokenSequence continuation;
  std::size_t fired = 0;
  std::optional<std::string> alignment_csv;
};
DecodeResult cmd_decode(const train::SpeechSystem& sys, const data::AsrPair& example, bool dump_alignment, RunDir& run);

struct ReproduceRow {
  std::string preset;
  std::string adapter, tunable, losses, data;
  std::vector<eval::EvalReport> per_seed;
  double self_bleu = 0, self_rougel = 0, wer_prompted = 0;
  std::optional<double> wer_probe0, mean_excess_kl, top1_agreement;
};
struct ReproduceReport {
  std::vector<ReproduceRow> rows;
  std::string markdown, csv, json;
};
// Shared data and teacher, every preset × seed trained and evaluated.
ReproduceReport cmd_reproduce(const ExperimentConfig& cfg, RunDir& run);

// argv entry point used by the tools binary.
int main_entry(int argc, char** argv);

}  // namespace blspkd::cli
