#pragma once

#include <functional>
#include <string>
#include <vector>

#include "blspkd/datagen/datagen.hpp"
#include "blspkd/losses/losses.hpp"
#include "blspkd/numerics/optim.hpp"
#include "blspkd/trainer/system.hpp"

namespace blspkd::train {

using num::Segment;
using num::Tape;
using num::Tensor;
using num::Var;

// One training example: an ASR pair, optionally with its CW extension.
struct ExampleRef {
  const data::AsrPair* pair = nullptr;
  const data::CwTuple* cw = nullptr;  // non-null → CW format
};

// Per-example layout inside the packed teacher/student sequences.
//   ASR format: teacher [bos, x…]            student [bos, s_adp…]
//   CW format:  teacher [bos, c, x…, eoi, y…] student [bos, c, s_adp…, eoi, y…]
struct ExampleLayout {
  bool cw = false;
  int prompt = vocab::kContinue;
  TokenSequence x, y;
  std::size_t frames = 0;
  Segment teacher;    // rows in the teacher pack
  Segment frame_seg;  // rows in the packed frames
};

struct Batch {
  std::vector<ExampleLayout> examples;
  std::vector<int> teacher_ids;
  std::vector<Segment> teacher_segments;
  Tensor<float> frames;
  std::vector<Segment> frame_segments;
  std::vector<std::size_t> counts;  // |x| per example (CIF target counts)
};

// Throws ConfigError if an example lacks what the config's losses need.
Batch assemble_batch(const std::vector<ExampleRef>& examples, const TrainConfig& cfg);

enum class FireMode { target_count, inference };

// Aligned rows of the two passes for one region.
struct RegionRows {
  std::vector<std::size_t> teacher;
  std::vector<std::size_t> student;
  std::vector<std::size_t> example;  // owning example index
};

// Result of running both passes over a batch.
struct PassResult {
  Var<float> student_logits;         // student rows × V
  Tensor<float> teacher_probs;       // teacher rows × V (empty if not requested)
  model::AdapterOutput<float> adapter;
  std::vector<Segment> student_segments;
  RegionRows input, response;
  Var<float> s_adp;
};

// Teacher pass runs on its own non-recording tape; student ops go on `tape`.
PassResult run_passes(const SpeechSystem& sys, const Batch& batch, Tape<float>& tape, FireMode mode,
                      bool with_teacher = true);

struct StepStats {
  loss::LossValues values;
  double total = 0.0;
  double excess_kl = 0.0;  // mean per distilled position (input and response)
  std::size_t kl_positions = 0;
};

// Builds the configured loss terms over one pass.
loss::LossBundle<float> build_losses(const SpeechSystem& sys, const Batch& batch, const PassResult& pass,
                                     const TrainConfig& cfg, StepStats* stats = nullptr);

class Trainer {
 public:
  Trainer(SpeechSystem& sys, TrainConfig cfg);

  // Forward, backward and one optimizer update. NaN/Inf aborts with TrainingError.
  StepStats step(const Batch& batch);
  // Gradients only (no update); grads land in each trainable parameter.
  StepStats compute_gradients(const Batch& batch);

  std::size_t steps_done() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  model::ParamList<float>& parameters() { return params_; }

 private:
  SpeechSystem& sys_;
  TrainConfig cfg_;
  model::ParamList<float> params_;
  num::Adam<float> adam_;
  std::size_t step_ = 0;
};

struct TrainData {
  const std::vector<data::AsrPair>* asr = nullptr;  // train split
  const std::vector<data::CwTuple>* cw = nullptr;   // train split
};

// Deterministic batch schedule: step s draws `batch` examples from the
// configured data; with both sets, examples alternate ASR / CW.
std::vector<ExampleRef> sample_batch(const TrainData& data, const TrainConfig& cfg, std::size_t step);

struct LogRecord {
  std::size_t step = 0;
  StepStats stats;
  double lr = 0.0;
  double wall = 0.0;  // seconds since run start
};

struct TrainReport {
  std::vector<LogRecord> log;
  std::size_t steps = 0;
  bool aborted = false;
  std::string abort_reason;
  std::uint64_t lm_checksum_before = 0, lm_checksum_after = 0;
  std::uint64_t encoder_checksum_before = 0, encoder_checksum_after = 0;
};

std::string log_line(const LogRecord& rec);

// Runs cfg.steps steps. `on_log` (optional) receives every logged record.
TrainReport run(SpeechSystem& sys, const TrainConfig& cfg, const TrainData& data,
                const std::function<void(const LogRecord&)>& on_log = {});

}  // namespace blspkd::train
