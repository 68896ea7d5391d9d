#pragma once

#include <memory>
#include <optional>
#include <string>

#include "blspkd/backbone/encoder.hpp"
#include "blspkd/backbone/lm.hpp"
#include "blspkd/cformer/adapter.hpp"
#include "blspkd/numerics/checkpoint.hpp"
#include "blspkd/plora/plora.hpp"
#include "blspkd/trainer/config.hpp"

namespace blspkd::train {

// Seeds shared by every run so presets differ only in what they train.
struct BackboneSeeds {
  std::uint64_t lm = 3;
  std::uint64_t encoder = 17;
};

// Speech path (encoder → adapter → LM with optional PLoRA) around a frozen
// teacher LM. The LM parameters here are the teacher's; they stay frozen.
struct SpeechSystem {
  model::ToyLM<float> lm;
  model::ToySpeechEncoder<float> encoder;
  std::unique_ptr<model::Adapter<float>> adapter;
  std::unique_ptr<model::PLoRA<float>> plora;
  std::optional<model::Linear<float>> asr_head;

  // Builds the student side for `cfg` around an already-trained LM and
  // encoder, and sets trainable flags from cfg.tunable.
  static SpeechSystem create(const model::ToyLM<float>& teacher, const model::ToySpeechEncoder<float>& encoder,
                             const TrainConfig& cfg);

  const model::LinearHook<float>* hook() const { return plora.get(); }

  model::ParamList<float> lm_parameters() { return lm.parameters(); }
  model::ParamList<float> encoder_parameters() { return encoder.parameters(); }
  model::ParamList<float> adapter_parameters() { return adapter->parameters(); }
  model::ParamList<float> plora_parameters();
  model::ParamList<float> head_parameters();
  // Every parameter that an optimizer may touch (flags decide which do).
  model::ParamList<float> student_parameters();

  // Records for the student checkpoint: encoder, adapter, PLoRA, ASR head.
  std::vector<num::NamedTensor> student_records();
  void load_student(const std::vector<num::NamedTensor>& records);
};

// Teacher checkpoint = LM + (shared, initial) encoder.
void save_backbone(const std::string& path, model::ToyLM<float>& lm, model::ToySpeechEncoder<float>& enc);
void load_backbone(const std::string& path, model::ToyLM<float>& lm, model::ToySpeechEncoder<float>& enc);

}  // namespace blspkd::train
