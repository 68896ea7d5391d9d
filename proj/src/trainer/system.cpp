#include "blspkd/trainer/system.hpp"

#include <cmath>

namespace blspkd::train {

SpeechSystem SpeechSystem::create(const model::ToyLM<float>& teacher,
                                  const model::ToySpeechEncoder<float>& encoder, const TrainConfig& cfg) {
  validate(cfg);
  SpeechSystem s;
  s.lm = teacher;
  s.lm.set_trainable(false);
  s.encoder = encoder;
  s.encoder.set_trainable(cfg.tunable.encoder);
  model::AdapterConfig ac;
  ac.dim = encoder.config().dim;
  ac.llm_dim = teacher.config().dim;
  s.adapter = model::make_adapter<float>(cfg.adapter, ac, num::derive_seed(cfg.seed, 101));
  s.adapter->set_trainable(cfg.tunable.adapter);
  if (cfg.tunable.llm_plora) {
    s.plora = std::make_unique<model::PLoRA<float>>(s.lm, cfg.plora, num::derive_seed(cfg.seed, 102));
  }
  if (cfg.has(loss::Term::asr)) {
    num::Rng rng(num::derive_seed(cfg.seed, 103));
    s.asr_head.emplace("asr_head", ac.llm_dim, teacher.config().vocab, rng,
                       1.0 / std::sqrt(static_cast<double>(ac.llm_dim)));
  }
  return s;
}

model::ParamList<float> SpeechSystem::plora_parameters() {
  return plora ? plora->parameters() : model::ParamList<float>{};
}

model::ParamList<float> SpeechSystem::head_parameters() {
  model::ParamList<float> out;
  if (asr_head) asr_head->collect(out);
  return out;
}

model::ParamList<float> SpeechSystem::student_parameters() {
  model::ParamList<float> out = encoder_parameters();
  for (auto* p : adapter_parameters()) out.push_back(p);
  for (auto* p : plora_parameters()) out.push_back(p);
  for (auto* p : head_parameters()) out.push_back(p);
  return out;
}

std::vector<num::NamedTensor> SpeechSystem::student_records() {
  return num::to_records(student_parameters());
}

void SpeechSystem::load_student(const std::vector<num::NamedTensor>& records) {
  num::load_into(records, student_parameters(), true);
}

void save_backbone(const std::string& path, model::ToyLM<float>& lm, model::ToySpeechEncoder<float>& enc) {
  auto params = lm.parameters();
  for (auto* p : enc.parameters()) params.push_back(p);
  num::save_checkpoint(path, num::to_records(params));
}

void load_backbone(const std::string& path, model::ToyLM<float>& lm, model::ToySpeechEncoder<float>& enc) {
  const auto records = num::load_checkpoint(path);
  auto params = lm.parameters();
  for (auto* p : enc.parameters()) params.push_back(p);
  num::load_into(records, params, true);
}

}  // namespace blspkd::train
