#pragma once

// Shared pretrained teacher for tests that need a trained LM. Trained once
// and cached next to the test binaries; later processes load the file.

#include <filesystem>
#include <string>
#include <unistd.h>

#include "blspkd/datagen/datagen.hpp"
#include "blspkd/numerics/checkpoint.hpp"
#include "blspkd/trainer/system.hpp"

#ifndef BLSPKD_FIXTURE_DIR
#define BLSPKD_FIXTURE_DIR "."
#endif

namespace blspkd::testing {

inline model::PretrainOptions fixture_pretrain() { return model::PretrainOptions{2000, 1e-3, 16, 1, 0.05}; }

// LM + pretrained encoder, as written by the pretrain command.
struct FixtureBackbone {
  model::ToyLM<float> lm{model::LmConfig{}, train::BackboneSeeds{}.lm};
  model::ToySpeechEncoder<float> encoder{model::EncoderConfig{}, train::BackboneSeeds{}.encoder};
};

inline const FixtureBackbone& pretrained_backbone() {
  static const FixtureBackbone b = [] {
    FixtureBackbone out;
    const std::filesystem::path path = std::filesystem::path(BLSPKD_FIXTURE_DIR) / "fixture_teacher.ckpt";
    if (std::filesystem::exists(path)) {
      train::load_backbone(path.string(), out.lm, out.encoder);
      out.lm.set_trainable(false);
      return out;
    }
    const data::SyntheticGrammar g;
    model::pretrain_teacher(out.lm, data::build_teacher_corpus(20000, 5, g), fixture_pretrain());
    const auto asr = data::select(data::build_asr_set(3000, 42, g), data::Split::train);
    model::pretrain_encoder(out.encoder, data::frame_labels(asr), out.lm.config().vocab, {});
    const auto tmp = path.string() + ".tmp" + std::to_string(::getpid());
    train::save_backbone(tmp, out.lm, out.encoder);
    std::filesystem::rename(tmp, path);
    return out;
  }();
  return b;
}

inline const model::ToyLM<float>& pretrained_teacher() { return pretrained_backbone().lm; }

}  // namespace blspkd::testing
