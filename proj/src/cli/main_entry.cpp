#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "blspkd/cli/commands.hpp"
#include "blspkd/evaluation/metrics.hpp"

namespace blspkd::cli {

namespace {

struct Globals {
  std::string run;
  std::string config;
  std::vector<std::string> sets;
};

ExperimentConfig load_experiment(const Globals& g) {
  std::map<std::string, std::string> kv;
  if (!g.config.empty()) kv = train::parse_key_values(read_input(g.config));
  for (const auto& s : g.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw train::ConfigError("--set expects key=value, got '" + s + "'");
    auto key = s.substr(0, eq);
    while (!key.empty() && key.back() == ' ') key.pop_back();
    kv[key] = s.substr(eq + 1);
  }
  return make_experiment(kv);
}

RunDir open_run(const Globals& g, const std::string& command, const std::string& config_text) {
  if (!g.run.empty()) return RunDir(run_path(g.run));
  return RunDir(run_path(command + "-" + num::hash_hex(num::fnv1a(command + "\n" + config_text)).substr(0, 8)));
}

std::vector<data::AsrPair> load_asr(const fs::path& p, RunDir& run) {
  run.note_input("asr", p);
  (void)read_input(p);
  return data::read_asr_set(p.string());
}

}  // namespace

int main_entry(int argc, char** argv) {
  CLI::App app{"Toy speech-to-LLM distillation pipeline"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  Globals g;
  app.add_option("--run", g.run, "Run name (directory under $BLSPKD_RUN_ROOT or ./runs)");
  app.add_option("--config", g.config, "key = value config file");
  app.add_option("--set", g.sets, "Override one setting, key=value (repeatable)");

  auto* datagen = app.add_subcommand("datagen", "Generate ASR pairs and the teacher corpus");

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the teacher LM and the speech encoder");
  std::string corpus_path, pretrain_data;
  pretrain->add_option("--corpus", corpus_path, "Corpus file (default: generate)");
  pretrain->add_option("--data", pretrain_data, "ASR set for the encoder (default: generate)");

  auto* trainc = app.add_subcommand("train", "Train one preset");
  std::string preset_name, teacher_path, data_path, cw_path;
  trainc->add_option("--preset", preset_name, "Preset name");
  trainc->add_option("--teacher", teacher_path, "Teacher checkpoint")->required();
  trainc->add_option("--data", data_path, "ASR set (jsonl)")->required();
  trainc->add_option("--cw", cw_path, "CW set (jsonl; built from the teacher if absent)");

  auto add_system_opts = [&](CLI::App* sub) {
    sub->add_option("--preset", preset_name, "Preset the student was trained with");
    sub->add_option("--teacher", teacher_path, "Teacher checkpoint")->required();
    sub->add_option("--data", data_path, "ASR set (jsonl)")->required();
  };
  std::string student_path;
  auto* evalc = app.add_subcommand("eval", "Evaluate a trained student");
  add_system_opts(evalc);
  evalc->add_option("--student", student_path, "Student checkpoint")->required();

  auto* probec = app.add_subcommand("probe", "Fit a WER probe on LM hidden states");
  add_system_opts(probec);
  probec->add_option("--student", student_path, "Student checkpoint")->required();
  std::size_t layer = 0;
  probec->add_option("--layer", layer, "LM layer (0 = adapter output)");

  auto* decodec = app.add_subcommand("decode", "Decode one held-out example");
  add_system_opts(decodec);
  decodec->add_option("--student", student_path, "Student checkpoint")->required();
  std::size_t example = 0;
  bool dump_alignment = false;
  decodec->add_option("--example", example, "Index into the held-out split")->required();
  decodec->add_flag("--dump-alignment", dump_alignment, "Write the CIF alignment as CSV");

  auto* reproduce = app.add_subcommand("reproduce", "Whole comparison table");
  std::string seeds;
  reproduce->add_option("--seeds", seeds, "Comma-separated seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    ExperimentConfig cfg = load_experiment(g);
    if (!seeds.empty()) apply_setting(cfg, "reproduce.seeds", seeds);
    const std::string cmd = app.get_subcommands().front()->get_name();
    auto tc = [&]() {
      return preset_name.empty() ? cfg.train : train_config_for(cfg, preset_name, cfg.train.seed);
    };
    const std::string text = to_text(cfg) + "command.preset = " + preset_name + "\n";
    RunDir run = open_run(g, cmd, text);
    run.write("config.txt", to_text(cfg), "config");
    std::uint64_t seed = cfg.train.seed;

    if (*reproduce) {
      const auto rep = cmd_reproduce(cfg, run);
      std::cout << rep.markdown;
      seed = cfg.seeds.front();
    } else if (*datagen) {
      const auto r = cmd_datagen(cfg, run);
      std::printf("%zu asr pairs, %zu corpus lines -> %s\n", r.asr.size(), r.corpus.size(), run.path().c_str());
      seed = cfg.asr_seed;
    } else if (*pretrain) {
      std::vector<TokenSequence> corpus;
      if (!corpus_path.empty()) {
        run.note_input("corpus", corpus_path);
        (void)read_input(corpus_path);
        corpus = data::read_corpus(corpus_path);
      } else {
        corpus = data::build_teacher_corpus(cfg.corpus_count, cfg.corpus_seed, data::SyntheticGrammar(cfg.grammar));
      }
      const auto asr = pretrain_data.empty()
                           ? data::build_asr_set(cfg.asr_count, cfg.asr_seed, data::SyntheticGrammar(cfg.grammar),
                                                 cfg.speech)
                           : load_asr(pretrain_data, run);
      cmd_pretrain(cfg, corpus, asr, run);
      std::printf("teacher -> %s\n", run.file("teacher.ckpt").c_str());
      seed = cfg.pretrain.seed;
    } else if (*trainc) {
      const auto t = tc();
      run.note_input("teacher", teacher_path);
      const Backbone b = load_backbone(teacher_path);
      const auto asr = load_asr(data_path, run);
      std::vector<data::CwTuple> cw;
      if (!cw_path.empty()) {
        run.note_input("cw", cw_path);
        (void)read_input(cw_path);
        cw = data::read_cw_set(cw_path);
      }
      const auto out = cmd_train(b, t, asr, cw_path.empty() ? nullptr : &cw, run);
      std::printf("%s: %zu steps -> %s\n", t.preset.c_str(), out.report.steps, run.file("student.ckpt").c_str());
      seed = t.seed;
    } else {
      const auto t = tc();
      run.note_input("teacher", teacher_path);
      run.note_input("student", student_path);
      const Backbone b = load_backbone(teacher_path);
      const auto asr = load_asr(data_path, run);
      train::SpeechSystem sys = load_system(b, t, student_path);
      seed = t.seed;
      if (*evalc) {
        const auto rep = cmd_eval(sys, t, cfg, asr, run);
        std::cout << eval::to_json(rep);
      } else if (*probec) {
        const auto r = cmd_probe(sys, layer, cfg, asr, run);
        std::printf("layer %zu probe WER %.4f\n", r.layer, r.wer);
      } else {
        const auto held = data::select(asr, data::Split::heldout);
        if (example >= held.size()) {
          throw train::ConfigError("--example " + std::to_string(example) + " out of range (" +
                                   std::to_string(held.size()) + " held-out examples)");
        }
        const auto r = cmd_decode(sys, held[example], dump_alignment, run);
        std::printf("ref:          %s\nprompted:     %s\ncontinuation: %s\n",
                    eval::tokens_str(held[example].transcript).c_str(), eval::tokens_str(r.prompted).c_str(),
                    eval::tokens_str(r.continuation).c_str());
      }
    }
    run.write_manifest(cmd, text, seed);
    return kOk;
  } catch (const train::UnknownPresetError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUnknownPreset;
  } catch (const MissingFileError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissingFile;
  } catch (const train::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalidConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

}  // namespace blspkd::cli
