#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "blspkd/cformer/adapter.hpp"
#include "blspkd/losses/losses.hpp"
#include "blspkd/plora/plora.hpp"

namespace blspkd::train {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UnknownPresetError : ConfigError {
  using ConfigError::ConfigError;
};

struct Tunable {
  bool encoder = false;
  bool adapter = true;
  bool llm_plora = false;
};

struct DataSet {
  bool asr = false;
  bool cw = false;
};

// One experiment row. Defaults are the toy hyperparameters.
struct TrainConfig {
  std::string preset = "custom";
  model::AdapterKind adapter = model::AdapterKind::cformer;
  std::array<bool, loss::kTermCount> losses{};
  DataSet data;
  Tunable tunable;
  loss::Weights weights;

  double lr = 3e-4;
  std::size_t steps = 3000;
  std::size_t batch = 16;
  std::uint64_t seed = 1;
  double warmup_frac = 0.05;
  std::string optimizer = "adam";  // adam | sgd
  std::size_t log_every = 50;

  model::PLoRAConfig plora;

  bool has(loss::Term t) const { return losses[static_cast<std::size_t>(t)]; }
  void enable(loss::Term t, bool on = true) { losses[static_cast<std::size_t>(t)] = on; }
  std::size_t warmup_steps() const { return static_cast<std::size_t>(warmup_frac * static_cast<double>(steps)); }
};

// Throws ConfigError describing the first violated constraint.
void validate(const TrainConfig& cfg);

// Preset order of the comparison table: baselines, then kd1..kd7.
const std::vector<std::string>& preset_names();
TrainConfig preset(const std::string& name);

// Applies one `key = value` setting. Unknown keys and malformed values throw.
void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value);

// Flat `key = value` text, `#` comments. A `preset` key, if present, is
// applied first; remaining keys override it.
TrainConfig parse_config(const std::string& text);
std::map<std::string, std::string> parse_key_values(const std::string& text);

// Canonical text form (stable key order); parse_config inverts it.
std::string to_text(const TrainConfig& cfg);

std::vector<std::string> split_list(const std::string& s);

}  // namespace blspkd::train
