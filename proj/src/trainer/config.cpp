#include "blspkd/trainer/config.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

namespace blspkd::train {

using loss::Term;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) {
    throw ConfigError("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

TrainConfig make(const std::string& name, model::AdapterKind a, std::initializer_list<Term> terms, bool asr,
                 bool cw) {
  TrainConfig c;
  c.preset = name;
  c.adapter = a;
  for (Term t : terms) c.enable(t);
  c.data.asr = asr;
  c.data.cw = cw;
  return c;
}

}  // namespace

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

void validate(const TrainConfig& c) {
  bool any = false;
  for (bool b : c.losses) any = any || b;
  if (!any) throw ConfigError("config: no loss terms selected");
  if (!c.data.asr && !c.data.cw) throw ConfigError("config: no training data selected");
  const bool cformer = c.adapter == model::AdapterKind::cformer;
  if ((c.has(Term::input_kl) || c.has(Term::asr) || c.has(Term::cif)) && !cformer) {
    throw ConfigError("config: cif, input_kl and asr losses need the cformer adapter");
  }
  if ((c.has(Term::resp_kl) || c.has(Term::resp_ce)) && !c.data.cw) {
    throw ConfigError("config: response losses need CW data");
  }
  if (c.data.asr && !(c.has(Term::input_kl) || c.has(Term::asr) || c.has(Term::cif))) {
    throw ConfigError("config: ASR data contributes no loss without cif, input_kl or asr");
  }
  if (!c.tunable.encoder && !c.tunable.adapter && !c.tunable.llm_plora) {
    throw ConfigError("config: nothing is tunable");
  }
  if (c.batch == 0) throw ConfigError("config: batch must be positive");
  if (c.lr < 0.0) throw ConfigError("config: lr must be non-negative");
  if (c.warmup_frac < 0.0 || c.warmup_frac > 1.0) throw ConfigError("config: warmup must be in [0, 1]");
  if (c.optimizer != "adam" && c.optimizer != "sgd") {
    throw ConfigError("config: optimizer must be adam or sgd, got '" + c.optimizer + "'");
  }
  if (c.tunable.llm_plora && (c.plora.rank == 0 || c.plora.targets.empty())) {
    throw ConfigError("config: llm_plora needs a positive rank and at least one target");
  }
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"blsp", "cformer_llm", "kd1", "kd2", "kd3",
                                                 "kd4",  "kd5",         "kd6", "kd7"};
  return names;
}

TrainConfig preset(const std::string& name) {
  using model::AdapterKind;
  if (name == "blsp") return make(name, AdapterKind::cnn, {Term::resp_ce}, false, true);
  if (name == "cformer_llm") return make(name, AdapterKind::cformer, {Term::cif, Term::asr}, true, false);
  if (name == "kd1") return make(name, AdapterKind::cnn, {Term::resp_kl}, false, true);
  if (name == "kd2") return make(name, AdapterKind::cformer, {Term::cif, Term::resp_ce}, false, true);
  if (name == "kd3") return make(name, AdapterKind::cformer, {Term::cif, Term::resp_kl}, false, true);
  if (name == "kd4") return make(name, AdapterKind::cformer, {Term::cif, Term::input_kl}, true, false);
  if (name == "kd5" || name == "kd6" || name == "kd7") {
    TrainConfig c = make(name, AdapterKind::cformer, {Term::cif, Term::input_kl, Term::resp_kl}, true, true);
    c.tunable.encoder = name != "kd5";
    c.tunable.llm_plora = name == "kd7";
    return c;
  }
  std::string valid;
  for (const auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw UnknownPresetError("unknown preset '" + name + "'; valid presets: " + valid);
}

void apply_setting(TrainConfig& c, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "preset") {
    c = preset(v);
  } else if (key == "name") {
    c.preset = v;
  } else if (key == "adapter") {
    try {
      c.adapter = model::adapter_from_name(v);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  } else if (key == "losses") {
    c.losses = {};
    for (const auto& t : split_list(v)) {
      try {
        c.enable(loss::term_from_name(t));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
      }
    }
  } else if (key == "data") {
    c.data = {};
    for (const auto& d : split_list(v)) {
      if (d == "asr") c.data.asr = true;
      else if (d == "cw") c.data.cw = true;
      else throw ConfigError("config: unknown data set '" + d + "' (expected asr, cw)");
    }
  } else if (key == "tune.encoder") {
    c.tunable.encoder = parse_bool(key, v);
  } else if (key == "tune.adapter") {
    c.tunable.adapter = parse_bool(key, v);
  } else if (key == "tune.llm_plora") {
    c.tunable.llm_plora = parse_bool(key, v);
  } else if (key == "lr") {
    c.lr = parse_double(key, v);
  } else if (key == "steps") {
    c.steps = parse_uint(key, v);
  } else if (key == "batch") {
    c.batch = parse_uint(key, v);
  } else if (key == "seed") {
    c.seed = parse_uint(key, v);
  } else if (key == "warmup") {
    c.warmup_frac = parse_double(key, v);
  } else if (key == "optimizer") {
    c.optimizer = v;
  } else if (key == "log_every") {
    c.log_every = parse_uint(key, v);
  } else if (key.rfind("lambda.", 0) == 0) {
    try {
      c.weights[loss::term_from_name(key.substr(7))] = parse_double(key, v);
    } catch (const std::invalid_argument&) {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  } else if (key == "plora.rank") {
    c.plora.rank = parse_uint(key, v);
  } else if (key == "plora.scale") {
    c.plora.scale = parse_double(key, v);
  } else if (key == "plora.targets") {
    c.plora.targets = split_list(v);
  } else {
    throw ConfigError("config: unknown key '" + key + "'");
  }
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (kv.count(key)) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

TrainConfig parse_config(const std::string& text) {
  auto kv = parse_key_values(text);
  TrainConfig c;
  if (auto it = kv.find("preset"); it != kv.end()) {
    c = preset(it->second);
    kv.erase(it);
  }
  for (const auto& [k, v] : kv) apply_setting(c, k, v);
  return c;
}

std::string to_text(const TrainConfig& c) {
  std::ostringstream os;
  std::string losses, data;
  for (Term t : loss::kAllTerms)
    if (c.has(t)) losses += (losses.empty() ? "" : ",") + std::string(loss::term_name(t));
  if (c.data.asr) data = "asr";
  if (c.data.cw) data += data.empty() ? "cw" : ",cw";
  std::string targets;
  for (const auto& t : c.plora.targets) targets += (targets.empty() ? "" : ",") + t;
  os << "name = " << c.preset << "\n"
     << "adapter = " << model::adapter_name(c.adapter) << "\n"
     << "losses = " << losses << "\n"
     << "data = " << data << "\n"
     << "tune.encoder = " << (c.tunable.encoder ? "true" : "false") << "\n"
     << "tune.adapter = " << (c.tunable.adapter ? "true" : "false") << "\n"
     << "tune.llm_plora = " << (c.tunable.llm_plora ? "true" : "false") << "\n"
     << "lr = " << fmt(c.lr) << "\n"
     << "steps = " << c.steps << "\n"
     << "batch = " << c.batch << "\n"
     << "seed = " << c.seed << "\n"
     << "warmup = " << fmt(c.warmup_frac) << "\n"
     << "optimizer = " << c.optimizer << "\n"
     << "log_every = " << c.log_every << "\n";
  for (Term t : loss::kAllTerms) os << "lambda." << loss::term_name(t) << " = " << fmt(c.weights[t]) << "\n";
  os << "plora.rank = " << c.plora.rank << "\n"
     << "plora.scale = " << fmt(c.plora.scale) << "\n"
     << "plora.targets = " << targets << "\n";
  return os.str();
}

}  // namespace blspkd::train
