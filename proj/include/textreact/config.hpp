#pragma once

// Flat key=value run configuration shared by every CLI subcommand.
// Unknown keys are rejected; command-line flags override file values.

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "textreact/chem.hpp"  // fnv1a
#include "textreact/nn.hpp"

namespace textreact::config {

enum class ConfigErrorKind { UnknownKey, MissingRequired, TypeError, BadFile };

struct ConfigError : std::runtime_error {
  ConfigErrorKind kind;
  std::string key;
  ConfigError(ConfigErrorKind k, const std::string& key_, const std::string& msg)
      : std::runtime_error(msg), kind(k), key(key_) {}
};

struct RunConfig {
  // task + paths
  std::string task = "rcr";  // rcr | retro_tf | retro_tb
  std::string corpus, dataset, splits, vocab, index;
  std::string retriever_checkpoint, predictor_checkpoint;
  std::string neighbors, out_dir = ".";
  // model
  int d_model = 64, n_heads = 4, n_layers = 2, d_ff = 128, max_len = 256;
  // policy
  double alpha = 0.8;
  int K = 10, k = 3;
  // masking
  double poisson_lambda = 3.0, mask_ratio = 0.15;
  int max_span = 10;
  // optimization
  double lr = 1e-4, warmup = 0.1, lambda1 = 0.1, smiles_aug = 0.5;
  std::string decay = "linear";  // linear | cosine
  int epochs = 10, batch_size = 32;
  // retrieval / decoding
  int beam_width = 10, topn = 10;
  int max_text_len = 64, max_chem_len = 96;
  std::string predict_mode = "joint";  // joint | ensemble
  std::string input_mode = "full";     // full | smiles_only | text_only
  std::string baseline = "none";       // none | rxnfp
  std::string scenario = "full";  // full | gold_removed | ts_corpus
  int year_cutoff = 0;
  // synthetic generation
  int n_reactions = 2000, n_types = 40, n_fragments = 16;
  double condition_noise = 0.05, distractor_rate = 0.5;
  int year_min = 2010, year_max = 2016;
  // split
  std::string split_kind = "random";  // random | time
  double train_ratio = 0.8, valid_ratio = 0.1, test_ratio = 0.1;
  int train_before = 2015, valid_year = 2015, test_year = 2016;
  double train_frac = 1.0;
  // seed is mandatory: no default marker
  long seed = -1;

  std::map<std::string, std::string> as_map() const;
  std::string hash() const;
  void validate() const;
};

namespace detail {

inline void assign(const std::string&, const std::string& value, std::string& out) {
  out = value;
}

inline void assign(const std::string& key, const std::string& value, int& out) {
  std::size_t used = 0;
  try {
    out = std::stoi(value, &used);
  } catch (...) {
    throw ConfigError(ConfigErrorKind::TypeError, key, key + ": not an integer");
  }
  if (used != value.size())
    throw ConfigError(ConfigErrorKind::TypeError, key, key + ": not an integer");
}

inline void assign(const std::string& key, const std::string& value, long& out) {
  std::size_t used = 0;
  try {
    out = std::stol(value, &used);
  } catch (...) {
    throw ConfigError(ConfigErrorKind::TypeError, key, key + ": not an integer");
  }
  if (used != value.size())
    throw ConfigError(ConfigErrorKind::TypeError, key, key + ": not an integer");
}

inline void assign(const std::string& key, const std::string& value, double& out) {
  std::size_t used = 0;
  try {
    out = std::stod(value, &used);
  } catch (...) {
    throw ConfigError(ConfigErrorKind::TypeError, key, key + ": not a number");
  }
  if (used != value.size())
    throw ConfigError(ConfigErrorKind::TypeError, key, key + ": not a number");
}

}  // namespace detail

// every settable key, bound to its field
#define TEXTREACT_CONFIG_KEYS(X)                                             \
  X(task) X(corpus) X(dataset) X(splits) X(vocab) X(index)                   \
  X(retriever_checkpoint) X(predictor_checkpoint) X(neighbors) X(out_dir)    \
  X(d_model) X(n_heads) X(n_layers) X(d_ff) X(max_len)                       \
  X(alpha) X(K) X(k)                                                         \
  X(poisson_lambda) X(mask_ratio) X(max_span)                                \
  X(lr) X(warmup) X(lambda1) X(smiles_aug) X(decay) X(epochs) X(batch_size)  \
  X(beam_width) X(topn) X(max_text_len) X(max_chem_len)                      \
  X(predict_mode) X(input_mode) X(baseline)                                  \
  X(scenario) X(year_cutoff)                                                 \
  X(n_reactions) X(n_types) X(n_fragments) X(condition_noise)                \
  X(distractor_rate) X(year_min) X(year_max)                                 \
  X(split_kind) X(train_ratio) X(valid_ratio) X(test_ratio)                  \
  X(train_before) X(valid_year) X(test_year) X(train_frac)                   \
  X(seed)

inline void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (false) {
  }
#define TEXTREACT_SET(field)                                \
  else if (key == #field) {                                 \
    detail::assign(key, value, cfg.field);                   \
  }
  TEXTREACT_CONFIG_KEYS(TEXTREACT_SET)
#undef TEXTREACT_SET
  else throw ConfigError(ConfigErrorKind::UnknownKey, key, "unknown key: " + key);
}

inline std::map<std::string, std::string> RunConfig::as_map() const {
  std::map<std::string, std::string> m;
  auto fmt = [](auto v) {
    if constexpr (std::is_same_v<decltype(v), std::string>) return v;
    else if constexpr (std::is_same_v<decltype(v), double>) {
      std::ostringstream os;
      os << std::setprecision(17) << v;
      return os.str();
    } else {
      return std::to_string(v);
    }
  };
#define TEXTREACT_GET(field) m[#field] = fmt(field);
  TEXTREACT_CONFIG_KEYS(TEXTREACT_GET)
#undef TEXTREACT_GET
  return m;
}

inline std::string RunConfig::hash() const {
  std::string blob;
  for (const auto& [k, v] : as_map()) blob += k + "=" + v + "\n";
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << chem::fnv1a(blob);
  return os.str();
}

inline void RunConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& msg) -> void {
    throw ConfigError(ConfigErrorKind::TypeError, key, key + ": " + msg);
  };
  if (task != "rcr" && task != "retro_tf" && task != "retro_tb")
    fail("task", "must be rcr, retro_tf, or retro_tb");
  if (seed < 0)
    throw ConfigError(ConfigErrorKind::MissingRequired, "seed", "seed is required");
  if (alpha < 0.0 || alpha > 1.0) fail("alpha", "must be in [0,1]");
  if (k < 0 || K < 1 || k > K) fail("k", "need 0 <= k <= K");
  if (k > 10) fail("k", "at most 10 neighbor markers exist");
  if (mask_ratio <= 0.0 || mask_ratio >= 1.0) fail("mask_ratio", "must be in (0,1)");
  if (poisson_lambda <= 0.0) fail("poisson_lambda", "must be positive");
  if (max_span < 1) fail("max_span", "must be >= 1");
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
    fail("d_model", "must be positive and divisible by n_heads");
  if (n_layers < 1 || d_ff < 1 || max_len < 8) fail("n_layers", "bad model shape");
  if (lr <= 0.0) fail("lr", "must be positive");
  if (warmup < 0.0 || warmup > 1.0) fail("warmup", "must be in [0,1]");
  if (lambda1 < 0.0) fail("lambda1", "must be >= 0");
  if (smiles_aug < 0.0 || smiles_aug > 1.0) fail("smiles_aug", "must be in [0,1]");
  if (decay != "linear" && decay != "cosine") fail("decay", "linear or cosine");
  if (epochs < 0 || batch_size < 1) fail("epochs", "bad optimization params");
  if (beam_width < 1 || topn < 1) fail("beam_width", "must be >= 1");
  if (scenario != "full" && scenario != "gold_removed" && scenario != "ts_corpus")
    fail("scenario", "full, gold_removed, or ts_corpus");
  if (predict_mode != "joint" && predict_mode != "ensemble")
    fail("predict_mode", "joint or ensemble");
  if (input_mode != "full" && input_mode != "smiles_only" && input_mode != "text_only")
    fail("input_mode", "full, smiles_only, or text_only");
  if (baseline != "none" && baseline != "rxnfp") fail("baseline", "none or rxnfp");
  if (split_kind != "random" && split_kind != "time")
    fail("split_kind", "random or time");
  if (std::abs(train_ratio + valid_ratio + test_ratio - 1.0) > 1e-9)
    fail("train_ratio", "ratios must sum to 1");
  if (train_frac <= 0.0 || train_frac > 1.0) fail("train_frac", "must be in (0,1]");
}

inline RunConfig parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is)
    throw ConfigError(ConfigErrorKind::BadFile, path, "cannot open config: " + path);
  RunConfig cfg;
  std::string line;
  long lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::size_t hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line.resize(hash_pos);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(ConfigErrorKind::BadFile, path,
                        "config line " + std::to_string(lineno) + ": expected key = value");
    set_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

// --key value overrides, applied after the file
inline void apply_overrides(RunConfig& cfg, const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0)
      throw ConfigError(ConfigErrorKind::BadFile, a, "expected --key value, got " + a);
    if (i + 1 >= args.size())
      throw ConfigError(ConfigErrorKind::BadFile, a, "missing value for " + a);
    set_key(cfg, a.substr(2), args[++i]);
  }
}

}  // namespace textreact::config
