#pragma once

// Corpus/dataset ingestion (JSONL), gold-text pairing, random and time
// splits, shared token vocabulary, per-slot condition vocabularies, and
// the synthetic benchmark generator.

#include <array>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "textreact/chem.hpp"
#include "textreact/rng.hpp"

namespace textreact::data {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

enum class DataErrorKind {
  MalformedLine,
  DuplicateId,
  UnparseableSmiles,
  EmptyDataset,
  EmptySplitPart,
  InvalidParams,
  MissingGold,
  UnknownId,
};

struct DataError : std::runtime_error {
  DataErrorKind kind;
  long lineno = 0;
  DataError(DataErrorKind k, const std::string& msg, long line = 0)
      : std::runtime_error(msg), kind(k), lineno(line) {}
};

// ----------------------------------------------------------------- corpus

struct Paragraph {
  std::string id;
  std::string text;
  int year = 0;
};

struct Corpus {
  std::vector<Paragraph> paragraphs;
  std::unordered_map<std::string, std::size_t> by_id;

  void add(Paragraph p) {
    if (by_id.count(p.id))
      throw DataError(DataErrorKind::DuplicateId, "duplicate paragraph id: " + p.id);
    by_id[p.id] = paragraphs.size();
    paragraphs.push_back(std::move(p));
  }
  const Paragraph* find(const std::string& id) const {
    auto it = by_id.find(id);
    return it == by_id.end() ? nullptr : &paragraphs[it->second];
  }
  std::size_t size() const { return paragraphs.size(); }
};

inline Corpus load_corpus(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError(DataErrorKind::MalformedLine, "cannot open corpus: " + path);
  Corpus corpus;
  std::string line;
  long lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      throw DataError(DataErrorKind::MalformedLine,
                      "corpus line " + std::to_string(lineno) + ": invalid JSON", lineno);
    }
    if (!j.contains("id") || !j.contains("text") || !j.contains("year") ||
        !j["id"].is_string() || !j["text"].is_string() ||
        !j["year"].is_number_integer())
      throw DataError(DataErrorKind::MalformedLine,
                      "corpus line " + std::to_string(lineno) + ": missing id/text/year",
                      lineno);
    Paragraph p{j["id"].get<std::string>(), j["text"].get<std::string>(),
                j["year"].get<int>()};
    if (p.text.empty())
      throw DataError(DataErrorKind::MalformedLine,
                      "corpus line " + std::to_string(lineno) + ": empty text", lineno);
    corpus.add(std::move(p));
  }
  return corpus;
}

inline void write_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream os(path);
  for (const auto& p : corpus.paragraphs) {
    ordered_json j;
    j["id"] = p.id;
    j["text"] = p.text;
    j["year"] = p.year;
    os << j.dump() << "\n";
  }
}

// ---------------------------------------------------------------- records

enum class Task { rcr, retro };

inline constexpr std::array<const char*, 5> kSlotNames = {
    "catalyst", "solvent1", "solvent2", "reagent1", "reagent2"};

// condition slots as surface strings; empty string means NONE
using ConditionStrings = std::array<std::string, 5>;

struct RetroCenter {
  enum class Kind { atom, bond };
  Kind kind = Kind::atom;
  int atom_a = 0;
  std::optional<int> atom_b;  // present iff kind == bond
};

struct ReactionRecord {
  std::string id;
  std::vector<std::string> reactants;
  std::string product;
  ConditionStrings conditions;            // rcr task
  std::optional<int> template_id;         // retro task, template-based
  std::optional<RetroCenter> center;      // present iff template_id present
  std::optional<std::string> text_id;     // gold paragraph
  int year = 0;
};

struct Dataset {
  Task task = Task::rcr;
  std::vector<ReactionRecord> records;
  std::unordered_map<std::string, std::size_t> by_id;
  std::vector<std::string> unpaired_ids;  // records without a gold text

  void add(ReactionRecord r) {
    if (by_id.count(r.id))
      throw DataError(DataErrorKind::DuplicateId, "duplicate reaction id: " + r.id);
    by_id[r.id] = records.size();
    if (!r.text_id) unpaired_ids.push_back(r.id);
    records.push_back(std::move(r));
  }
  const ReactionRecord* find(const std::string& id) const {
    auto it = by_id.find(id);
    return it == by_id.end() ? nullptr : &records[it->second];
  }
};

inline Dataset load_reactions(const std::string& path, Task task,
                              const Corpus* corpus = nullptr) {
  std::ifstream is(path);
  if (!is) throw DataError(DataErrorKind::MalformedLine, "cannot open dataset: " + path);
  Dataset ds;
  ds.task = task;
  std::string line;
  long lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      throw DataError(DataErrorKind::MalformedLine,
                      "dataset line " + std::to_string(lineno) + ": invalid JSON",
                      lineno);
    }
    auto malformed = [&](const std::string& what) -> DataError {
      return DataError(DataErrorKind::MalformedLine,
                       "dataset line " + std::to_string(lineno) + ": " + what, lineno);
    };
    if (!j.contains("id") || !j.contains("product") || !j.contains("reactants") ||
        !j.contains("year"))
      throw malformed("missing id/product/reactants/year");
    ReactionRecord r;
    r.id = j["id"].get<std::string>();
    r.product = j["product"].get<std::string>();
    for (const auto& s : j["reactants"]) r.reactants.push_back(s.get<std::string>());
    r.year = j["year"].get<int>();
    if (task == Task::rcr) {
      if (!j.contains("conditions") || !j["conditions"].is_object())
        throw malformed("missing conditions object");
      const auto& c = j["conditions"];
      for (std::size_t s = 0; s < kSlotNames.size(); ++s) {
        if (!c.contains(kSlotNames[s])) throw malformed(std::string("missing slot ") + kSlotNames[s]);
        r.conditions[s] = c[kSlotNames[s]].is_null() ? "" : c[kSlotNames[s]].get<std::string>();
      }
    } else {
      if (j.contains("template_id") && !j["template_id"].is_null()) {
        r.template_id = j["template_id"].get<int>();
        if (!j.contains("center") || j["center"].is_null())
          throw malformed("template_id without center");
        const auto& c = j["center"];
        RetroCenter center;
        const std::string kind = c["kind"].get<std::string>();
        center.kind = kind == "bond" ? RetroCenter::Kind::bond : RetroCenter::Kind::atom;
        const auto& atoms = c["atoms"];
        center.atom_a = atoms[0].get<int>();
        if (center.kind == RetroCenter::Kind::bond) {
          if (atoms.size() < 2) throw malformed("bond center needs two atoms");
          center.atom_b = atoms[1].get<int>();
        }
        r.center = center;
      }
    }
    if (j.contains("text_id") && !j["text_id"].is_null())
      r.text_id = j["text_id"].get<std::string>();
    // validate SMILES
    try {
      chem::parse_smiles(r.product);
      for (const auto& s : r.reactants) chem::parse_smiles(s);
    } catch (const chem::ChemError& e) {
      throw DataError(DataErrorKind::UnparseableSmiles,
                      "record " + r.id + ": " + e.what(), lineno);
    }
    // a text_id absent from the paired corpus means the record is unpaired
    if (corpus && r.text_id && !corpus->find(*r.text_id)) r.text_id.reset();
    ds.add(std::move(r));
  }
  return ds;
}

inline void write_reactions(const Dataset& ds, const std::string& path) {
  std::ofstream os(path);
  for (const auto& r : ds.records) {
    ordered_json j;
    j["id"] = r.id;
    j["reactants"] = r.reactants;
    j["product"] = r.product;
    if (ds.task == Task::rcr) {
      ordered_json c;
      for (std::size_t s = 0; s < kSlotNames.size(); ++s)
        c[kSlotNames[s]] = r.conditions[s];
      j["conditions"] = c;
    } else if (r.template_id) {
      j["template_id"] = *r.template_id;
      ordered_json c;
      c["kind"] = r.center->kind == RetroCenter::Kind::bond ? "bond" : "atom";
      std::vector<int> atoms = {r.center->atom_a};
      if (r.center->atom_b) atoms.push_back(*r.center->atom_b);
      c["atoms"] = atoms;
      j["center"] = c;
    }
    if (r.text_id) j["text_id"] = *r.text_id;
    j["year"] = r.year;
    os << j.dump() << "\n";
  }
}

// ----------------------------------------------------------------- splits

struct DatasetSplit {
  std::vector<std::string> train, valid, test;
};

inline DatasetSplit make_random_split(std::vector<std::string> ids,
                                      std::array<double, 3> ratios, std::uint64_t seed) {
  if (ids.empty()) throw DataError(DataErrorKind::EmptyDataset, "random split: no ids");
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9)
    throw DataError(DataErrorKind::InvalidParams, "split ratios must sum to 1");
  Rng rng(seed);
  rng.shuffle(ids);
  const std::size_t n = ids.size();
  const std::size_t c1 = static_cast<std::size_t>(std::llround(ratios[0] * n));
  const std::size_t c2 =
      static_cast<std::size_t>(std::llround((ratios[0] + ratios[1]) * n));
  DatasetSplit split;
  split.train.assign(ids.begin(), ids.begin() + c1);
  split.valid.assign(ids.begin() + c1, ids.begin() + c2);
  split.test.assign(ids.begin() + c2, ids.end());
  return split;
}

struct TimeSplitResult {
  DatasetSplit split;
  std::size_t dropped = 0;  // records outside every window
};

inline TimeSplitResult make_time_split(const std::vector<ReactionRecord>& records,
                                       int train_before, const std::set<int>& valid_years,
                                       const std::set<int>& test_years) {
  TimeSplitResult out;
  for (const auto& r : records) {
    if (r.year < train_before)
      out.split.train.push_back(r.id);
    else if (valid_years.count(r.year))
      out.split.valid.push_back(r.id);
    else if (test_years.count(r.year))
      out.split.test.push_back(r.id);
    else
      ++out.dropped;
  }
  if (out.split.train.empty() || out.split.valid.empty() || out.split.test.empty())
    throw DataError(DataErrorKind::EmptySplitPart, "time split produced an empty part");
  return out;
}

inline void write_split(const DatasetSplit& s, const std::string& path) {
  ordered_json j;
  j["train"] = s.train;
  j["valid"] = s.valid;
  j["test"] = s.test;
  std::ofstream os(path);
  os << j.dump(2) << "\n";
}

inline DatasetSplit load_split(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError(DataErrorKind::MalformedLine, "cannot open split: " + path);
  json j = json::parse(is);
  DatasetSplit s;
  for (const auto& id : j["train"]) s.train.push_back(id.get<std::string>());
  for (const auto& id : j["valid"]) s.valid.push_back(id.get<std::string>());
  for (const auto& id : j["test"]) s.test.push_back(id.get<std::string>());
  return s;
}

// ------------------------------------------------------------------ vocab

// One token vocabulary shared by SMILES and text. Words that tokenize as
// SMILES are expanded into SMILES tokens so molecule mentions inside
// paragraphs share token space with chemistry inputs.
struct Vocabs {
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kSep = 2;
  static constexpr int kMask = 3;
  static constexpr int kUnk = 4;
  static constexpr int kEos = 5;
  static constexpr int kNb0 = 6;
  static constexpr int kNumNb = 10;
  static constexpr int kNumSpecials = kNb0 + kNumNb;  // 16

  std::vector<std::string> tokens;  // id -> token, specials first
  std::unordered_map<std::string, int> token_to_id;
  std::array<std::vector<std::string>, 5> slot_tokens;  // id 0 = NONE, 1 = [UNK]
  std::array<std::unordered_map<std::string, int>, 5> slot_to_id;
  int n_templates = 0;

  static constexpr int kSlotNone = 0;
  static constexpr int kSlotUnk = 1;

  int size() const { return static_cast<int>(tokens.size()); }
  int nb_id(int j) const {
    if (j < 0 || j >= kNumNb)
      throw DataError(DataErrorKind::InvalidParams, "neighbor marker index out of range");
    return kNb0 + j;
  }
  int id(const std::string& tok) const {
    auto it = token_to_id.find(tok);
    return it == token_to_id.end() ? kUnk : it->second;
  }
  int slot_id(std::size_t slot, const std::string& value) const {
    if (value.empty()) return kSlotNone;
    auto it = slot_to_id[slot].find(value);
    return it == slot_to_id[slot].end() ? kSlotUnk : it->second;
  }
  std::array<int, 5> encode_conditions(const ConditionStrings& c) const {
    std::array<int, 5> out;
    for (std::size_t s = 0; s < 5; ++s) out[s] = slot_id(s, c[s]);
    return out;
  }
  const std::string& slot_token(std::size_t slot, int id) const {
    return slot_tokens[slot][static_cast<std::size_t>(id)];
  }
  int slot_size(std::size_t slot) const {
    return static_cast<int>(slot_tokens[slot].size());
  }
};

// whitespace split with leading/trailing punctuation peeled off
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream is(text);
  std::string w;
  auto is_punct = [](char c) {
    return c == '.' || c == ',' || c == ';' || c == ':' || c == '!' || c == '?';
  };
  while (is >> w) {
    std::size_t b = 0, e = w.size();
    while (b < e && is_punct(w[b])) words.push_back(std::string(1, w[b++]));
    std::vector<std::string> tail;
    while (e > b && is_punct(w[e - 1])) tail.push_back(std::string(1, w[--e]));
    if (e > b) words.push_back(w.substr(b, e - b));
    for (auto it = tail.rbegin(); it != tail.rend(); ++it) words.push_back(*it);
  }
  return words;
}

inline std::vector<std::string> tokenize_text(const std::string& text) {
  std::vector<std::string> out;
  for (const auto& w : split_words(text)) {
    bool as_smiles = false;
    try {
      auto toks = chem::tokenize_smiles(w);
      as_smiles = true;
      for (const auto& t : toks) out.push_back(t.text);
    } catch (const chem::ChemError&) {
      as_smiles = false;
    }
    if (!as_smiles) out.push_back(w);
  }
  return out;
}

inline std::vector<std::string> tokenize_smiles_texts(const std::string& smiles) {
  std::vector<std::string> out;
  for (const auto& t : chem::tokenize_smiles(smiles)) out.push_back(t.text);
  return out;
}

// Token vocabulary from the corpus plus the given (training) records;
// slot vocabularies and the template count from the records only.
inline Vocabs build_vocabs(const std::vector<const ReactionRecord*>& train_records,
                           const Corpus& corpus, int min_freq = 1) {
  Vocabs v;
  v.tokens = {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "[EOS]"};
  for (int j = 0; j < Vocabs::kNumNb; ++j)
    v.tokens.push_back("[NB" + std::to_string(j) + "]");

  std::unordered_map<std::string, long> freq;
  for (const auto& p : corpus.paragraphs)
    for (const auto& t : tokenize_text(p.text)) ++freq[t];
  for (const ReactionRecord* r : train_records) {
    for (const auto& t : tokenize_smiles_texts(r->product)) ++freq[t];
    for (const auto& s : r->reactants)
      for (const auto& t : tokenize_smiles_texts(s)) ++freq[t];
  }
  std::vector<std::string> kept;
  for (const auto& [tok, f] : freq)
    if (f >= min_freq) kept.push_back(tok);
  std::sort(kept.begin(), kept.end());
  for (auto& t : kept) v.tokens.push_back(t);
  for (std::size_t i = 0; i < v.tokens.size(); ++i)
    v.token_to_id[v.tokens[i]] = static_cast<int>(i);

  for (std::size_t s = 0; s < 5; ++s) v.slot_tokens[s] = {"", "[UNK]"};
  std::array<std::set<std::string>, 5> observed;
  int max_template = -1;
  for (const ReactionRecord* r : train_records) {
    for (std::size_t s = 0; s < 5; ++s)
      if (!r->conditions[s].empty()) observed[s].insert(r->conditions[s]);
    if (r->template_id) max_template = std::max(max_template, *r->template_id);
  }
  for (std::size_t s = 0; s < 5; ++s)
    for (const auto& t : observed[s]) v.slot_tokens[s].push_back(t);
  for (std::size_t s = 0; s < 5; ++s)
    for (std::size_t i = 0; i < v.slot_tokens[s].size(); ++i)
      v.slot_to_id[s][v.slot_tokens[s][i]] = static_cast<int>(i);
  v.n_templates = max_template + 1;
  return v;
}

inline void save_vocabs(const Vocabs& v, const std::string& path) {
  ordered_json j;
  j["tokens"] = v.tokens;
  for (std::size_t s = 0; s < 5; ++s) j[std::string("slot_") + kSlotNames[s]] = v.slot_tokens[s];
  j["n_templates"] = v.n_templates;
  std::ofstream os(path);
  os << j.dump() << "\n";
}

inline Vocabs load_vocabs(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError(DataErrorKind::MalformedLine, "cannot open vocab: " + path);
  json j = json::parse(is);
  Vocabs v;
  for (const auto& t : j["tokens"]) v.tokens.push_back(t.get<std::string>());
  for (std::size_t i = 0; i < v.tokens.size(); ++i)
    v.token_to_id[v.tokens[i]] = static_cast<int>(i);
  for (std::size_t s = 0; s < 5; ++s) {
    for (const auto& t : j[std::string("slot_") + kSlotNames[s]])
      v.slot_tokens[s].push_back(t.get<std::string>());
    for (std::size_t i = 0; i < v.slot_tokens[s].size(); ++i)
      v.slot_to_id[s][v.slot_tokens[s][i]] = static_cast<int>(i);
  }
  v.n_templates = j["n_templates"].get<int>();
  return v;
}

// ------------------------------------------------------------- synthetic

struct SynthParams {
  int n_reactions = 2000;
  int n_types = 40;
  int n_fragments = 16;  // small pool: types are fragment pairs, so
                         // fragments recur across types
  double distractor_rate = 0.5;
  double condition_noise = 0.05;
  int year_min = 2010;
  int year_max = 2016;
};

namespace detail {

inline const std::vector<std::string>& catalyst_words() {
  static const std::vector<std::string> v = {"palladium", "copper",  "nickel",
                                             "platinum",  "ruthenium", "iron",
                                             "cobalt",    "rhodium"};
  return v;
}
inline const std::vector<std::string>& solvent_words() {
  static const std::vector<std::string> v = {"ethanol",  "methanol", "toluene",
                                             "water",    "acetone",  "dioxane",
                                             "hexane",   "ether",    "dmf", "thf"};
  return v;
}
inline const std::vector<std::string>& reagent_words() {
  static const std::vector<std::string> v = {"triethylamine", "soda",     "potash",
                                             "hydrochloride", "lye",      "bromine",
                                             "chlorine",      "ammonia",  "zinc",
                                             "magnesium"};
  return v;
}

// small valid SMILES chain/ring, deterministic per rng state
inline std::string random_fragment(Rng& rng) {
  static const char* elements = "CCCNO";
  std::string s;
  if (rng.bernoulli(0.25)) {
    // ring fragment
    if (rng.bernoulli(0.5)) {
      s = "c1ccccc1";
    } else {
      const int size = 3 + static_cast<int>(rng.uniform_int(3));  // 3..5
      s = "C1";
      for (int i = 1; i < size - 1; ++i) s += elements[rng.uniform_int(5)] == 'O' ? 'O' : 'C';
      s += "C1";
    }
    // chain tail
    const int tail = 2 + static_cast<int>(rng.uniform_int(3));
    for (int i = 0; i < tail; ++i) s += elements[rng.uniform_int(5)];
  } else {
    const int len = 6 + static_cast<int>(rng.uniform_int(4));  // 6..9
    for (int i = 0; i < len; ++i) s += elements[rng.uniform_int(5)];
    if (rng.bernoulli(0.3) && s.size() >= 2) {
      const std::size_t pos = 1 + rng.uniform_int(s.size() - 1);
      const char branch = elements[rng.uniform_int(5)];
      s.insert(pos, std::string("(") + branch + ")");
    }
  }
  return s;
}

}  // namespace detail

// Synthetic benchmark: reactions are fragment pairs drawn per latent type;
// conditions are a deterministic function of the type (noise-perturbed);
// the gold paragraph embeds the reactant/product SMILES strings and the
// condition words, padded with distractor sentences.
inline std::pair<Corpus, Dataset> generate_synthetic(const SynthParams& params,
                                                     std::uint64_t seed) {
  if (params.n_reactions < 0 || params.n_types < 0 ||
      (params.n_reactions > 0 &&
       (params.n_types < 1 || params.n_types > params.n_reactions)) ||
      params.n_fragments < 2 || params.condition_noise < 0.0 ||
      params.condition_noise > 1.0 || params.distractor_rate < 0.0 ||
      params.distractor_rate > 1.0 || params.year_max < params.year_min)
    throw DataError(DataErrorKind::InvalidParams, "generate_synthetic: invalid params");

  Corpus corpus;
  Dataset ds;
  ds.task = Task::rcr;
  if (params.n_reactions == 0) return {corpus, ds};

  Rng rng(seed);

  // fragment pool, halves A and B
  std::vector<std::string> fragments;
  std::unordered_set<std::string> seen;
  while (static_cast<int>(fragments.size()) < params.n_fragments) {
    std::string f = detail::random_fragment(rng);
    if (seen.insert(f).second) fragments.push_back(f);
  }
  const int half = params.n_fragments / 2;

  // latent types: fragment pair + condition tuple
  struct TypeDef {
    int frag_a, frag_b;
    ConditionStrings conditions;
  };
  if (static_cast<long>(half) * (params.n_fragments - half) < params.n_types)
    throw DataError(DataErrorKind::InvalidParams,
                    "generate_synthetic: not enough fragment pairs for n_types");
  std::vector<TypeDef> types(params.n_types);
  std::unordered_set<long> pair_seen;
  for (auto& t : types) {
    do {
      t.frag_a = static_cast<int>(rng.uniform_int(half));
      t.frag_b = half + static_cast<int>(rng.uniform_int(params.n_fragments - half));
    } while (!pair_seen.insert(static_cast<long>(t.frag_a) * params.n_fragments +
                               t.frag_b)
                  .second);
    const auto& cats = detail::catalyst_words();
    const auto& sols = detail::solvent_words();
    const auto& regs = detail::reagent_words();
    t.conditions[0] = cats[rng.uniform_int(cats.size())];
    t.conditions[1] = sols[rng.uniform_int(sols.size())];
    if (rng.bernoulli(0.5))
      do t.conditions[2] = sols[rng.uniform_int(sols.size())];
      while (t.conditions[2] == t.conditions[1]);
    t.conditions[3] = regs[rng.uniform_int(regs.size())];
    if (rng.bernoulli(0.5))
      do t.conditions[4] = regs[rng.uniform_int(regs.size())];
      while (t.conditions[4] == t.conditions[3]);
  }

  // long enough that reactant pairs can be made unique per reaction; chars
  // are sorted so distinct decorations always differ as token multisets
  auto decoration = [&]() {
    static const char* el = "CNOS";
    std::string d;
    const int n = 3 + static_cast<int>(rng.uniform_int(2));
    for (int i = 0; i < n; ++i) d += el[rng.uniform_int(4)];
    std::sort(d.begin(), d.end());
    return d;
  };
  std::unordered_set<std::string> product_seen;

  auto perturb = [&](ConditionStrings c) {
    const std::size_t slot = rng.uniform_int(5);
    const auto& pool = slot == 0   ? detail::catalyst_words()
                       : slot <= 2 ? detail::solvent_words()
                                   : detail::reagent_words();
    std::string next = pool[rng.uniform_int(pool.size())];
    if ((slot == 2 || slot == 4) && rng.bernoulli(0.3)) next = "";
    c[slot] = next;
    return c;
  };

  auto distractor = [&]() {
    switch (rng.uniform_int(4)) {
      case 0:
        return "the mixture was stirred for " +
               std::to_string(2 + rng.uniform_int(23)) + " hours at " +
               std::to_string(20 + rng.uniform_int(101)) + " degrees .";
      case 1:
        return std::string("the residue was purified by column chromatography .");
      case 2:
        return std::string("the organic layer was dried and concentrated .");
      default:
        return "the yield was " + std::to_string(40 + rng.uniform_int(60)) +
               " percent .";
    }
  };

  for (int i = 0; i < params.n_reactions; ++i) {
    const int type_idx =
        i < params.n_types ? i : static_cast<int>(rng.uniform_int(params.n_types));
    const TypeDef& type = types[type_idx];
    ReactionRecord r;
    {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "rxn%05d", i);
      r.id = buf;
    }
    // products must differ even as character multisets: the retrieval
    // signal should not hinge on token order alone
    std::string r1, r2;
    for (;;) {
      r1 = fragments[type.frag_a] + decoration();
      r2 = fragments[type.frag_b] + decoration();
      std::string key = r1 + r2;
      std::sort(key.begin(), key.end());
      if (product_seen.insert(key).second) break;
    }
    r.reactants = {r1, r2};
    r.product = r1 + r2;
    r.conditions = type.conditions;
    if (rng.bernoulli(params.condition_noise)) r.conditions = perturb(r.conditions);
    r.year = params.year_min +
             static_cast<int>(rng.uniform_int(
                 static_cast<std::uint64_t>(params.year_max - params.year_min + 1)));
    const std::string text_id = "txt" + r.id.substr(3);
    r.text_id = text_id;

    // gold paragraph; a fixed-format condition summary leads, then the
    // product so the discriminative tokens sit near the pooled position
    std::vector<std::string> sentences;
    {
      std::string s = "using " + r.conditions[0];
      if (!r.conditions[1].empty()) s += " in " + r.conditions[1];
      if (!r.conditions[2].empty()) s += " and " + r.conditions[2];
      if (!r.conditions[3].empty()) s += " with " + r.conditions[3];
      if (!r.conditions[4].empty()) s += " and " + r.conditions[4];
      s += " .";
      sentences.push_back(s);
    }
    sentences.push_back("preparation of " + r.product + " .");
    {
      std::string s = "a mixture of " + r1 + " and " + r2 + " was stirred";
      if (!r.conditions[1].empty()) s += " in " + r.conditions[1];
      if (!r.conditions[2].empty()) s += " and " + r.conditions[2];
      s += " .";
      sentences.push_back(s);
    }
    if (!r.conditions[0].empty())
      sentences.push_back(r.conditions[0] + " was added as the catalyst .");
    if (!r.conditions[3].empty()) {
      std::string s = "treatment with " + r.conditions[3];
      if (!r.conditions[4].empty()) s += " and " + r.conditions[4];
      s += " gave the crude material .";
      sentences.push_back(s);
    }
    sentences.push_back("the product " + r.product + " was isolated .");

    std::string text;
    for (std::size_t si = 0; si < sentences.size(); ++si) {
      if (si) text += ' ';
      text += sentences[si];
      if (rng.bernoulli(params.distractor_rate)) text += ' ' + distractor();
    }

    corpus.add(Paragraph{text_id, text, r.year});
    ds.add(std::move(r));
  }
  return {corpus, ds};
}

// reverse map from paragraph id to the reaction it describes
inline std::unordered_map<std::string, std::string> text_to_reaction_map(
    const Dataset& ds) {
  std::unordered_map<std::string, std::string> out;
  for (const auto& r : ds.records)
    if (r.text_id) out[*r.text_id] = r.id;
  return out;
}

}  // namespace textreact::data
