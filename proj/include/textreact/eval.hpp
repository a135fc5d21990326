#pragma once

// Evaluation scenarios, top-k metrics, the fingerprint nearest-neighbor
// baseline, and neighbor-distance analyses.

#include <iomanip>
#include <sstream>

#include "textreact/predictor.hpp"

namespace textreact::eval {

using data::ConditionStrings;
using data::Corpus;
using data::Dataset;
using data::ReactionRecord;
using data::Task;

enum class EvalErrorKind {
  EmptyResultCorpus,
  TaskMismatch,
  EmptyTrainSet,
  NoMappableNeighbors,
  EmptyInput,
};

struct EvalError : std::runtime_error {
  EvalErrorKind kind;
  EvalError(EvalErrorKind k, const std::string& msg)
      : std::runtime_error(msg), kind(k) {}
};

// ---------------------------------------------------------------- scenario

enum class ScenarioKind { full, gold_removed, ts_corpus };

struct Scenario {
  ScenarioKind kind = ScenarioKind::full;
  int year_cutoff = 0;  // ts_corpus
};

inline const char* scenario_name(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::full: return "full";
    case ScenarioKind::gold_removed: return "gold_removed";
    default: return "ts_corpus";
  }
}

// full = identity; gold_removed = corpus minus the test records' gold ids;
// ts_corpus = paragraphs with year <= cutoff
inline Corpus build_scenario(const Corpus& corpus, const Dataset& ds,
                             const std::vector<std::string>& test_ids,
                             const Scenario& scenario) {
  if (scenario.kind == ScenarioKind::full) return corpus;
  std::unordered_set<std::string> drop;
  if (scenario.kind == ScenarioKind::gold_removed) {
    for (const auto& id : test_ids) {
      const ReactionRecord* r = ds.find(id);
      if (r && r->text_id) drop.insert(*r->text_id);
    }
  }
  Corpus out;
  for (const auto& p : corpus.paragraphs) {
    if (scenario.kind == ScenarioKind::gold_removed && drop.count(p.id)) continue;
    if (scenario.kind == ScenarioKind::ts_corpus && p.year > scenario.year_cutoff)
      continue;
    out.add(p);
  }
  if (out.size() == 0)
    throw EvalError(EvalErrorKind::EmptyResultCorpus, "scenario left no paragraphs");
  return out;
}

// ------------------------------------------------------------------ top-k

struct MetricsReport {
  std::string task;
  std::string scenario;
  std::string split;
  std::vector<int> ks;
  std::map<int, double> accuracy;
  long n_records = 0;
  std::string config_hash;
};

// one record's ranked predictions, already decoded to a comparable form
struct RcrPrediction {
  std::array<int, predictor::kRcrSteps> slots{};
};
struct RetroPrediction {
  std::vector<std::string> reactants;  // template-free
  int template_id = -1;                // template-based
  int center_index = -1;
  bool center_is_bond = false;
};

inline bool rcr_match(const RcrPrediction& p,
                      const std::array<int, predictor::kRcrSteps>& gold) {
  return p.slots == gold;
}

inline std::vector<std::string> sorted_reactants(std::vector<std::string> v) {
  std::sort(v.begin(), v.end());
  return v;
}

// gold rank (0-based) per record, -1 when absent; predictions are
// deduplicated in rank order before matching
template <typename Pred, typename MatchFn>
std::vector<int> gold_ranks(const std::vector<std::vector<Pred>>& predictions,
                            const MatchFn& matches,
                            const std::function<std::string(const Pred&)>& key) {
  std::vector<int> ranks;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    int rank = -1;
    int kept = 0;
    std::unordered_set<std::string> seen;
    for (const Pred& p : predictions[i]) {
      if (!seen.insert(key(p)).second) continue;
      if (matches(i, p)) {
        rank = kept;
        break;
      }
      ++kept;
    }
    ranks.push_back(rank);
  }
  return ranks;
}

inline MetricsReport topk_from_ranks(const std::vector<int>& ranks,
                                     const std::vector<int>& ks) {
  if (ranks.empty())
    throw EvalError(EvalErrorKind::EmptyInput, "topk: no records");
  MetricsReport rep;
  rep.ks = ks;
  rep.n_records = static_cast<long>(ranks.size());
  for (int k : ks) {
    long hit = 0;
    for (int r : ranks)
      if (r >= 0 && r < k) ++hit;
    rep.accuracy[k] = static_cast<double>(hit) / static_cast<double>(ranks.size());
  }
  return rep;
}

// -------------------------------------------------------------- baseline

inline chem::Fingerprint record_reaction_fp(const ReactionRecord& r) {
  std::vector<chem::MolGraph> reactants;
  for (const auto& s : r.reactants) reactants.push_back(chem::parse_smiles(s));
  return chem::reaction_fingerprint(reactants, chem::parse_smiles(r.product));
}

// nearest training reactions by reaction-fingerprint L2 distance; their
// condition sets, deduplicated in distance order
struct FpBaseline {
  std::vector<const ReactionRecord*> records;
  std::vector<chem::Fingerprint> fps;

  void build(const std::vector<const ReactionRecord*>& train_records) {
    if (train_records.empty())
      throw EvalError(EvalErrorKind::EmptyTrainSet, "rxnfp baseline: empty train set");
    records = train_records;
    for (const ReactionRecord* r : records) fps.push_back(record_reaction_fp(*r));
  }

  std::vector<ConditionStrings> predict(const ReactionRecord& query, int n) const {
    const chem::Fingerprint qfp = record_reaction_fp(query);
    std::vector<std::size_t> order(records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> dist(records.size());
    for (std::size_t i = 0; i < records.size(); ++i)
      dist[i] = chem::fp_distance(qfp, fps[i]);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    std::vector<ConditionStrings> out;
    std::set<ConditionStrings> seen;
    for (std::size_t i : order) {
      if (static_cast<int>(out.size()) >= n) break;
      if (seen.insert(records[i]->conditions).second)
        out.push_back(records[i]->conditions);
    }
    return out;
  }
};

// -------------------------------------------------- neighbor distance stats

struct NeighborDistances {
  double avg_input_neighbor = 0.0;
  bool has_inter = false;
  double avg_inter_neighbor = 0.0;
  int n_mapped = 0;
};

// Diagnostic analysis: L2 fingerprint distance between the input
// reaction and the reactions behind its retrieved texts, plus the average
// pairwise distance among those neighbor reactions.
inline NeighborDistances neighbor_distance_stats(
    const ReactionRecord& record, const std::vector<std::string>& neighbor_text_ids,
    const std::unordered_map<std::string, std::string>& text_to_reaction,
    const Dataset& ds) {
  std::vector<chem::Fingerprint> nfps;
  for (const auto& tid : neighbor_text_ids) {
    auto it = text_to_reaction.find(tid);
    if (it == text_to_reaction.end()) continue;  // unmappable, skip
    const ReactionRecord* r = ds.find(it->second);
    if (!r) continue;
    nfps.push_back(record_reaction_fp(*r));
  }
  if (nfps.empty())
    throw EvalError(EvalErrorKind::NoMappableNeighbors,
                    "no neighbor maps to a reaction");
  NeighborDistances out;
  out.n_mapped = static_cast<int>(nfps.size());
  const chem::Fingerprint qfp = record_reaction_fp(record);
  for (const auto& f : nfps) out.avg_input_neighbor += chem::fp_distance(qfp, f);
  out.avg_input_neighbor /= static_cast<double>(nfps.size());
  if (nfps.size() >= 2) {
    out.has_inter = true;
    long pairs = 0;
    for (std::size_t i = 0; i < nfps.size(); ++i)
      for (std::size_t j = i + 1; j < nfps.size(); ++j) {
        out.avg_inter_neighbor += chem::fp_distance(nfps[i], nfps[j]);
        ++pairs;
      }
    out.avg_inter_neighbor /= static_cast<double>(pairs);
  }
  return out;
}

// ----------------------------------------------------------------- output

inline data::ordered_json metrics_json(const MetricsReport& rep) {
  data::ordered_json j;
  j["task"] = rep.task;
  j["scenario"] = rep.scenario;
  j["split"] = rep.split;
  j["ks"] = rep.ks;
  data::ordered_json acc;
  for (int k : rep.ks) {
    std::ostringstream key;
    key << "top" << k;
    acc[key.str()] = rep.accuracy.at(k);
  }
  j["accuracy"] = acc;
  j["counts"] = {{"records", rep.n_records}};
  j["config_hash"] = rep.config_hash;
  return j;
}

}  // namespace textreact::eval
