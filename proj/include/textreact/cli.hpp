#pragma once

// Command-line pipeline: every subcommand is a thin composition of the
// library modules and a flat RunConfig.

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "textreact/config.hpp"
#include "textreact/eval.hpp"
#include "textreact/retriever.hpp"

namespace textreact::cli {

using config::ConfigError;
using config::ConfigErrorKind;
using config::RunConfig;
using data::Corpus;
using data::Dataset;
using data::DatasetSplit;
using data::ReactionRecord;
using data::Vocabs;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

namespace detail {

inline data::Task data_task(const RunConfig& cfg) {
  return cfg.task == "rcr" ? data::Task::rcr : data::Task::retro;
}

inline predictor::HeadKind head_kind(const RunConfig& cfg) {
  if (cfg.task == "rcr") return predictor::HeadKind::rcr;
  if (cfg.task == "retro_tf") return predictor::HeadKind::retro_tf;
  return predictor::HeadKind::retro_tb;
}

inline int worker_cap() {
  const char* env = std::getenv("TEXTREACT_THREADS");
  if (!env) return 1;
  try {
    return std::max(1, std::stoi(env));
  } catch (...) {
    return 1;
  }
}

inline void require(const std::string& value, const std::string& key) {
  if (value.empty())
    throw ConfigError(ConfigErrorKind::MissingRequired, key, key + " is required");
}

// read only the named-i64 config section of a checkpoint
inline std::map<std::string, std::int64_t> peek_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw nn::CheckpointError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, "TXRN", 4) != 0)
    throw nn::CheckpointError("bad checkpoint magic: " + path);
  if (nn::detail::read_u32(is) != 1)
    throw nn::CheckpointError("unsupported checkpoint version");
  std::map<std::string, std::int64_t> out;
  const std::uint32_t n = nn::detail::read_u32(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string k = nn::detail::read_str(is);
    out[k] = nn::detail::read_i64(is);
  }
  if (!is) throw nn::CheckpointError("truncated checkpoint: " + path);
  return out;
}

inline nn::TransformerConfig model_config_from(const std::map<std::string, std::int64_t>& c) {
  nn::TransformerConfig mc;
  mc.d_model = static_cast<int>(c.at("d_model"));
  mc.n_heads = static_cast<int>(c.at("n_heads"));
  mc.n_layers = static_cast<int>(c.at("n_layers"));
  mc.d_ff = static_cast<int>(c.at("d_ff"));
  mc.max_len = static_cast<int>(c.at("max_len"));
  mc.vocab_size = static_cast<int>(c.at("vocab_size"));
  return mc;
}

inline std::vector<std::pair<std::string, std::int64_t>> model_config_pairs(
    const nn::TransformerConfig& mc) {
  return {{"d_model", mc.d_model}, {"n_heads", mc.n_heads},
          {"n_layers", mc.n_layers}, {"d_ff", mc.d_ff},
          {"max_len", mc.max_len},   {"vocab_size", mc.vocab_size}};
}

// neighbor text preprocessed for predictor assembly: strip the retriever's
// [CLS]/[SEP] framing
inline std::vector<int> neighbor_text_ids(const Corpus& corpus, const Vocabs& vocabs,
                                          const std::string& text_id, int max_text_len) {
  const data::Paragraph* p = corpus.find(text_id);
  if (!p) throw data::DataError(data::DataErrorKind::UnknownId, "paragraph: " + text_id);
  std::vector<int> t = retriever::text_ids(p->text, vocabs, max_text_len);
  t.erase(t.begin());
  if (!t.empty() && t.back() == Vocabs::kSep) t.pop_back();
  return t;
}

inline std::vector<double> softmax_weights(const std::vector<double>& scores) {
  const double mx = *std::max_element(scores.begin(), scores.end());
  std::vector<double> w(scores.size());
  double z = 0;
  for (std::size_t i = 0; i < w.size(); ++i) z += (w[i] = std::exp(scores[i] - mx));
  for (double& x : w) x /= z;
  return w;
}

}  // namespace detail

// ------------------------------------------------------------- neighbors IO

struct NeighborHit {
  std::string id;
  double score = 0.0;
};
using ScoredNeighborLists = std::map<std::string, std::vector<NeighborHit>>;

inline void save_neighbors(const ScoredNeighborLists& lists, const std::string& hash,
                           const std::string& path) {
  data::ordered_json j;
  j["config_hash"] = hash;
  data::ordered_json m = data::ordered_json::object();
  for (const auto& [rid, hits] : lists) {
    data::ordered_json arr = data::ordered_json::array();
    for (const auto& h : hits) arr.push_back({{"id", h.id}, {"score", h.score}});
    m[rid] = arr;
  }
  j["neighbors"] = m;
  std::ofstream os(path);
  if (!os) throw data::DataError(data::DataErrorKind::MalformedLine,
                                 "cannot write neighbors: " + path);
  os << j.dump() << "\n";
}

inline ScoredNeighborLists load_neighbors(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw data::DataError(data::DataErrorKind::MalformedLine,
                                 "cannot open neighbors: " + path);
  data::json j = data::json::parse(is);
  ScoredNeighborLists out;
  for (const auto& [rid, arr] : j.at("neighbors").items()) {
    std::vector<NeighborHit> hits;
    for (const auto& h : arr)
      hits.push_back({h.at("id").get<std::string>(), h.at("score").get<double>()});
    out[rid] = std::move(hits);
  }
  return out;
}

inline predictor::NeighborLists strip_scores(const ScoredNeighborLists& lists) {
  predictor::NeighborLists out;
  for (const auto& [rid, hits] : lists) {
    std::vector<std::string> ids;
    for (const auto& h : hits) ids.push_back(h.id);
    out[rid] = std::move(ids);
  }
  return out;
}

// ----------------------------------------------------------------- loaders

namespace detail {

struct Bundle {
  Corpus corpus;
  Dataset ds;
  DatasetSplit split;
};

inline Bundle load_bundle(const RunConfig& cfg, bool need_split = true) {
  require(cfg.corpus, "corpus");
  require(cfg.dataset, "dataset");
  Bundle b;
  b.corpus = data::load_corpus(cfg.corpus);
  b.ds = data::load_reactions(cfg.dataset, data_task(cfg), &b.corpus);
  if (need_split) {
    require(cfg.splits, "splits");
    b.split = data::load_split(cfg.splits);
  }
  return b;
}

inline std::vector<std::string> apply_train_frac(const RunConfig& cfg,
                                                 std::vector<std::string> ids) {
  if (cfg.train_frac >= 1.0) return ids;
  Rng rng(static_cast<std::uint64_t>(cfg.seed) * 0x9e3779b97f4a7c15ULL + 1);
  rng.shuffle(ids);
  const std::size_t keep = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.train_frac * ids.size())));
  ids.resize(keep);
  std::sort(ids.begin(), ids.end());
  return ids;
}

template <typename T>
void load_retriever(const RunConfig& cfg, nn::Tape<T>& tape,
                    retriever::DualEncoder<T>& model) {
  require(cfg.retriever_checkpoint, "retriever_checkpoint");
  auto conf = peek_checkpoint(cfg.retriever_checkpoint);
  if (conf.at("kind") != 1)
    throw nn::CheckpointError("not a retriever checkpoint");
  Rng rng(0);
  model.init(tape, model_config_from(conf), rng);
  nn::load_checkpoint(cfg.retriever_checkpoint, tape.params());
}

template <typename T>
void load_predictor(const RunConfig& cfg, nn::Tape<T>& tape,
                    predictor::PredictorModel<T>& model) {
  require(cfg.predictor_checkpoint, "predictor_checkpoint");
  auto conf = peek_checkpoint(cfg.predictor_checkpoint);
  if (conf.at("kind") != 2)
    throw nn::CheckpointError("not a predictor checkpoint");
  std::array<int, predictor::kRcrSteps> slot_sizes{};
  for (int s = 0; s < predictor::kRcrSteps; ++s)
    slot_sizes[s] = static_cast<int>(conf.at("slot" + std::to_string(s)));
  Rng rng(0);
  model.init(tape, model_config_from(conf),
             static_cast<predictor::HeadKind>(conf.at("head")), slot_sizes,
             static_cast<int>(conf.at("n_templates")), rng);
  nn::load_checkpoint(cfg.predictor_checkpoint, tape.params());
}

}  // namespace detail

// -------------------------------------------------------------- subcommands

inline int cmd_gen_synth(const RunConfig& cfg, std::ostream& out) {
  detail::require(cfg.corpus, "corpus");
  detail::require(cfg.dataset, "dataset");
  data::SynthParams p;
  p.n_reactions = cfg.n_reactions;
  p.n_types = cfg.n_types;
  p.n_fragments = cfg.n_fragments;
  p.distractor_rate = cfg.distractor_rate;
  p.condition_noise = cfg.condition_noise;
  p.year_min = cfg.year_min;
  p.year_max = cfg.year_max;
  auto [corpus, ds] = data::generate_synthetic(p, static_cast<std::uint64_t>(cfg.seed));
  data::write_corpus(corpus, cfg.corpus);
  data::write_reactions(ds, cfg.dataset);
  out << "config_hash " << cfg.hash() << "\n";
  out << "wrote " << ds.records.size() << " reactions, " << corpus.size()
      << " paragraphs\n";
  return kExitOk;
}

inline int cmd_split(const RunConfig& cfg, std::ostream& out) {
  auto b = detail::load_bundle(cfg, /*need_split=*/false);
  detail::require(cfg.splits, "splits");
  DatasetSplit split;
  std::size_t dropped = 0;
  if (cfg.split_kind == "random") {
    std::vector<std::string> ids;
    for (const auto& r : b.ds.records) ids.push_back(r.id);
    split = data::make_random_split(ids, {cfg.train_ratio, cfg.valid_ratio, cfg.test_ratio},
                                    static_cast<std::uint64_t>(cfg.seed));
  } else {
    auto res = data::make_time_split(b.ds.records, cfg.train_before,
                                     {cfg.valid_year}, {cfg.test_year});
    split = std::move(res.split);
    dropped = res.dropped;
  }
  data::write_split(split, cfg.splits);
  out << "config_hash " << cfg.hash() << "\n";
  out << "split train=" << split.train.size() << " valid=" << split.valid.size()
      << " test=" << split.test.size() << " dropped=" << dropped << "\n";
  return kExitOk;
}

inline int cmd_train_retriever(const RunConfig& cfg, std::ostream& out) {
  auto b = detail::load_bundle(cfg);
  detail::require(cfg.vocab, "vocab");
  detail::require(cfg.retriever_checkpoint, "retriever_checkpoint");
  std::vector<const ReactionRecord*> trecs;
  for (const auto& id : b.split.train) {
    const ReactionRecord* r = b.ds.find(id);
    if (!r) throw data::DataError(data::DataErrorKind::UnknownId, "train id: " + id);
    trecs.push_back(r);
  }
  Vocabs vocabs = data::build_vocabs(trecs, b.corpus);
  data::save_vocabs(vocabs, cfg.vocab);

  nn::Tape<float> tape;
  nn::TransformerConfig mc;
  mc.d_model = cfg.d_model;
  mc.n_heads = cfg.n_heads;
  mc.n_layers = cfg.n_layers;
  mc.d_ff = cfg.d_ff;
  mc.max_len = std::max(cfg.max_chem_len, cfg.max_text_len);
  mc.vocab_size = vocabs.size();
  Rng rng(static_cast<std::uint64_t>(cfg.seed));
  retriever::DualEncoder<float> model;
  model.init(tape, mc, rng);

  retriever::RetrieverTrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.lr = cfg.lr;
  tc.warmup_fraction = cfg.warmup;
  tc.decay = cfg.decay == "cosine" ? nn::DecayKind::cosine : nn::DecayKind::linear;
  tc.max_chem_len = cfg.max_chem_len;
  tc.max_text_len = cfg.max_text_len;
  tc.seed = static_cast<std::uint64_t>(cfg.seed);
  auto hist = retriever::train_retriever(tape, model, b.corpus, b.ds, b.split.train,
                                         vocabs, tc);
  auto conf = detail::model_config_pairs(mc);
  conf.emplace_back("kind", 1);
  nn::save_checkpoint(cfg.retriever_checkpoint, conf, tape.params());
  out << "config_hash " << cfg.hash() << "\n";
  for (std::size_t e = 0; e < hist.epoch_loss.size(); ++e)
    out << "epoch " << e << " loss " << hist.epoch_loss[e] << "\n";
  return kExitOk;
}

inline int cmd_build_index(const RunConfig& cfg, std::ostream& out) {
  detail::require(cfg.corpus, "corpus");
  detail::require(cfg.vocab, "vocab");
  detail::require(cfg.index, "index");
  Corpus corpus = data::load_corpus(cfg.corpus);
  Vocabs vocabs = data::load_vocabs(cfg.vocab);

  if (cfg.scenario != "full") {
    detail::require(cfg.dataset, "dataset");
    detail::require(cfg.splits, "splits");
    Dataset ds = data::load_reactions(cfg.dataset, detail::data_task(cfg), &corpus);
    DatasetSplit split = data::load_split(cfg.splits);
    eval::Scenario sc;
    sc.kind = cfg.scenario == "gold_removed" ? eval::ScenarioKind::gold_removed
                                             : eval::ScenarioKind::ts_corpus;
    sc.year_cutoff = cfg.year_cutoff;
    corpus = eval::build_scenario(corpus, ds, split.test, sc);
  }

  nn::Tape<float> tape;
  retriever::DualEncoder<float> model;
  detail::load_retriever(cfg, tape, model);
  auto index = retriever::build_index(tape, model, corpus, vocabs, cfg.max_text_len);
  retriever::save_index(index, cfg.index);
  out << "config_hash " << cfg.hash() << "\n";
  out << "indexed " << index.ids.size() << " paragraphs, d=" << index.d << "\n";
  return kExitOk;
}

inline int cmd_retrieve(const RunConfig& cfg, std::ostream& out) {
  auto b = detail::load_bundle(cfg);
  detail::require(cfg.vocab, "vocab");
  detail::require(cfg.index, "index");
  detail::require(cfg.neighbors, "neighbors");
  Vocabs vocabs = data::load_vocabs(cfg.vocab);
  auto index = retriever::load_index(cfg.index);
  nn::Tape<float> tape;
  retriever::DualEncoder<float> model;
  detail::load_retriever(cfg, tape, model);
  if (model.cfg.d_model != index.d)
    throw predictor::PredError(predictor::PredErrorKind::IndexEncoderDimMismatch,
                               "index dimension does not match the encoder");

  std::unordered_map<std::string, std::size_t> index_row;
  for (std::size_t i = 0; i < index.ids.size(); ++i) index_row[index.ids[i]] = i;
  std::unordered_set<std::string> train_set(b.split.train.begin(), b.split.train.end());

  ScoredNeighborLists lists;
  std::vector<std::vector<retriever::SearchHit>> test_hits;
  std::vector<std::string> test_gold;
  const std::size_t topk = static_cast<std::size_t>(cfg.K);
  for (const auto& r : b.ds.records) {
    auto q = model.embed_chem(
        tape, retriever::chem_query_ids(r, b.ds.task, vocabs, cfg.max_chem_len));
    auto hits = retriever::mips_search(index, q, topk);
    std::vector<NeighborHit> entry;
    bool has_gold = false;
    for (const auto& h : hits) {
      entry.push_back({h.id, h.score});
      if (r.text_id && h.id == *r.text_id) has_gold = true;
    }
    if (r.text_id && std::find(b.split.test.begin(), b.split.test.end(), r.id) !=
                         b.split.test.end()) {
      test_hits.push_back(hits);
      test_gold.push_back(*r.text_id);
    }
    // gold-augment training lists so the gold branch of the sampling
    // policy always has its paragraph available
    if (!has_gold && r.text_id && train_set.count(r.id)) {
      double score = 0.0;
      auto it = index_row.find(*r.text_id);
      if (it != index_row.end()) {
        const float* row = index.data.data() + it->second * index.d;
        for (int d = 0; d < index.d; ++d) score += q[d] * row[d];
      }
      entry.push_back({*r.text_id, score});
    }
    lists[r.id] = std::move(entry);
  }
  save_neighbors(lists, cfg.hash(), cfg.neighbors);
  out << "config_hash " << cfg.hash() << "\n";
  out << "retrieved top-" << cfg.K << " for " << lists.size() << " records\n";
  if (!test_hits.empty()) {
    for (int k : {1, 3, 10})
      if (k <= cfg.K)
        out << "test recall@" << k << " "
            << retriever::recall_at_k(test_hits, test_gold, k) << "\n";
  }
  return kExitOk;
}

inline int cmd_train_predictor(const RunConfig& cfg, std::ostream& out) {
  auto b = detail::load_bundle(cfg);
  detail::require(cfg.vocab, "vocab");
  detail::require(cfg.predictor_checkpoint, "predictor_checkpoint");
  Vocabs vocabs = data::load_vocabs(cfg.vocab);
  predictor::NeighborLists neighbors;
  if (cfg.k > 0) {
    detail::require(cfg.neighbors, "neighbors");
    neighbors = strip_scores(load_neighbors(cfg.neighbors));
  }

  nn::Tape<float> tape;
  nn::TransformerConfig mc;
  mc.d_model = cfg.d_model;
  mc.n_heads = cfg.n_heads;
  mc.n_layers = cfg.n_layers;
  mc.d_ff = cfg.d_ff;
  mc.max_len = cfg.max_len;
  mc.vocab_size = vocabs.size();
  std::array<int, predictor::kRcrSteps> slot_sizes{};
  for (int s = 0; s < predictor::kRcrSteps; ++s) slot_sizes[s] = vocabs.slot_size(s);
  Rng rng(static_cast<std::uint64_t>(cfg.seed));
  predictor::PredictorModel<float> model;
  model.init(tape, mc, detail::head_kind(cfg), slot_sizes, vocabs.n_templates, rng);

  predictor::PredictorTrainConfig tc;
  tc.policy.alpha = cfg.alpha;
  tc.policy.K = cfg.K;
  tc.policy.k = cfg.k;
  tc.masking.poisson_lambda = cfg.poisson_lambda;
  tc.masking.target_ratio = cfg.mask_ratio;
  tc.masking.max_span = cfg.max_span;
  tc.lr = cfg.lr;
  tc.warmup_fraction = cfg.warmup;
  tc.decay = cfg.decay == "cosine" ? nn::DecayKind::cosine : nn::DecayKind::linear;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.lambda1 = cfg.lambda1;
  tc.smiles_aug_prob = cfg.smiles_aug;
  tc.text_only = cfg.input_mode == "text_only";
  tc.max_len = cfg.max_len;
  tc.max_text_len = cfg.max_text_len;
  tc.seed = static_cast<std::uint64_t>(cfg.seed);

  auto train_ids = detail::apply_train_frac(cfg, b.split.train);
  auto stats = predictor::train_predictor(tape, model, b.corpus, b.ds, train_ids,
                                          vocabs, neighbors, tc);

  auto conf = detail::model_config_pairs(mc);
  conf.emplace_back("kind", 2);
  conf.emplace_back("head", static_cast<std::int64_t>(model.head));
  conf.emplace_back("n_templates", vocabs.n_templates);
  for (int s = 0; s < predictor::kRcrSteps; ++s)
    conf.emplace_back("slot" + std::to_string(s), slot_sizes[s]);
  nn::save_checkpoint(cfg.predictor_checkpoint, conf, tape.params());
  out << "config_hash " << cfg.hash() << "\n";
  for (std::size_t e = 0; e < stats.epoch_loss.size(); ++e)
    out << "epoch " << e << " loss " << stats.epoch_loss[e] << "\n";
  return kExitOk;
}

// ranked predictions for one record, decoded against vocabs where needed
namespace detail {

template <typename T>
std::vector<predictor::Prediction> predict_record(
    nn::Tape<T>& tape, const predictor::PredictorModel<T>& model,
    const Corpus& corpus, const Vocabs& vocabs, const ReactionRecord& r,
    data::Task task, const std::vector<NeighborHit>& hits, const RunConfig& cfg,
    Rng& rng) {
  const bool smiles_only = cfg.input_mode == "smiles_only";
  std::vector<std::string> picked;
  std::vector<double> scores;
  if (!smiles_only && cfg.k > 0) {
    predictor::NeighborPolicy pol;
    pol.alpha = cfg.alpha;
    pol.K = cfg.K;
    pol.k = cfg.k;
    std::vector<std::string> ranked;
    std::map<std::string, double> score_of;
    for (const auto& h : hits) {
      ranked.push_back(h.id);
      score_of[h.id] = h.score;
    }
    picked = predictor::sample_neighbors(pol, predictor::Mode::infer, std::nullopt,
                                         ranked, rng);
    for (const auto& id : picked) scores.push_back(score_of[id]);
  }

  const std::vector<int> smiles_ids =
      predictor::predictor_chem_ids(r.reactants, r.product, task, vocabs);
  std::vector<predictor::PredictorInput> inputs;
  std::vector<double> weights;
  if (cfg.predict_mode == "ensemble" && !picked.empty()) {
    for (const auto& id : picked) {
      std::vector<std::vector<int>> texts = {
          neighbor_text_ids(corpus, vocabs, id, cfg.max_text_len)};
      inputs.push_back(predictor::assemble_input(smiles_ids, texts, cfg.max_len));
    }
    weights = softmax_weights(scores);
  } else {
    std::vector<std::vector<int>> texts;
    for (const auto& id : picked)
      texts.push_back(neighbor_text_ids(corpus, vocabs, id, cfg.max_text_len));
    inputs.push_back(predictor::assemble_input(smiles_ids, texts, cfg.max_len));
    weights = {1.0};
  }
  predictor::PredictOptions opt;
  opt.beam_width = cfg.beam_width;
  opt.text_only = cfg.input_mode == "text_only";
  return predictor::predict_topn(tape, model, inputs, weights, cfg.topn, opt, &r);
}

inline std::string decode_tokens(const std::vector<int>& tokens, const Vocabs& v) {
  std::string s;
  for (int id : tokens) s += v.tokens[static_cast<std::size_t>(id)];
  return s;
}

inline std::vector<std::string> split_molecules(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == '.') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline int cmd_predict(const RunConfig& cfg, std::ostream& out) {
  auto b = detail::load_bundle(cfg);
  detail::require(cfg.vocab, "vocab");
  Vocabs vocabs = data::load_vocabs(cfg.vocab);
  ScoredNeighborLists lists;
  if (cfg.k > 0 && cfg.input_mode != "smiles_only") {
    detail::require(cfg.neighbors, "neighbors");
    lists = load_neighbors(cfg.neighbors);
  }
  nn::Tape<float> tape;
  predictor::PredictorModel<float> model;
  detail::load_predictor(cfg, tape, model);

  std::filesystem::create_directories(cfg.out_dir);
  const std::string path = cfg.out_dir + "/predictions.json";
  data::ordered_json root;
  root["config_hash"] = cfg.hash();
  data::ordered_json items = data::ordered_json::array();
  Rng rng(static_cast<std::uint64_t>(cfg.seed) + 99);
  for (const auto& id : b.split.test) {
    const ReactionRecord* r = b.ds.find(id);
    if (!r) throw data::DataError(data::DataErrorKind::UnknownId, "test id: " + id);
    static const std::vector<NeighborHit> kNone;
    auto it = lists.find(id);
    auto preds = detail::predict_record(tape, model, b.corpus, vocabs, *r, b.ds.task,
                                        it == lists.end() ? kNone : it->second, cfg,
                                        rng);
    data::ordered_json jr;
    jr["id"] = id;
    data::ordered_json parr = data::ordered_json::array();
    for (const auto& p : preds) {
      data::ordered_json jp;
      jp["score"] = p.score;
      if (model.head == predictor::HeadKind::rcr) {
        data::ordered_json c;
        for (std::size_t s = 0; s < data::kSlotNames.size(); ++s)
          c[data::kSlotNames[s]] = vocabs.slot_token(s, p.slots[s]);
        jp["conditions"] = c;
      } else if (model.head == predictor::HeadKind::retro_tf) {
        jp["reactants"] = detail::split_molecules(detail::decode_tokens(p.tokens, vocabs));
      } else {
        jp["template_id"] = p.template_id;
        jp["center_index"] = p.center_index;
        jp["center_is_bond"] = p.center_is_bond;
      }
      parr.push_back(jp);
    }
    jr["predictions"] = parr;
    items.push_back(jr);
  }
  root["records"] = items;
  std::ofstream os(path);
  os << root.dump() << "\n";
  out << "config_hash " << cfg.hash() << "\n";
  out << "wrote predictions for " << b.split.test.size() << " records to " << path
      << "\n";
  return kExitOk;
}

inline int cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
  auto b = detail::load_bundle(cfg);
  detail::require(cfg.vocab, "vocab");
  Vocabs vocabs = data::load_vocabs(cfg.vocab);

  std::vector<int> ks;
  for (int k : {1, 3, 5, 10})
    if (k <= cfg.topn) ks.push_back(k);

  std::vector<const ReactionRecord*> test_recs;
  for (const auto& id : b.split.test) {
    const ReactionRecord* r = b.ds.find(id);
    if (!r) throw data::DataError(data::DataErrorKind::UnknownId, "test id: " + id);
    test_recs.push_back(r);
  }

  std::vector<int> ranks;
  if (cfg.baseline == "rxnfp") {
    if (b.ds.task != data::Task::rcr)
      throw eval::EvalError(eval::EvalErrorKind::TaskMismatch,
                            "rxnfp baseline applies to condition recommendation");
    std::vector<const ReactionRecord*> trecs;
    for (const auto& id : b.split.train) trecs.push_back(b.ds.find(id));
    eval::FpBaseline base;
    base.build(trecs);
    for (const ReactionRecord* r : test_recs) {
      auto preds = base.predict(*r, cfg.topn);
      int rank = -1;
      for (std::size_t j = 0; j < preds.size(); ++j)
        if (preds[j] == r->conditions) {
          rank = static_cast<int>(j);
          break;
        }
      ranks.push_back(rank);
    }
  } else {
    ScoredNeighborLists lists;
    if (cfg.k > 0 && cfg.input_mode != "smiles_only") {
      detail::require(cfg.neighbors, "neighbors");
      lists = load_neighbors(cfg.neighbors);
    }
    // scenario audit: every consulted paragraph must belong to the
    // scenario corpus
    std::unordered_set<std::string> allowed;
    if (cfg.scenario != "full") {
      eval::Scenario sc;
      sc.kind = cfg.scenario == "gold_removed" ? eval::ScenarioKind::gold_removed
                                               : eval::ScenarioKind::ts_corpus;
      sc.year_cutoff = cfg.year_cutoff;
      Corpus scen = eval::build_scenario(b.corpus, b.ds, b.split.test, sc);
      for (const auto& p : scen.paragraphs) allowed.insert(p.id);
      for (const auto& id : b.split.test) {
        auto it = lists.find(id);
        if (it == lists.end()) continue;
        for (const auto& h : it->second)
          if (!allowed.count(h.id))
            throw eval::EvalError(eval::EvalErrorKind::TaskMismatch,
                                  "retrieval consulted out-of-scenario paragraph " +
                                      h.id + " for record " + id);
      }
    }

    nn::Tape<float> tape;
    predictor::PredictorModel<float> model;
    detail::load_predictor(cfg, tape, model);

    Rng rng(static_cast<std::uint64_t>(cfg.seed) + 99);
    static const std::vector<NeighborHit> kNone;
    for (const ReactionRecord* r : test_recs) {
      auto it = lists.find(r->id);
      auto preds = detail::predict_record(tape, model, b.corpus, vocabs, *r, b.ds.task,
                                          it == lists.end() ? kNone : it->second, cfg,
                                          rng);
      int rank = -1;
      int kept = 0;
      std::unordered_set<std::string> seen;
      for (const auto& p : preds) {
        bool match = false;
        std::string key;
        if (model.head == predictor::HeadKind::rcr) {
          data::ConditionStrings got;
          for (std::size_t s = 0; s < got.size(); ++s)
            got[s] = vocabs.slot_token(s, p.slots[s]);
          for (const auto& t : got) key += t + "\x1f";
          match = got == r->conditions;
        } else if (model.head == predictor::HeadKind::retro_tf) {
          auto mols = eval::sorted_reactants(
              detail::split_molecules(detail::decode_tokens(p.tokens, vocabs)));
          for (const auto& m : mols) key += m + "\x1f";
          match = mols == eval::sorted_reactants(r->reactants);
        } else {
          key = std::to_string(p.template_id) + ":" + std::to_string(p.center_index) +
                (p.center_is_bond ? "b" : "a");
          if (r->template_id && r->center) {
            const chem::MolGraph g = chem::parse_smiles(r->product);
            int gold_index = -1;
            bool gold_bond = r->center->kind == data::RetroCenter::Kind::bond;
            if (gold_bond) {
              const int lo = std::min(r->center->atom_a, *r->center->atom_b);
              const int hi = std::max(r->center->atom_a, *r->center->atom_b);
              for (std::size_t bi = 0; bi < g.bonds.size(); ++bi)
                if (g.bonds[bi].a == lo && g.bonds[bi].b == hi)
                  gold_index = static_cast<int>(bi);
            } else {
              gold_index = r->center->atom_a;
            }
            match = p.template_id == *r->template_id &&
                    p.center_is_bond == gold_bond && p.center_index == gold_index;
          }
        }
        if (!seen.insert(key).second) continue;
        if (match) {
          rank = kept;
          break;
        }
        ++kept;
      }
      ranks.push_back(rank);
    }
  }

  eval::MetricsReport rep = eval::topk_from_ranks(ranks, ks);
  rep.task = cfg.task;
  rep.scenario = cfg.scenario;
  rep.split = "test";
  rep.config_hash = cfg.hash();
  std::filesystem::create_directories(cfg.out_dir);
  const std::string path = cfg.out_dir + "/metrics.json";
  std::ofstream os(path);
  os << eval::metrics_json(rep).dump(2) << "\n";
  out << "config_hash " << cfg.hash() << "\n";
  for (int k : ks) out << "top" << k << " " << rep.accuracy.at(k) << "\n";
  out << "wrote " << path << "\n";
  return kExitOk;
}

inline int cmd_sweep(const RunConfig& base, const std::string& param,
                     const std::vector<std::string>& values, std::ostream& out) {
  if (param != "alpha" && param != "k" && param != "train_frac")
    throw ConfigError(ConfigErrorKind::UnknownKey, param,
                      "sweep supports alpha, k, or train_frac");
  if (values.empty())
    throw ConfigError(ConfigErrorKind::MissingRequired, "values",
                      "sweep needs --values v1,v2,...");
  data::ordered_json summary;
  summary["param"] = param;
  data::ordered_json runs = data::ordered_json::array();
  for (const auto& value : values) {
    RunConfig cfg = base;
    config::set_key(cfg, param, value);
    cfg.validate();
    const std::string dir = base.out_dir + "/sweep_" + param + "_" + value;
    std::filesystem::create_directories(dir);
    cfg.out_dir = dir;
    cfg.predictor_checkpoint = dir + "/predictor.ckpt";
    out << "--- " << param << " = " << value << "\n";
    int rc = cmd_train_predictor(cfg, out);
    if (rc != kExitOk) return rc;
    rc = cmd_evaluate(cfg, out);
    if (rc != kExitOk) return rc;
    std::ifstream is(dir + "/metrics.json");
    data::ordered_json run;
    run["value"] = value;
    run["metrics"] = data::ordered_json::parse(is);
    runs.push_back(run);
  }
  summary["runs"] = runs;
  summary["config_hash"] = base.hash();
  std::filesystem::create_directories(base.out_dir);
  const std::string path = base.out_dir + "/sweep.json";
  std::ofstream os(path);
  os << summary.dump(2) << "\n";
  out << "wrote " << path << "\n";
  return kExitOk;
}

inline int cmd_grad_check(const RunConfig& cfg, std::ostream& out) {
  // 64-bit finite-difference verification on small randomly initialized
  // models; tolerance 1e-6 relative
  constexpr double kTol = 1e-6;
  Rng rng(static_cast<std::uint64_t>(cfg.seed));
  nn::TransformerConfig mc;
  mc.d_model = 8;
  mc.n_heads = 2;
  mc.n_layers = 1;
  mc.d_ff = 16;
  mc.max_len = 32;
  mc.vocab_size = 24;
  double worst = 0.0;

  {
    nn::Tape<double> tape;
    retriever::DualEncoder<double> model;
    model.init(tape, mc, rng);
    std::vector<std::vector<int>> chem_ids, text_ids;
    for (int i = 0; i < 3; ++i) {
      std::vector<int> a{Vocabs::kCls}, b{Vocabs::kCls};
      for (int t = 0; t < 6; ++t) {
        a.push_back(Vocabs::kNumSpecials + static_cast<int>(rng.uniform_int(8)));
        b.push_back(Vocabs::kNumSpecials + static_cast<int>(rng.uniform_int(8)));
      }
      a.push_back(Vocabs::kSep);
      b.push_back(Vocabs::kSep);
      chem_ids.push_back(a);
      text_ids.push_back(b);
    }
    auto build = [&]() {
      std::vector<nn::Node<double>*> q, t;
      for (const auto& ids : chem_ids) q.push_back(model.encode_chem(tape, ids));
      for (const auto& ids : text_ids) t.push_back(model.encode_text(tape, ids));
      return retriever::contrastive_loss(tape, nn::ops::concat_rows(tape, q),
                                         nn::ops::concat_rows(tape, t));
    };
    auto rep = nn::grad_check<double>(tape, build, 40, rng);
    out << "retriever contrastive: max rel err " << rep.max_rel_err << " ("
        << rep.worst_param << ")\n";
    worst = std::max(worst, rep.max_rel_err);
  }

  {
    nn::Tape<double> tape;
    predictor::PredictorModel<double> model;
    std::array<int, predictor::kRcrSteps> slot_sizes = {4, 4, 3, 3, 3};
    model.init(tape, mc, detail::head_kind(cfg), slot_sizes, 3, rng);
    std::vector<int> ids{Vocabs::kCls, 16, 17, 18, 19, Vocabs::kSep, Vocabs::kNb0,
                         20, 21, 22, Vocabs::kSep};
    auto build = [&]() -> nn::Node<double>* {
      nn::Node<double>* hidden = model.encoder.forward(tape, ids);
      nn::Node<double>* pred = nullptr;
      if (model.head == predictor::HeadKind::rcr) {
        pred = predictor::rcr_forward_loss(tape, model, hidden, {1, 2, 0, 1, 2});
      } else if (model.head == predictor::HeadKind::retro_tf) {
        pred = predictor::retro_tf_loss(tape, model, hidden, {16, 18, Vocabs::kEos});
      } else {
        const chem::MolGraph product = chem::parse_smiles("CCO");
        data::RetroCenter center;
        center.kind = data::RetroCenter::Kind::bond;
        center.atom_a = 0;
        center.atom_b = 1;
        // rows 1..3 of the input stand in for the product's atom tokens
        pred = predictor::retro_tb_loss(tape, model, hidden, product, {1, 2, 3},
                                        /*template_id=*/1, center);
      }
      std::vector<int> labels(ids.size(), predictor::kMlmIgnore);
      labels[2] = 17;
      nn::Node<double>* mlm = predictor::mlm_loss(tape, model, hidden, labels);
      return predictor::total_loss(tape, pred, mlm, cfg.lambda1);
    };
    auto rep = nn::grad_check<double>(tape, build, 40, rng);
    out << "predictor " << cfg.task << ": max rel err " << rep.max_rel_err << " ("
        << rep.worst_param << ")\n";
    worst = std::max(worst, rep.max_rel_err);
  }

  out << "config_hash " << cfg.hash() << "\n";
  out << "max rel err " << worst << (worst <= kTol ? " PASS" : " FAIL") << "\n";
  return worst <= kTol ? kExitOk : kExitRuntime;
}

// ------------------------------------------------------------------ driver

inline int run_command(const std::vector<std::string>& args, std::ostream& out,
                       std::ostream& err) {
  try {
    if (args.empty())
      throw ConfigError(ConfigErrorKind::MissingRequired, "command",
                        "usage: textreact <command> [--config file] [--key value]");
    const std::string command = args[0];
    std::string sweep_param;
    std::vector<std::string> sweep_values;
    std::string config_path;
    std::vector<std::string> overrides;
    for (std::size_t i = 1; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) {
        config_path = args[++i];
      } else if (command == "sweep" && args[i] == "--param" && i + 1 < args.size()) {
        sweep_param = args[++i];
      } else if (command == "sweep" && args[i] == "--values" && i + 1 < args.size()) {
        std::stringstream ss(args[++i]);
        std::string v;
        while (std::getline(ss, v, ',')) sweep_values.push_back(v);
      } else {
        overrides.push_back(args[i]);
      }
    }
    RunConfig cfg = config_path.empty() ? RunConfig() : config::parse_config_file(config_path);
    config::apply_overrides(cfg, overrides);
    cfg.validate();
    out << "workers " << detail::worker_cap() << "\n";

    if (command == "gen-synth") return cmd_gen_synth(cfg, out);
    if (command == "split") return cmd_split(cfg, out);
    if (command == "train-retriever") return cmd_train_retriever(cfg, out);
    if (command == "build-index") return cmd_build_index(cfg, out);
    if (command == "retrieve") return cmd_retrieve(cfg, out);
    if (command == "train-predictor") return cmd_train_predictor(cfg, out);
    if (command == "predict") return cmd_predict(cfg, out);
    if (command == "evaluate") return cmd_evaluate(cfg, out);
    if (command == "sweep") return cmd_sweep(cfg, sweep_param, sweep_values, out);
    if (command == "grad-check") return cmd_grad_check(cfg, out);
    throw ConfigError(ConfigErrorKind::UnknownKey, command,
                      "unknown command: " + command);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace textreact::cli
