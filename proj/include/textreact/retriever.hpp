#pragma once

// Dual-encoder paragraph retriever: contrastive training with in-batch and
// sampled negatives, exact inner-product index, recall metrics.

#include <algorithm>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include <Eigen/Dense>

#include "textreact/data.hpp"
#include "textreact/nn.hpp"

namespace textreact::retriever {

using data::Corpus;
using data::Dataset;
using data::ReactionRecord;
using data::Task;
using data::Vocabs;

// -------------------------------------------------------------- encoding

// chem side: [CLS] reactants (dot-joined) [SEP] product [SEP] for condition
// recommendation; [CLS] product [SEP] for retrosynthesis
inline std::vector<int> chem_query_ids(const ReactionRecord& r, Task task,
                                       const Vocabs& v, int max_len) {
  std::vector<int> ids = {Vocabs::kCls};
  if (task == Task::rcr) {
    for (std::size_t i = 0; i < r.reactants.size(); ++i) {
      if (i) ids.push_back(v.id("."));
      for (const auto& t : data::tokenize_smiles_texts(r.reactants[i]))
        ids.push_back(v.id(t));
    }
    ids.push_back(Vocabs::kSep);
  }
  for (const auto& t : data::tokenize_smiles_texts(r.product)) ids.push_back(v.id(t));
  ids.push_back(Vocabs::kSep);
  if (static_cast<int>(ids.size()) > max_len) {
    ids.resize(static_cast<std::size_t>(max_len));
    ids.back() = Vocabs::kSep;
  }
  return ids;
}

inline std::vector<int> text_ids(const std::string& text, const Vocabs& v,
                                 int max_len) {
  std::vector<int> ids = {Vocabs::kCls};
  for (const auto& t : data::tokenize_text(text)) ids.push_back(v.id(t));
  ids.push_back(Vocabs::kSep);
  if (static_cast<int>(ids.size()) > max_len) {
    ids.resize(static_cast<std::size_t>(max_len));
    ids.back() = Vocabs::kSep;
  }
  return ids;
}

// ----------------------------------------------------------- dual encoder

template <typename T>
struct DualEncoder {
  nn::TransformerConfig cfg;
  nn::Encoder<T> chem_enc;
  nn::Encoder<T> text_enc;

  void init(nn::Tape<T>& tape, const nn::TransformerConfig& c, Rng& rng) {
    cfg = c;
    chem_enc.init(tape, "chem", cfg, rng);
    text_enc.init(tape, "text", cfg, rng);
  }

  nn::Node<T>* encode_chem(nn::Tape<T>& tape, const std::vector<int>& ids) const {
    return chem_enc.pooled(tape, chem_enc.forward(tape, ids));
  }
  nn::Node<T>* encode_text(nn::Tape<T>& tape, const std::vector<int>& ids) const {
    return text_enc.pooled(tape, text_enc.forward(tape, ids));
  }

  // inference helpers: embedding values with the graph torn down afterwards
  std::vector<float> embed_text(nn::Tape<T>& tape, const std::vector<int>& ids) const {
    nn::Node<T>* p = encode_text(tape, ids);
    std::vector<float> out(p->val.begin(), p->val.end());
    tape.clear_temps();
    return out;
  }
  std::vector<float> embed_chem(nn::Tape<T>& tape, const std::vector<int>& ids) const {
    nn::Node<T>* p = encode_chem(tape, ids);
    std::vector<float> out(p->val.begin(), p->val.end());
    tape.clear_temps();
    return out;
  }
};

// ------------------------------------------------------ contrastive loss

// queries: n x d, texts: m x d with m >= n and texts row i gold for query i.
// Mean over queries of -log softmax_i(scores row i).
template <typename T>
nn::Node<T>* contrastive_loss(nn::Tape<T>& tape, nn::Node<T>* queries,
                              nn::Node<T>* texts) {
  if (texts->rows < queries->rows)
    throw nn::NnError(nn::NnErrorKind::ShapeMismatch,
                      "contrastive_loss: fewer texts than queries");
  nn::Node<T>* scores = nn::ops::matmul_nt(tape, queries, texts);
  std::vector<int> targets(static_cast<std::size_t>(queries->rows));
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = static_cast<int>(i);
  return nn::ops::cross_entropy(tape, scores, targets, /*ignore_id=*/-1,
                                nn::ops::Reduction::mean);
}

// corpus indices outside `exclude`, k distinct picks
inline std::vector<std::size_t> sample_negatives(
    Rng& rng, std::size_t n_corpus, const std::unordered_set<std::size_t>& exclude,
    std::size_t k) {
  if (exclude.size() + k > n_corpus)
    throw data::DataError(data::DataErrorKind::InvalidParams,
                          "sample_negatives: not enough paragraphs");
  std::vector<std::size_t> picks;
  std::unordered_set<std::size_t> used;
  while (picks.size() < k) {
    std::size_t j = static_cast<std::size_t>(rng.uniform_int(n_corpus));
    if (exclude.count(j) || used.count(j)) continue;
    used.insert(j);
    picks.push_back(j);
  }
  return picks;
}

// --------------------------------------------------------------- training

struct RetrieverTrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double lr = 1e-4;
  double warmup_fraction = 0.1;
  nn::DecayKind decay = nn::DecayKind::linear;
  int max_chem_len = 96;
  int max_text_len = 96;
  std::uint64_t seed = 7;
};

struct TrainHistory {
  std::vector<double> epoch_loss;
};

// Trains in place on the tape holding `model`'s parameters, using the
// training records that have a gold paragraph.
template <typename T>
TrainHistory train_retriever(nn::Tape<T>& tape, DualEncoder<T>& model,
                             const Corpus& corpus, const Dataset& ds,
                             const std::vector<std::string>& train_ids,
                             const Vocabs& vocabs, const RetrieverTrainConfig& cfg,
                             bool verbose = false) {
  std::vector<std::vector<int>> query_ids;      // per pair
  std::vector<std::size_t> gold_paragraph;       // per pair, corpus index
  for (const auto& id : train_ids) {
    const ReactionRecord* r = ds.find(id);
    if (!r) throw data::DataError(data::DataErrorKind::UnknownId, "train id: " + id);
    if (!r->text_id) continue;
    query_ids.push_back(chem_query_ids(*r, ds.task, vocabs, cfg.max_chem_len));
    gold_paragraph.push_back(corpus.by_id.at(*r->text_id));
  }
  if (query_ids.empty())
    throw data::DataError(data::DataErrorKind::MissingGold,
                          "train_retriever: no paired records");

  std::vector<std::vector<int>> paragraph_ids(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i)
    paragraph_ids[i] = text_ids(corpus.paragraphs[i].text, vocabs, cfg.max_text_len);

  const std::size_t n_pairs = query_ids.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t n_batches = (n_pairs + bs - 1) / bs;
  nn::ScheduleConfig sched{cfg.lr, cfg.warmup_fraction, cfg.decay,
                           static_cast<long>(n_batches) * cfg.epochs};
  nn::Adam<T> adam(sched);
  Rng rng(cfg.seed);

  std::vector<std::size_t> order(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) order[i] = i;

  TrainHistory history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < n_batches; ++b) {
      const std::size_t lo = b * bs;
      const std::size_t hi = std::min(n_pairs, lo + bs);
      const std::size_t n = hi - lo;

      // in-batch golds plus n sampled negatives from outside the batch
      std::unordered_set<std::size_t> batch_gold;
      for (std::size_t i = lo; i < hi; ++i) batch_gold.insert(gold_paragraph[order[i]]);
      std::vector<std::size_t> negs;
      if (batch_gold.size() + n <= corpus.size())
        negs = sample_negatives(rng, corpus.size(), batch_gold, n);

      std::vector<nn::Node<T>*> q_rows, t_rows;
      q_rows.reserve(n);
      t_rows.reserve(n + negs.size());
      for (std::size_t i = lo; i < hi; ++i)
        q_rows.push_back(model.encode_chem(tape, query_ids[order[i]]));
      for (std::size_t i = lo; i < hi; ++i)
        t_rows.push_back(
            model.encode_text(tape, paragraph_ids[gold_paragraph[order[i]]]));
      for (std::size_t j : negs)
        t_rows.push_back(model.encode_text(tape, paragraph_ids[j]));

      nn::Node<T>* q = nn::ops::concat_rows(tape, q_rows);
      nn::Node<T>* t = nn::ops::concat_rows(tape, t_rows);
      nn::Node<T>* loss = contrastive_loss(tape, q, t);
      loss_sum += static_cast<double>(loss->val[0]) * static_cast<double>(n);
      tape.backward(loss);
      adam.step(tape.params());
      tape.clear_temps();
    }
    history.epoch_loss.push_back(loss_sum / static_cast<double>(n_pairs));
    if (verbose)
      std::fprintf(stderr, "retriever epoch %d loss %.4f\n", epoch + 1,
                   history.epoch_loss.back());
  }
  return history;
}

// ------------------------------------------------------------------ index

struct EmbeddingIndex {
  int d = 0;
  std::vector<std::string> ids;   // paragraph ids, row order
  std::vector<float> data;        // ids.size() x d, row-major
};

template <typename T>
EmbeddingIndex build_index(nn::Tape<T>& tape, const DualEncoder<T>& model,
                           const Corpus& corpus, const Vocabs& vocabs,
                           int max_text_len) {
  EmbeddingIndex index;
  index.d = model.cfg.d_model;
  for (const auto& p : corpus.paragraphs) {
    std::vector<float> e =
        model.embed_text(tape, text_ids(p.text, vocabs, max_text_len));
    index.ids.push_back(p.id);
    index.data.insert(index.data.end(), e.begin(), e.end());
  }
  return index;
}

struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void save_index(const EmbeddingIndex& index, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IndexError("cannot open for write: " + path);
  os.write("TXIX", 4);
  const std::uint32_t d = static_cast<std::uint32_t>(index.d);
  const std::uint64_t m = index.ids.size();
  os.write(reinterpret_cast<const char*>(&d), 4);
  os.write(reinterpret_cast<const char*>(&m), 8);
  for (const auto& id : index.ids) {
    const std::uint32_t len = static_cast<std::uint32_t>(id.size());
    os.write(reinterpret_cast<const char*>(&len), 4);
    os.write(id.data(), static_cast<std::streamsize>(len));
  }
  os.write(reinterpret_cast<const char*>(index.data.data()),
           static_cast<std::streamsize>(index.data.size() * 4));
  if (!os) throw IndexError("write failed: " + path);
}

inline EmbeddingIndex load_index(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IndexError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, "TXIX", 4) != 0)
    throw IndexError("bad index magic: " + path);
  EmbeddingIndex index;
  std::uint32_t d = 0;
  std::uint64_t m = 0;
  is.read(reinterpret_cast<char*>(&d), 4);
  is.read(reinterpret_cast<char*>(&m), 8);
  index.d = static_cast<int>(d);
  for (std::uint64_t i = 0; i < m; ++i) {
    std::uint32_t len = 0;
    is.read(reinterpret_cast<char*>(&len), 4);
    std::string id(len, '\0');
    is.read(id.data(), static_cast<std::streamsize>(len));
    index.ids.push_back(std::move(id));
  }
  index.data.resize(m * d);
  is.read(reinterpret_cast<char*>(index.data.data()),
          static_cast<std::streamsize>(index.data.size() * 4));
  if (!is) throw IndexError("truncated index: " + path);
  return index;
}

struct SearchHit {
  std::string id;
  float score = 0;
  std::size_t row = 0;
};

// exact search; ties broken by insertion (row) order
inline std::vector<SearchHit> mips_search(const EmbeddingIndex& index,
                                          const std::vector<float>& query,
                                          std::size_t k) {
  if (static_cast<int>(query.size()) != index.d)
    throw IndexError("query dimension mismatch");
  const std::size_t m = index.ids.size();
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic,
                                 Eigen::RowMajor>>
      mat(index.data.data(), static_cast<Eigen::Index>(m), index.d);
  Eigen::Map<const Eigen::VectorXf> q(query.data(), index.d);
  Eigen::VectorXf scores = mat * q;
  std::vector<std::size_t> rows(m);
  for (std::size_t i = 0; i < m; ++i) rows[i] = i;
  const std::size_t kk = std::min(k, m);
  std::partial_sort(rows.begin(), rows.begin() + static_cast<long>(kk), rows.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[static_cast<Eigen::Index>(a)] !=
                          scores[static_cast<Eigen::Index>(b)])
                        return scores[static_cast<Eigen::Index>(a)] >
                               scores[static_cast<Eigen::Index>(b)];
                      return a < b;
                    });
  std::vector<SearchHit> hits;
  for (std::size_t i = 0; i < kk; ++i)
    hits.push_back({index.ids[rows[i]], scores[static_cast<Eigen::Index>(rows[i])],
                    rows[i]});
  return hits;
}

// fraction of queries whose gold id appears in the top k hits
inline double recall_at_k(const std::vector<std::vector<SearchHit>>& results,
                          const std::vector<std::string>& gold, std::size_t k) {
  if (results.size() != gold.size() || results.empty())
    throw IndexError("recall_at_k: size mismatch or empty");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const std::size_t lim = std::min(k, results[i].size());
    for (std::size_t j = 0; j < lim; ++j)
      if (results[i][j].id == gold[i]) {
        ++hit;
        break;
      }
  }
  return static_cast<double>(hit) / static_cast<double>(results.size());
}

}  // namespace textreact::retriever
