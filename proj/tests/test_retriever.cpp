#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "textreact/retriever.hpp"

using namespace textreact;
using namespace textreact::retriever;
using data::Vocabs;

namespace {

nn::TransformerConfig tiny_config(int vocab_size) {
  nn::TransformerConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.d_ff = 16;
  c.max_len = 32;
  c.vocab_size = vocab_size;
  return c;
}

}  // namespace

TEST_CASE("chem query for condition prediction covers reactants and product") {
  data::ReactionRecord r;
  r.reactants = {"CC", "O"};
  r.product = "CCO";
  Vocabs v = data::build_vocabs({&r}, data::Corpus());
  auto ids = chem_query_ids(r, data::Task::rcr, v, 64);
  REQUIRE(ids.front() == Vocabs::kCls);
  REQUIRE(ids.back() == Vocabs::kSep);
  // [CLS] C C . O [SEP] C C O [SEP]
  REQUIRE(ids.size() == 10);
  REQUIRE(std::count(ids.begin(), ids.end(), Vocabs::kSep) == 2);
  auto retro = chem_query_ids(r, data::Task::retro, v, 64);
  // [CLS] C C O [SEP]: product only
  REQUIRE(retro.size() == 5);
}

TEST_CASE("query truncation preserves the final separator") {
  data::ReactionRecord r;
  r.reactants = {"CCCCCCCCCCCCCCCC"};
  r.product = "CCCCCCCCCCCCCCCC";
  Vocabs v = data::build_vocabs({&r}, data::Corpus());
  auto ids = chem_query_ids(r, data::Task::rcr, v, 12);
  REQUIRE(ids.size() == 12);
  REQUIRE(ids.back() == Vocabs::kSep);
  auto t = text_ids("one two three four five six seven eight nine ten", v, 6);
  REQUIRE(t.size() == 6);
  REQUIRE(t.front() == Vocabs::kCls);
  REQUIRE(t.back() == Vocabs::kSep);
}

TEST_CASE("contrastive loss on identical embeddings is ln of the text count") {
  // with all rows equal, every softmax over 2n candidates is uniform:
  // per-query NLL = ln(2n), so the mean is ln(2n)
  nn::Tape<float> t;
  const int n = 2, d = 4;
  auto* q = t.temp(n, d, false);
  auto* x = t.temp(2 * n, d, false);
  for (auto& v : q->val) v = 0.5f;
  for (auto& v : x->val) v = 0.5f;
  auto* loss = contrastive_loss(t, q, x);
  REQUIRE_THAT(static_cast<double>(loss->val[0]),
               Catch::Matchers::WithinRel(std::log(2.0 * n), 1e-6));
}

TEST_CASE("contrastive loss is minimized by the matched pairing") {
  nn::Tape<float> t;
  auto fill = [&](std::vector<float> vals, int rows, int cols) {
    auto* node = t.temp(rows, cols, false);
    node->val = vals;
    return node;
  };
  // orthogonal matched pairs score 10 on the diagonal
  auto* q = fill({10, 0, 0, 10}, 2, 2);
  auto* good = fill({1, 0, 0, 1, 0, 0}, 3, 2);
  auto* bad = fill({0, 1, 1, 0, 0, 0}, 3, 2);
  REQUIRE(contrastive_loss(t, q, good)->val[0] <
          contrastive_loss(t, q, bad)->val[0]);
}

TEST_CASE("negative sampling avoids excluded rows and repeats") {
  Rng rng(3);
  std::unordered_set<std::size_t> exclude{0, 1, 2};
  for (int trial = 0; trial < 100; ++trial) {
    auto picks = sample_negatives(rng, 10, exclude, 4);
    REQUIRE(picks.size() == 4);
    std::set<std::size_t> s(picks.begin(), picks.end());
    REQUIRE(s.size() == 4);
    for (auto p : picks) {
      REQUIRE(p < 10);
      REQUIRE_FALSE(exclude.count(p));
    }
  }
  REQUIRE_THROWS_AS(sample_negatives(rng, 5, exclude, 3), data::DataError);
}

TEST_CASE("index binary format round-trips") {
  EmbeddingIndex idx;
  idx.d = 3;
  idx.ids = {"t1", "t2", "longer-id-string"};
  idx.data = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  const std::string path =
      (std::filesystem::temp_directory_path() / "tr_index.bin").string();
  save_index(idx, path);
  auto back = load_index(path);
  REQUIRE(back.d == 3);
  REQUIRE(back.ids == idx.ids);
  REQUIRE(back.data == idx.data);
  std::filesystem::remove(path);
  REQUIRE_THROWS_AS(load_index(path), IndexError);
}

TEST_CASE("exact search matches a brute-force oracle with tie-breaking") {
  Rng rng(11);
  const int m = 200, d = 16;
  EmbeddingIndex idx;
  idx.d = d;
  for (int i = 0; i < m; ++i) idx.ids.push_back("p" + std::to_string(i));
  idx.data.resize(static_cast<std::size_t>(m) * d);
  for (auto& v : idx.data) v = static_cast<float>(rng.normal());
  // force exact ties: rows 10 and 11 identical
  for (int j = 0; j < d; ++j) idx.data[11 * d + j] = idx.data[10 * d + j];

  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> q(d);
    for (auto& v : q) v = static_cast<float>(rng.normal());
    for (std::size_t k : {std::size_t(1), std::size_t(3), std::size_t(10)}) {
      auto hits = mips_search(idx, q, k);
      // oracle: full stable sort by (-score, row)
      std::vector<std::pair<float, std::size_t>> scored;
      for (std::size_t i = 0; i < m; ++i) {
        float s = 0;
        for (int j = 0; j < d; ++j) s += q[j] * idx.data[i * d + j];
        scored.push_back({s, i});
      }
      std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      REQUIRE(hits.size() == k);
      for (std::size_t i = 0; i < k; ++i) {
        REQUIRE(hits[i].row == scored[i].second);
        // summation order may differ between the search and the oracle
        REQUIRE_THAT(static_cast<double>(hits[i].score),
                     Catch::Matchers::WithinRel(static_cast<double>(scored[i].first),
                                                1e-4));
      }
    }
  }
}

TEST_CASE("recall counts gold appearances within the cutoff") {
  std::vector<std::vector<SearchHit>> results = {
      {{"a", 3, 0}, {"b", 2, 1}},
      {{"c", 3, 0}, {"d", 2, 1}},
  };
  REQUIRE(recall_at_k(results, {"a", "d"}, 1) == 0.5);
  REQUIRE(recall_at_k(results, {"a", "d"}, 2) == 1.0);
  REQUIRE(recall_at_k(results, {"x", "y"}, 2) == 0.0);
}

TEST_CASE("dual encoder embeds chem and text through separate towers") {
  data::ReactionRecord r;
  r.reactants = {"CC"};
  r.product = "CCO";
  data::Corpus corpus;
  corpus.add({"t1", "preparation of CCO .", 2012});
  Vocabs v = data::build_vocabs({&r}, corpus);
  nn::Tape<float> tape;
  Rng rng(4);
  DualEncoder<float> model;
  model.init(tape, tiny_config(v.size()), rng);
  auto qe = model.embed_chem(tape, chem_query_ids(r, data::Task::rcr, v, 32));
  auto te = model.embed_text(tape, text_ids("preparation of CCO .", v, 32));
  REQUIRE(qe.size() == 8);
  REQUIRE(te.size() == 8);
  REQUIRE(qe != te);  // distinct towers
  auto qe2 = model.embed_chem(tape, chem_query_ids(r, data::Task::rcr, v, 32));
  REQUIRE(qe == qe2);  // deterministic
}

TEST_CASE("a few training steps reduce the contrastive loss") {
  data::SynthParams p;
  p.n_reactions = 40;
  p.n_types = 5;
  const auto [corpus, ds] = data::generate_synthetic(p, 3);
  std::vector<std::string> train_ids;
  for (const auto& r : ds.records) train_ids.push_back(r.id);
  std::vector<const data::ReactionRecord*> recs;
  for (const auto& id : train_ids) recs.push_back(ds.find(id));
  Vocabs v = data::build_vocabs(recs, corpus);

  nn::Tape<float> tape;
  Rng rng(5);
  DualEncoder<float> model;
  model.init(tape, tiny_config(v.size()), rng);
  RetrieverTrainConfig tc;
  tc.epochs = 4;
  tc.lr = 1e-3;
  tc.max_chem_len = 32;
  tc.max_text_len = 32;
  auto hist = train_retriever(tape, model, corpus, ds, train_ids, v, tc);
  REQUIRE(hist.epoch_loss.size() == 4);
  REQUIRE(hist.epoch_loss.back() < hist.epoch_loss.front());
}

TEST_CASE("index build covers the whole corpus with encoder embeddings") {
  data::SynthParams p;
  p.n_reactions = 20;
  p.n_types = 4;
  const auto [corpus, ds] = data::generate_synthetic(p, 6);
  std::vector<const data::ReactionRecord*> recs;
  for (const auto& r : ds.records) recs.push_back(&r);
  Vocabs v = data::build_vocabs(recs, corpus);
  nn::Tape<float> tape;
  Rng rng(7);
  DualEncoder<float> model;
  model.init(tape, tiny_config(v.size()), rng);
  auto idx = build_index(tape, model, corpus, v, 32);
  REQUIRE(idx.ids.size() == corpus.size());
  REQUIRE(idx.d == 8);
  // row content equals a direct embedding of the same paragraph
  auto direct =
      model.embed_text(tape, text_ids(corpus.paragraphs[3].text, v, 32));
  for (int j = 0; j < 8; ++j) REQUIRE(idx.data[3 * 8 + j] == direct[j]);
}
