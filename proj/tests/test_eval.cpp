#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "textreact/eval.hpp"

using namespace textreact;
using namespace textreact::eval;
using data::Corpus;
using data::Dataset;
using data::Paragraph;
using data::ReactionRecord;

namespace {

Corpus make_corpus() {
  Corpus c;
  for (int i = 0; i < 6; ++i) {
    Paragraph p;
    p.id = "t" + std::to_string(i);
    p.text = "paragraph " + std::to_string(i);
    p.year = 2010 + i;
    c.add(p);
  }
  return c;
}

Dataset make_dataset() {
  Dataset ds;
  ds.task = data::Task::rcr;
  for (int i = 0; i < 4; ++i) {
    ReactionRecord r;
    r.id = "r" + std::to_string(i);
    r.reactants = {"CCO", "CC"};
    r.product = "CCOC";
    r.conditions[0] = "cat" + std::to_string(i % 2);
    r.year = 2012 + i;
    r.text_id = "t" + std::to_string(i);
    ds.add(std::move(r));
  }
  return ds;
}

}  // namespace

TEST_CASE("full scenario returns the corpus untouched") {
  auto corpus = make_corpus();
  auto ds = make_dataset();
  auto out = build_scenario(corpus, ds, {"r0", "r1"}, Scenario{});
  REQUIRE(out.size() == corpus.size());
  for (std::size_t i = 0; i < corpus.paragraphs.size(); ++i)
    REQUIRE(out.paragraphs[i].id == corpus.paragraphs[i].id);
}

TEST_CASE("gold_removed drops only the test golds") {
  auto corpus = make_corpus();
  auto ds = make_dataset();
  Scenario sc;
  sc.kind = ScenarioKind::gold_removed;
  auto out = build_scenario(corpus, ds, {"r1", "r3"}, sc);
  std::set<std::string> ids;
  for (const auto& p : out.paragraphs) ids.insert(p.id);
  REQUIRE(ids == std::set<std::string>{"t0", "t2", "t4", "t5"});
}

TEST_CASE("ts_corpus keeps paragraphs up to the cutoff year") {
  auto corpus = make_corpus();
  auto ds = make_dataset();
  Scenario sc;
  sc.kind = ScenarioKind::ts_corpus;
  sc.year_cutoff = 2012;
  auto out = build_scenario(corpus, ds, {}, sc);
  REQUIRE(out.size() == 3);  // years 2010..2012
  for (const auto& p : out.paragraphs) REQUIRE(p.year <= 2012);
}

TEST_CASE("a scenario that empties the corpus is an error") {
  auto corpus = make_corpus();
  auto ds = make_dataset();
  Scenario sc;
  sc.kind = ScenarioKind::ts_corpus;
  sc.year_cutoff = 1990;
  REQUIRE_THROWS_AS(build_scenario(corpus, ds, {}, sc), EvalError);
  try {
    build_scenario(corpus, ds, {}, sc);
  } catch (const EvalError& e) {
    REQUIRE(e.kind == EvalErrorKind::EmptyResultCorpus);
  }
}

TEST_CASE("top-k accuracy from gold ranks") {
  std::vector<int> ranks = {0, 1, 3, -1};
  auto rep = topk_from_ranks(ranks, {1, 2, 4});
  REQUIRE_THAT(rep.accuracy.at(1), Catch::Matchers::WithinAbs(0.25, 1e-12));
  REQUIRE_THAT(rep.accuracy.at(2), Catch::Matchers::WithinAbs(0.50, 1e-12));
  REQUIRE_THAT(rep.accuracy.at(4), Catch::Matchers::WithinAbs(0.75, 1e-12));
  REQUIRE(rep.n_records == 4);
  REQUIRE_THROWS_AS(topk_from_ranks({}, {1}), EvalError);
}

TEST_CASE("gold ranks deduplicate predictions before counting") {
  using P = RcrPrediction;
  std::vector<std::vector<P>> preds(1);
  preds[0].push_back(P{{1, 0, 0, 0, 0}});
  preds[0].push_back(P{{1, 0, 0, 0, 0}});  // duplicate, must not consume a rank
  preds[0].push_back(P{{2, 0, 0, 0, 0}});  // gold
  std::array<int, predictor::kRcrSteps> gold = {2, 0, 0, 0, 0};
  auto key = [](const P& p) {
    std::string s;
    for (int v : p.slots) s += std::to_string(v) + "\x1f";
    return s;
  };
  auto ranks = gold_ranks<P>(
      preds, [&](std::size_t, const P& p) { return rcr_match(p, gold); }, key);
  REQUIRE(ranks == std::vector<int>{1});

  // gold absent -> -1
  gold = {9, 9, 9, 9, 9};
  ranks = gold_ranks<P>(
      preds, [&](std::size_t, const P& p) { return rcr_match(p, gold); }, key);
  REQUIRE(ranks == std::vector<int>{-1});
}

TEST_CASE("reactant ordering never affects the template-free match") {
  REQUIRE(sorted_reactants({"CCO", "CC"}) == sorted_reactants({"CC", "CCO"}));
  REQUIRE(sorted_reactants({"CC", "CC", "O"}) !=
          sorted_reactants({"CC", "O", "O"}));
}

TEST_CASE("fingerprint baseline agrees with a brute-force oracle") {
  data::SynthParams p;
  p.n_reactions = 60;
  p.n_types = 6;
  const auto [corpus, ds] = data::generate_synthetic(p, 31);
  std::vector<const ReactionRecord*> train(
      ds.records.size() > 40 ? 40 : ds.records.size(), nullptr);
  for (std::size_t i = 0; i < train.size(); ++i) train[i] = &ds.records[i];

  FpBaseline base;
  base.build(train);

  for (std::size_t q = 40; q < std::min<std::size_t>(ds.records.size(), 55); ++q) {
    const auto& query = ds.records[q];
    auto got = base.predict(query, 5);

    // oracle: stable sort by distance, dedup condition sets in order
    const auto qfp = record_reaction_fp(query);
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t i = 0; i < train.size(); ++i)
      scored.push_back({chem::fp_distance(qfp, record_reaction_fp(*train[i])), i});
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<data::ConditionStrings> want;
    std::set<data::ConditionStrings> seen;
    for (const auto& [d, i] : scored) {
      if (static_cast<int>(want.size()) >= 5) break;
      if (seen.insert(train[i]->conditions).second)
        want.push_back(train[i]->conditions);
    }
    REQUIRE(got == want);
  }
  REQUIRE_THROWS_AS(FpBaseline{}.build({}), EvalError);
}

TEST_CASE("neighbor distance stats match a direct loop") {
  data::SynthParams p;
  p.n_reactions = 10;
  p.n_types = 3;
  const auto [corpus, ds] = data::generate_synthetic(p, 32);
  auto t2r = data::text_to_reaction_map(ds);

  const auto& rec = ds.records[0];
  std::vector<std::string> nb_ids = {*ds.records[1].text_id, *ds.records[2].text_id,
                                     "unmapped_text"};
  auto stats = neighbor_distance_stats(rec, nb_ids, t2r, ds);
  REQUIRE(stats.n_mapped == 2);

  const auto f0 = record_reaction_fp(rec);
  const auto f1 = record_reaction_fp(ds.records[1]);
  const auto f2 = record_reaction_fp(ds.records[2]);
  const double want_in = (chem::fp_distance(f0, f1) + chem::fp_distance(f0, f2)) / 2;
  REQUIRE_THAT(stats.avg_input_neighbor, Catch::Matchers::WithinRel(want_in, 1e-12));
  REQUIRE(stats.has_inter);
  REQUIRE_THAT(stats.avg_inter_neighbor,
               Catch::Matchers::WithinRel(chem::fp_distance(f1, f2), 1e-12));

  // single mapped neighbor: no inter-neighbor term
  auto one = neighbor_distance_stats(rec, {*ds.records[1].text_id}, t2r, ds);
  REQUIRE_FALSE(one.has_inter);

  REQUIRE_THROWS_AS(neighbor_distance_stats(rec, {"nope"}, t2r, ds), EvalError);
}

TEST_CASE("metrics serialize with stable keys") {
  MetricsReport rep;
  rep.task = "rcr";
  rep.scenario = "full";
  rep.split = "test";
  rep.ks = {1, 3};
  rep.accuracy[1] = 0.5;
  rep.accuracy[3] = 0.75;
  rep.n_records = 8;
  rep.config_hash = "abc";
  auto j = metrics_json(rep);
  REQUIRE(j["task"] == "rcr");
  REQUIRE(j["accuracy"]["top1"] == 0.5);
  REQUIRE(j["accuracy"]["top3"] == 0.75);
  REQUIRE(j["counts"]["records"] == 8);
  REQUIRE(j["config_hash"] == "abc");
}
