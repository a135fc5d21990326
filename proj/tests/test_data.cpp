#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "textreact/data.hpp"

using namespace textreact;
using namespace textreact::data;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("corpus JSONL round-trips and rejects duplicate ids") {
  Corpus c;
  c.add({"t1", "a mixture of CCO and CCN was stirred .", 2012});
  c.add({"t2", "preparation of c1ccccc1 .", 2015});
  REQUIRE_THROWS_AS(c.add({"t1", "again", 2016}), DataError);
  const std::string path = tmp_path("tr_corpus.jsonl");
  write_corpus(c, path);
  Corpus back = load_corpus(path);
  REQUIRE(back.size() == 2);
  REQUIRE(back.find("t2")->text == "preparation of c1ccccc1 .");
  REQUIRE(back.find("t1")->year == 2012);
  std::filesystem::remove(path);
}

TEST_CASE("random split partitions ids exactly by the rounded ratios") {
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.push_back("r" + std::to_string(i));
  auto s = make_random_split(ids, {0.8, 0.1, 0.1}, 5);
  REQUIRE(s.train.size() == 80);
  REQUIRE(s.valid.size() == 10);
  REQUIRE(s.test.size() == 10);
  std::set<std::string> all(s.train.begin(), s.train.end());
  all.insert(s.valid.begin(), s.valid.end());
  all.insert(s.test.begin(), s.test.end());
  REQUIRE(all.size() == 100);  // disjoint and complete
  auto s2 = make_random_split(ids, {0.8, 0.1, 0.1}, 5);
  REQUIRE(s2.train == s.train);  // deterministic per seed
  auto s3 = make_random_split(ids, {0.8, 0.1, 0.1}, 6);
  REQUIRE(s3.train != s.train);
}

TEST_CASE("random split validates its ratios") {
  REQUIRE_THROWS_AS(make_random_split({"a"}, {0.5, 0.2, 0.2}, 1), DataError);
  REQUIRE_THROWS_AS(make_random_split({}, {0.8, 0.1, 0.1}, 1), DataError);
}

TEST_CASE("time split routes records by year and counts dropped ones") {
  std::vector<ReactionRecord> recs;
  auto rec = [](const std::string& id, int year) {
    ReactionRecord r;
    r.id = id;
    r.year = year;
    return r;
  };
  recs.push_back(rec("a", 2012));
  recs.push_back(rec("b", 2014));
  recs.push_back(rec("c", 2015));
  recs.push_back(rec("d", 2016));
  recs.push_back(rec("e", 2017));  // outside every window
  auto res = make_time_split(recs, 2015, {2015}, {2016});
  REQUIRE(res.split.train == std::vector<std::string>{"a", "b"});
  REQUIRE(res.split.valid == std::vector<std::string>{"c"});
  REQUIRE(res.split.test == std::vector<std::string>{"d"});
  REQUIRE(res.dropped == 1);
  REQUIRE_THROWS_AS(make_time_split(recs, 2000, {2001}, {2016}), DataError);
}

TEST_CASE("split JSON round-trips") {
  DatasetSplit s;
  s.train = {"a", "b"};
  s.valid = {"c"};
  s.test = {"d"};
  const std::string path = tmp_path("tr_split.json");
  write_split(s, path);
  auto back = load_split(path);
  REQUIRE(back.train == s.train);
  REQUIRE(back.valid == s.valid);
  REQUIRE(back.test == s.test);
  std::filesystem::remove(path);
}

TEST_CASE("vocab reserves the sixteen special ids in order") {
  Vocabs v = build_vocabs({}, Corpus());
  REQUIRE(v.tokens[Vocabs::kPad] == "[PAD]");
  REQUIRE(v.tokens[Vocabs::kCls] == "[CLS]");
  REQUIRE(v.tokens[Vocabs::kSep] == "[SEP]");
  REQUIRE(v.tokens[Vocabs::kMask] == "[MASK]");
  REQUIRE(v.tokens[Vocabs::kUnk] == "[UNK]");
  REQUIRE(v.tokens[Vocabs::kEos] == "[EOS]");
  for (int j = 0; j < Vocabs::kNumNb; ++j)
    REQUIRE(v.tokens[Vocabs::kNb0 + j] == "[NB" + std::to_string(j) + "]");
  REQUIRE(v.size() == Vocabs::kNumSpecials);
  REQUIRE(v.id("never-seen-token") == Vocabs::kUnk);
}

TEST_CASE("text tokenizer expands SMILES-parsable words into SMILES tokens") {
  auto toks = tokenize_text("preparation of CCO .");
  REQUIRE(toks == std::vector<std::string>{"preparation", "of", "C", "C", "O", "."});
  auto plain = tokenize_text("the catalyst pd-c was added");
  REQUIRE(plain ==
          std::vector<std::string>{"the", "catalyst", "pd-c", "was", "added"});
}

TEST_CASE("condition encoding maps strings to slot ids with UNK fallback") {
  ReactionRecord r;
  r.id = "r1";
  r.product = "CCO";
  r.reactants = {"CC", "O"};
  r.conditions = {"pd-c", "dmf", "", "tea", ""};
  r.text_id = "t1";
  Corpus c;
  c.add({"t1", "using pd-c in dmf with tea . preparation of CCO .", 2012});
  Vocabs v = build_vocabs({&r}, c);
  auto ids = v.encode_conditions(r.conditions);
  REQUIRE(v.slot_token(0, ids[0]) == "pd-c");
  REQUIRE(ids[2] == 0);  // NONE
  auto unk = v.encode_conditions({"mystery", "", "", "", ""});
  REQUIRE(unk[0] == 1);  // [UNK]
  const std::string path = tmp_path("tr_vocab.json");
  save_vocabs(v, path);
  Vocabs back = load_vocabs(path);
  REQUIRE(back.tokens == v.tokens);
  REQUIRE(back.slot_tokens == v.slot_tokens);
  std::filesystem::remove(path);
}

TEST_CASE("synthetic generator is byte-identical per seed") {
  SynthParams p;
  p.n_reactions = 80;
  p.n_types = 10;
  const auto [c1, d1] = generate_synthetic(p, 21);
  const auto [c2, d2] = generate_synthetic(p, 21);
  const std::string pa = tmp_path("tr_gen_a.jsonl"), pb = tmp_path("tr_gen_b.jsonl");
  write_corpus(c1, pa);
  write_corpus(c2, pb);
  REQUIRE(file_bytes(pa) == file_bytes(pb));
  write_reactions(d1, pa);
  write_reactions(d2, pb);
  REQUIRE(file_bytes(pa) == file_bytes(pb));
  const auto [c3, d3] = generate_synthetic(p, 22);
  write_corpus(c3, pb);
  REQUIRE(file_bytes(pa) != file_bytes(pb));
  std::filesystem::remove(pa);
  std::filesystem::remove(pb);
}

TEST_CASE("every gold paragraph mentions all assigned condition strings") {
  SynthParams p;
  p.n_reactions = 150;
  p.n_types = 15;
  const auto [corpus, ds] = generate_synthetic(p, 9);
  REQUIRE(ds.records.size() == 150);
  for (const auto& r : ds.records) {
    REQUIRE(r.text_id.has_value());
    const Paragraph* para = corpus.find(*r.text_id);
    REQUIRE(para != nullptr);
    for (const auto& cond : r.conditions)
      if (!cond.empty())
        REQUIRE(para->text.find(cond) != std::string::npos);
    REQUIRE(para->text.find(r.product) != std::string::npos);
  }
}

TEST_CASE("generated SMILES parse and products are unique") {
  SynthParams p;
  p.n_reactions = 100;
  p.n_types = 10;
  const auto [corpus, ds] = generate_synthetic(p, 33);
  std::set<std::string> products;
  for (const auto& r : ds.records) {
    REQUIRE_NOTHROW(chem::parse_smiles(r.product));
    for (const auto& s : r.reactants) REQUIRE_NOTHROW(chem::parse_smiles(s));
    products.insert(r.product);
  }
  REQUIRE(products.size() == ds.records.size());
}

TEST_CASE("zero condition noise makes same-type reactions share conditions") {
  SynthParams p;
  p.n_reactions = 60;
  p.n_types = 6;
  p.condition_noise = 0.0;
  const auto [corpus, ds] = generate_synthetic(p, 14);
  // group by full condition set: there should be at most n_types groups
  std::set<std::array<std::string, 5>> groups;
  for (const auto& r : ds.records) groups.insert(r.conditions);
  REQUIRE(groups.size() <= 6);
}

TEST_CASE("generator rejects invalid parameters") {
  SynthParams p;
  p.n_reactions = -1;
  REQUIRE_THROWS_AS(generate_synthetic(p, 1), DataError);
  SynthParams z;
  z.n_reactions = 0;  // explicit empty request is valid
  const auto [zc, zd] = generate_synthetic(z, 1);
  REQUIRE(zc.size() == 0);
  REQUIRE(zd.records.empty());
  SynthParams q;
  q.n_fragments = 2;
  q.n_types = 50;  // more types than distinct fragment pairs
  REQUIRE_THROWS_AS(generate_synthetic(q, 1), DataError);
}

TEST_CASE("dataset loader validates SMILES and resolves pairing") {
  const std::string cpath = tmp_path("tr_ds_corpus.jsonl");
  const std::string dpath = tmp_path("tr_ds.jsonl");
  {
    Corpus c;
    c.add({"t1", "some text .", 2012});
    write_corpus(c, cpath);
    std::ofstream os(dpath);
    os << R"({"id":"r1","reactants":["CC"],"product":"CCO","conditions":{"catalyst":"x","solvent1":"","solvent2":"","reagent1":"","reagent2":""},"text_id":"t1","year":2012})"
       << "\n";
    os << R"({"id":"r2","reactants":["CC"],"product":"CCN","conditions":{"catalyst":"x","solvent1":"","solvent2":"","reagent1":"","reagent2":""},"text_id":"missing","year":2013})"
       << "\n";
  }
  Corpus c = load_corpus(cpath);
  Dataset ds = load_reactions(dpath, Task::rcr, &c);
  REQUIRE(ds.records.size() == 2);
  REQUIRE(ds.find("r1")->text_id.has_value());
  REQUIRE_FALSE(ds.find("r2")->text_id.has_value());  // unpaired
  REQUIRE(ds.unpaired_ids == std::vector<std::string>{"r2"});
  {
    std::ofstream os(dpath);
    os << R"({"id":"r1","reactants":["C1CC"],"product":"CCO","conditions":{"catalyst":"","solvent1":"","solvent2":"","reagent1":"","reagent2":""},"year":2012})"
       << "\n";
  }
  REQUIRE_THROWS_AS(load_reactions(dpath, Task::rcr, &c), DataError);
  std::filesystem::remove(cpath);
  std::filesystem::remove(dpath);
}

TEST_CASE("retro records carry template and center information") {
  const std::string dpath = tmp_path("tr_retro.jsonl");
  {
    std::ofstream os(dpath);
    os << R"({"id":"r1","reactants":["CC","O"],"product":"CCO","template_id":3,"center":{"kind":"bond","atoms":[1,2]},"year":2012})"
       << "\n";
  }
  Dataset ds = load_reactions(dpath, Task::retro);
  const auto* r = ds.find("r1");
  REQUIRE(r->template_id == 3);
  REQUIRE(r->center->kind == RetroCenter::Kind::bond);
  REQUIRE(r->center->atom_a == 1);
  REQUIRE(r->center->atom_b == 2);
  // round trip
  write_reactions(ds, dpath);
  Dataset back = load_reactions(dpath, Task::retro);
  REQUIRE(back.find("r1")->template_id == 3);
  std::filesystem::remove(dpath);
}

TEST_CASE("text_to_reaction_map inverts gold pairing") {
  SynthParams p;
  p.n_reactions = 40;
  p.n_types = 5;
  const auto [corpus, ds] = generate_synthetic(p, 2);
  auto m = text_to_reaction_map(ds);
  REQUIRE(m.size() == ds.records.size());
  for (const auto& r : ds.records) REQUIRE(m.at(*r.text_id) == r.id);
}
