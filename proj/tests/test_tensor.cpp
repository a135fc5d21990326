#include <catch2/catch_amalgamated.hpp>

#include "textreact/nn.hpp"

using namespace textreact::nn;

namespace {

Node<double>* make(Tape<double>& t, int r, int c, std::vector<double> v,
                   bool grad = true) {
  Node<double>* n = t.temp(r, c, grad);
  n->val = std::move(v);
  return n;
}

}  // namespace

TEST_CASE("matmul matches a hand-computed product") {
  Tape<double> t;
  auto* a = make(t, 2, 3, {1, 2, 3, 4, 5, 6});
  auto* b = make(t, 3, 2, {7, 8, 9, 10, 11, 12});
  auto* c = ops::matmul(t, a, b);
  REQUIRE(c->val == std::vector<double>{58, 64, 139, 154});
}

TEST_CASE("matmul_nt equals matmul against the transpose") {
  Tape<double> t;
  auto* a = make(t, 2, 3, {1, 2, 3, 4, 5, 6});
  auto* bt = make(t, 2, 3, {7, 9, 11, 8, 10, 12});  // transpose of b above
  auto* c = ops::matmul_nt(t, a, bt);
  REQUIRE(c->val == std::vector<double>{58, 64, 139, 154});
}

TEST_CASE("softmax of uniform logits is uniform") {
  Tape<double> t;
  auto* a = make(t, 1, 5, {3, 3, 3, 3, 3});
  auto* s = ops::softmax_rows(t, a);
  for (double v : s->val) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(0.2, 1e-15));
}

TEST_CASE("softmax of [10,-10] puts 2.06e-9 on the small logit") {
  // 1/(1+exp(20)) = 2.0611536181902037e-09
  Tape<double> t;
  auto* a = make(t, 1, 2, {10, -10});
  auto* s = ops::softmax_rows(t, a);
  REQUIRE_THAT(s->val[1], Catch::Matchers::WithinRel(2.0611536181902037e-09, 1e-12));
  REQUIRE_THAT(s->val[0] + s->val[1], Catch::Matchers::WithinAbs(1.0, 1e-15));
}

TEST_CASE("layer_norm output rows have zero mean and unit variance") {
  Tape<double> t;
  auto* a = make(t, 2, 4, {1, 2, 3, 4, -5, 0, 5, 10});
  auto* g = make(t, 1, 4, {1, 1, 1, 1});
  auto* b = make(t, 1, 4, {0, 0, 0, 0});
  auto* y = ops::layer_norm(t, a, g, b);
  for (int r = 0; r < 2; ++r) {
    double mean = 0, var = 0;
    for (int j = 0; j < 4; ++j) mean += y->val[r * 4 + j];
    mean /= 4;
    for (int j = 0; j < 4; ++j)
      var += (y->val[r * 4 + j] - mean) * (y->val[r * 4 + j] - mean);
    var /= 4;
    REQUIRE_THAT(mean, Catch::Matchers::WithinAbs(0.0, 1e-12));
    REQUIRE_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-4));  // eps shrinks it
  }
}

TEST_CASE("cross entropy of uniform logits equals ln V") {
  Tape<double> t;
  auto* logits = make(t, 3, 7, std::vector<double>(21, 0.42));
  auto* loss = ops::cross_entropy(t, logits, {0, 3, 6}, -1, ops::Reduction::mean);
  REQUIRE_THAT(loss->val[0], Catch::Matchers::WithinRel(std::log(7.0), 1e-12));
}

TEST_CASE("cross entropy respects the ignore id and sum reduction") {
  Tape<double> t;
  auto* logits = make(t, 2, 4, std::vector<double>(8, 0.0));
  auto* loss = ops::cross_entropy(t, logits, {-1, 2}, -1, ops::Reduction::sum);
  REQUIRE_THAT(loss->val[0], Catch::Matchers::WithinRel(std::log(4.0), 1e-12));
}

TEST_CASE("gelu matches the exact erf formulation") {
  Tape<double> t;
  auto* a = make(t, 1, 3, {-1.0, 0.0, 2.0});
  auto* y = ops::gelu(t, a);
  auto ref = [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); };
  for (int j = 0; j < 3; ++j)
    REQUIRE_THAT(y->val[j], Catch::Matchers::WithinAbs(ref(a->val[j]), 1e-12));
}

TEST_CASE("embedding selects table rows and routes gradients back") {
  Tape<double> t;
  auto* table = t.param("emb", 4, 2);
  table->val = {0, 1, 10, 11, 20, 21, 30, 31};
  auto* e = ops::embedding(t, table, {2, 0, 2});
  REQUIRE(e->val == std::vector<double>{20, 21, 0, 1, 20, 21});
  auto* s = ops::sum_all(t, e);
  t.backward(s);
  REQUIRE(table->grad[4] == 2.0);  // row 2 selected twice
  REQUIRE(table->grad[0] == 1.0);
  REQUIRE(table->grad[6] == 0.0);
}

TEST_CASE("gradients of a composite graph match finite differences") {
  Tape<double> t;
  auto* w = t.param("w", 3, 3);
  auto* g = t.param("g", 1, 3);
  auto* b = t.param("b", 1, 3);
  textreact::Rng rng(5);
  for (auto& v : w->val) v = rng.normal() * 0.3;
  for (auto& v : g->val) v = 1.0 + 0.1 * rng.normal();
  for (auto& v : b->val) v = 0.1 * rng.normal();

  auto build = [&]() {
    auto* x = make(t, 2, 3, {0.5, -1.0, 2.0, 1.5, 0.25, -0.75}, false);
    auto* h = ops::gelu(t, ops::matmul(t, x, w));
    auto* y = ops::layer_norm(t, h, g, b);
    return ops::cross_entropy(t, ops::softmax_rows(t, y), {0, 2}, -1,
                              ops::Reduction::mean);
  };
  textreact::Rng crng(8);
  auto rep = grad_check<double>(t, build, 30, crng);
  REQUIRE(rep.n_checked == 30);
  REQUIRE(rep.max_rel_err < 1e-7);
}

TEST_CASE("slice and concat are mutually inverse") {
  Tape<double> t;
  auto* a = make(t, 2, 4, {1, 2, 3, 4, 5, 6, 7, 8});
  auto* left = ops::slice_cols(t, a, 0, 2);
  auto* right = ops::slice_cols(t, a, 2, 2);
  auto* back = ops::concat_cols(t, {left, right});
  REQUIRE(back->val == a->val);
  auto* top = ops::slice_rows(t, a, 0, 1);
  auto* bottom = ops::slice_rows(t, a, 1, 1);
  auto* stacked = ops::concat_rows(t, {top, bottom});
  REQUIRE(stacked->val == a->val);
}

TEST_CASE("params persist across clear_temps but temps do not") {
  Tape<double> t;
  auto* p = t.param("p", 1, 2);
  p->val = {1.0, 2.0};
  make(t, 1, 2, {9, 9});
  t.clear_temps();
  REQUIRE(t.params().size() == 1);
  REQUIRE(p->val == std::vector<double>{1.0, 2.0});
}

TEST_CASE("shape mismatches raise NnError") {
  Tape<double> t;
  auto* a = make(t, 2, 3, std::vector<double>(6, 0.0));
  auto* b = make(t, 2, 3, std::vector<double>(6, 0.0));
  REQUIRE_THROWS_AS(ops::matmul(t, a, b), NnError);
}
