#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "textreact/nn.hpp"

using namespace textreact;
using namespace textreact::nn;

namespace {

TransformerConfig tiny_config() {
  TransformerConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.d_ff = 16;
  c.max_len = 16;
  c.vocab_size = 12;
  return c;
}

}  // namespace

TEST_CASE("schedule warms up linearly then decays linearly") {
  ScheduleConfig s;
  s.base_lr = 2.0;
  s.warmup_fraction = 0.1;
  s.decay = DecayKind::linear;
  s.total_steps = 100;
  // warmup = 10 steps: lr(5) = base * 5/10
  REQUIRE_THAT(schedule_lr(s, 5), Catch::Matchers::WithinRel(1.0, 1e-12));
  REQUIRE_THAT(schedule_lr(s, 10), Catch::Matchers::WithinRel(2.0, 1e-12));
  // linear decay: lr(55) = base * (1 - 45/90)
  REQUIRE_THAT(schedule_lr(s, 55), Catch::Matchers::WithinRel(1.0, 1e-12));
  REQUIRE(schedule_lr(s, 100) == 0.0);
}

TEST_CASE("cosine decay hits base at warmup end and zero at the end") {
  ScheduleConfig s;
  s.base_lr = 1.0;
  s.warmup_fraction = 0.2;
  s.decay = DecayKind::cosine;
  s.total_steps = 50;
  REQUIRE_THAT(schedule_lr(s, 10), Catch::Matchers::WithinRel(1.0, 1e-12));
  // halfway through decay: 0.5*(1+cos(pi/2)) = 0.5
  REQUIRE_THAT(schedule_lr(s, 30), Catch::Matchers::WithinAbs(0.5, 1e-12));
  REQUIRE_THAT(schedule_lr(s, 50), Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("first Adam step matches the closed form") {
  // with zero moments, step 1: m_hat = g, v_hat = g^2,
  // delta = lr * g / (|g| + eps)
  Tape<double> t;
  auto* p = t.param("p", 1, 3);
  p->val = {1.0, -2.0, 0.5};
  p->grad = {0.3, -0.7, 0.0};
  ScheduleConfig s;
  s.base_lr = 0.01;
  s.total_steps = 0;  // constant lr
  Adam<double> adam(s);
  adam.step(t.params());
  const double eps = 1e-8;
  REQUIRE_THAT(p->val[0],
               Catch::Matchers::WithinAbs(1.0 - 0.01 * 0.3 / (0.3 + eps), 1e-12));
  REQUIRE_THAT(p->val[1],
               Catch::Matchers::WithinAbs(-2.0 + 0.01 * 0.7 / (0.7 + eps), 1e-12));
  REQUIRE_THAT(p->val[2], Catch::Matchers::WithinAbs(0.5, 1e-15));
}

TEST_CASE("second Adam step matches a hand-rolled reference") {
  Tape<double> t;
  auto* p = t.param("p", 1, 1);
  p->val = {1.0};
  ScheduleConfig s;
  s.base_lr = 0.1;
  s.total_steps = 0;
  Adam<double> adam(s);
  // reference implementation
  double m = 0, v = 0, x = 1.0;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double grads[2] = {0.5, -0.25};
  for (int step = 1; step <= 2; ++step) {
    const double g = grads[step - 1];
    p->grad = {g};
    adam.step(t.params());
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, step));
    const double vh = v / (1 - std::pow(b2, step));
    x -= 0.1 * mh / (std::sqrt(vh) + eps);
    REQUIRE_THAT(p->val[0], Catch::Matchers::WithinAbs(x, 1e-12));
  }
}

TEST_CASE("encoder forward is deterministic and pools position zero") {
  Tape<float> t;
  Rng rng(3);
  Encoder<float> enc;
  enc.init(t, "enc", tiny_config(), rng);
  std::vector<int> ids{1, 6, 7, 8, 2};
  auto* h1 = enc.forward(t, ids);
  auto* p1 = enc.pooled(t, h1);
  REQUIRE(h1->rows == 5);
  REQUIRE(p1->rows == 1);
  for (int j = 0; j < 8; ++j) REQUIRE(p1->val[j] == h1->val[j]);
  std::vector<float> first(p1->val);
  t.clear_temps();
  auto* p2 = enc.pooled(t, enc.forward(t, ids));
  REQUIRE(p2->val == first);
}

TEST_CASE("decoder is causal: a later token cannot change earlier logits") {
  Tape<float> t;
  Rng rng(4);
  auto cfg = tiny_config();
  TokenDecoder<float> dec;
  dec.init(t, "dec", cfg, rng);
  auto* l1 = dec.forward(t, {1, 5, 6}, nullptr);
  std::vector<float> row0(l1->val.begin(), l1->val.begin() + cfg.vocab_size);
  std::vector<float> row1(l1->val.begin() + cfg.vocab_size,
                          l1->val.begin() + 2 * cfg.vocab_size);
  t.clear_temps();
  auto* l2 = dec.forward(t, {1, 5, 9}, nullptr);  // change only position 2
  for (int j = 0; j < cfg.vocab_size; ++j) {
    REQUIRE(l2->val[j] == row0[j]);
    REQUIRE(l2->val[cfg.vocab_size + j] == row1[j]);
  }
}

TEST_CASE("cross attention makes decoder output depend on memory") {
  Tape<float> t;
  Rng rng(5);
  auto cfg = tiny_config();
  TokenDecoder<float> dec;
  dec.init(t, "dec", cfg, rng);
  auto* mem1 = t.temp(3, cfg.d_model, false);
  for (auto& v : mem1->val) v = 0.1f;
  auto* out1 = dec.forward(t, {1, 5}, mem1);
  std::vector<float> vals = out1->val;
  t.clear_temps();
  auto* mem2 = t.temp(3, cfg.d_model, false);
  for (auto& v : mem2->val) v = -0.4f;
  auto* out2 = dec.forward(t, {1, 5}, mem2);
  REQUIRE(out2->val != vals);
}

TEST_CASE("checkpoint round-trips parameters and named config") {
  const std::string path =
      (std::filesystem::temp_directory_path() / "tr_test_ckpt.bin").string();
  Tape<float> t;
  Rng rng(6);
  Encoder<float> enc;
  enc.init(t, "enc", tiny_config(), rng);
  std::vector<std::vector<float>> saved;
  for (auto* p : t.params()) saved.push_back(p->val);
  save_checkpoint(path, {{"kind", 7}, {"d_model", 8}}, t.params());
  for (auto* p : t.params())
    for (auto& v : p->val) v = 0.0f;
  auto conf = load_checkpoint(path, t.params());
  REQUIRE(conf.size() == 2);
  REQUIRE(conf[0].first == "kind");
  REQUIRE(conf[0].second == 7);
  std::size_t i = 0;
  for (auto* p : t.params()) REQUIRE(p->val == saved[i++]);
  std::filesystem::remove(path);
}

TEST_CASE("loading a checkpoint with a wrong shape fails") {
  const std::string path =
      (std::filesystem::temp_directory_path() / "tr_test_ckpt2.bin").string();
  {
    Tape<float> t;
    auto* p = t.param("w", 2, 2);
    p->val = {1, 2, 3, 4};
    save_checkpoint(path, {}, t.params());
  }
  Tape<float> t2;
  t2.param("w", 2, 3);
  REQUIRE_THROWS_AS(load_checkpoint(path, t2.params()), CheckpointError);
  std::filesystem::remove(path);
}

TEST_CASE("encoder gradients verify against finite differences in double") {
  Tape<double> t;
  Rng rng(9);
  Encoder<double> enc;
  enc.init(t, "enc", tiny_config(), rng);
  std::vector<int> ids{1, 6, 7, 10, 2};
  auto build = [&]() {
    auto* h = enc.forward(t, ids);
    return ops::cross_entropy(
        t, ops::matmul_nt(t, h, h), {0, 1, 2, 3, 4}, -1, ops::Reduction::mean);
  };
  Rng crng(10);
  auto rep = grad_check<double>(t, build, 40, crng);
  REQUIRE(rep.max_rel_err < 1e-6);
}

TEST_CASE("dropout zeroes activations at the configured rate in training") {
  Tape<double> t;
  auto* a = t.temp(100, 10, false);
  for (auto& v : a->val) v = 1.0;
  Rng rng(11);
  auto* d = ops::dropout(t, a, 0.25, &rng);
  int zeros = 0;
  double sum = 0.0;
  for (double v : d->val) {
    if (v == 0.0) ++zeros;
    sum += v;
  }
  REQUIRE(std::abs(zeros / 1000.0 - 0.25) < 0.04);
  // inverted dropout preserves the expectation
  REQUIRE(std::abs(sum / 1000.0 - 1.0) < 0.1);
  // rate zero or no rng is identity
  auto* id = ops::dropout(t, a, 0.0, &rng);
  REQUIRE(id->val == a->val);
}
