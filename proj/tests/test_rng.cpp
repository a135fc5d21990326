#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>

#include "textreact/rng.hpp"

using textreact::Rng;

TEST_CASE("same seed reproduces the same stream") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("different seeds diverge") {
  Rng a(1), b(2);
  int same = 0;
  for (int i = 0; i < 100; ++i)
    if (a.next_u64() == b.next_u64()) ++same;
  REQUIRE(same == 0);
}

TEST_CASE("uniform lies in [0,1) and has mean near one half") {
  Rng rng(7);
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  REQUIRE(std::abs(sum / n - 0.5) < 0.01);
}

TEST_CASE("uniform_int covers the full range and stays in bounds") {
  Rng rng(3);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const std::uint64_t v = rng.uniform_int(7);
    REQUIRE(v < 7);
    seen.insert(v);
  }
  REQUIRE(seen.size() == 7);
}

TEST_CASE("bernoulli frequency tracks p") {
  Rng rng(11);
  int hits = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i)
    if (rng.bernoulli(0.3)) ++hits;
  REQUIRE(std::abs(static_cast<double>(hits) / n - 0.3) < 0.01);
  Rng r2(1);
  for (int i = 0; i < 100; ++i) {
    REQUIRE_FALSE(r2.bernoulli(0.0));
    REQUIRE(r2.bernoulli(1.0));
  }
}

TEST_CASE("poisson sample mean and variance approximate lambda") {
  Rng rng(5);
  const int n = 50000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = static_cast<double>(rng.poisson(3.0));
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  REQUIRE(std::abs(mean - 3.0) < 0.05);
  REQUIRE(std::abs(var - 3.0) < 0.15);
}

TEST_CASE("normal has approximately unit variance and zero mean") {
  Rng rng(13);
  const int n = 50000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  REQUIRE(std::abs(mean) < 0.02);
  REQUIRE(std::abs(sq / n - mean * mean - 1.0) < 0.03);
}

TEST_CASE("shuffle produces a permutation") {
  Rng rng(9);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[i] = i;
  std::vector<int> orig = v;
  rng.shuffle(v);
  REQUIRE(v != orig);  // astronomically unlikely to be identity
  std::sort(v.begin(), v.end());
  REQUIRE(v == orig);
}

TEST_CASE("sample_without_replacement yields k distinct indices below n") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    auto picks = rng.sample_without_replacement(10, 4);
    REQUIRE(picks.size() == 4);
    std::set<std::size_t> s(picks.begin(), picks.end());
    REQUIRE(s.size() == 4);
    for (std::size_t p : picks) REQUIRE(p < 10);
  }
}

TEST_CASE("sample_without_replacement is uniform over subsets") {
  // each index should appear with frequency k/n
  Rng rng(23);
  std::vector<int> count(6, 0);
  const int trials = 60000;
  for (int t = 0; t < trials; ++t)
    for (std::size_t p : rng.sample_without_replacement(6, 2)) ++count[p];
  for (int c : count)
    REQUIRE(std::abs(static_cast<double>(c) / trials - 2.0 / 6.0) < 0.01);
}
