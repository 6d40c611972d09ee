/*
 * Copyright 2026 The CSSE-DDI Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <cmath>

#include "csse/scope.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace csse {
namespace {

using test_support::random_triples;

struct Fixture {
  RelGraph graph;
  SupernetParams params;
  Genotype genotype;
  LayerOutputs layers;
};

Fixture random_fixture(Rng& rng, std::size_t n, std::size_t dim = 4) {
  Fixture f;
  const auto ts = random_triples(rng, n, 2, 2 * n);
  f.graph = RelGraph::build(ts, n, 2);
  f.params = SupernetParams::init(n, 2, dim, 3, rng);
  f.genotype = sample_path(rng, 3);
  f.layers = encode(f.graph, f.genotype, f.params);
  return f;
}

Tensor random_beta(Rng& rng, std::size_t rows, std::size_t cols, double lo = -3.0, double hi = 3.0) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::matrix(rows, cols, std::move(v));
}

TEST(PairRepr, SameNodeSameHopHasEqualHalves) {
  Rng rng(1);
  const Fixture f = random_fixture(rng, 12);
  for (std::size_t i = 1; i <= 3; ++i) {
    const Tensor z = pair_repr(f.layers, 5, 5, i, i);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(z.at(0, k), z.at(0, 4 + k));
  }
  EXPECT_THROW(pair_repr(f.layers, 0, 1, 4, 1), std::out_of_range);
}

TEST(PairRepr, EqualsExplicitEgoSubgraphEncoding) {
  Rng rng(2026);
  double worst = 0.0;
  for (int g = 0; g < 10; ++g) worst = std::max(worst, oracles::ego_subgraph_gap(rng, 30));
  EXPECT_LE(worst, 1e-9);
}

TEST(PairRepr, InvariantUnderNodeRelabelling) {
  Rng rng(8);
  const std::size_t n = 20;
  const auto ts = random_triples(rng, n, 2, 40);
  const SupernetParams p = SupernetParams::init(n, 2, 4, 3, rng);
  const Genotype geno = sample_path(rng, 3);
  std::vector<NodeId> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<Triple> moved;
  for (const auto& t : ts) moved.push_back({perm[t.head], t.relation, perm[t.tail]});
  std::vector<std::size_t> inverse(n);
  for (std::size_t u = 0; u < n; ++u) inverse[perm[u]] = u;
  SupernetParams q = p;
  q.node_emb = gather_rows(p.node_emb, inverse);
  const auto a = encode(RelGraph::build(ts, n, 2), geno, p);
  const auto b = encode(RelGraph::build(moved, n, 2), geno, q);
  for (NodeId u = 0; u < n; u += 3) {
    for (NodeId v = 0; v < n; v += 4) {
      const Tensor za = pair_repr(a, u, v, 3, 2);
      const Tensor zb = pair_repr(b, perm[u], perm[v], 3, 2);
      for (std::size_t k = 0; k < za.size(); ++k) EXPECT_NEAR(za[k], zb[k], 1e-12);
    }
  }
}

TEST(ScoreScopes, ZeroWeightsGiveZeroScores) {
  Rng rng(3);
  Fixture f = random_fixture(rng, 10);
  const ScopeScorer zero{Tensor::zeros({8, 4}), Tensor::zeros({4, 1})};
  const Tensor beta = score_scopes(f.layers, 1, 2, zero, 3);
  EXPECT_EQ(beta.vec(), std::vector<double>(9, 0.0));
  const Tensor live = score_scopes(f.layers, 1, 2, ScopeScorer::of(f.params), 3);
  EXPECT_TRUE(live.all_finite());
  EXPECT_EQ(live.cols(), 9u);
}

TEST(ScoreScopes, GradientWrtNodeEmbeddings) {
  Rng rng(4);
  const Fixture f = random_fixture(rng, 8);
  const TensorFunction fn = [&f](const std::vector<Tensor>& x) {
    SupernetParams p = f.params;
    p.node_emb = x[0];
    const auto layers = encode(f.graph, f.genotype, p);
    return sum(score_scopes(layers, 2, 6, ScopeScorer::of(p), 3));
  };
  EXPECT_LT(finite_diff_check(fn, {f.params.node_emb}), 1e-5);
}

TEST(GumbelProbs, UniformBetaGivesUniformTable) {
  const Tensor p = gumbel_probs(Tensor::filled({2, 9}, 0.7), 0.05);
  for (double x : p.vec()) EXPECT_NEAR(x, 1.0 / 9.0, 1e-12);
}

TEST(GumbelProbs, LowTemperatureConcentrates) {
  Rng rng(5);
  for (int c = 0; c < 50; ++c) {
    std::vector<double> b{-4, -3, -2, -1, 0, 1, 2, 3, 4};
    rng.shuffle(b);
    for (auto& x : b) x += rng.uniform(-0.2, 0.2);
    const Tensor p = gumbel_probs(Tensor::matrix(1, 9, b), 0.01);
    EXPECT_GT(*std::max_element(p.vec().begin(), p.vec().end()), 0.99);
  }
}

TEST(GumbelProbs, RowsSumToOneUnderNoise) {
  Rng rng(6);
  for (int c = 0; c < 100; ++c) {
    const Tensor beta = random_beta(rng, 4, 9, -10.0, 10.0);
    const double tau = std::exp(rng.uniform(std::log(0.01), std::log(2.0)));
    const Tensor p = gumbel_probs(beta, tau, gumbel_noise(4, 9, rng));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < 9; ++k) s += p.at(r, k);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
  EXPECT_THROW(gumbel_probs(Tensor::zeros({1, 9}), 0.0), std::invalid_argument);
}

TEST(Mixture, OneHotSymmetricAndOracle) {
  Rng rng(7);
  const Tensor r = random_beta(rng, 2, 6);
  const Tensor s = random_beta(rng, 2, 6);
  EXPECT_EQ(mixture(Tensor::matrix(2, 2, {0, 1, 0, 1}), {r, s}).vec(), s.vec());
  const Tensor zero = mixture(Tensor::filled({2, 2}, 0.5), {r, scale(r, -1.0)});
  for (double x : zero.vec()) EXPECT_NEAR(x, 0.0, 1e-15);

  std::vector<Tensor> reprs;
  for (int k = 0; k < 9; ++k) reprs.push_back(random_beta(rng, 3, 5));
  const Tensor p = gumbel_probs(random_beta(rng, 3, 9), 0.5, gumbel_noise(3, 9, rng));
  const Tensor mixed = mixture(p, reprs);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t c = 0; c < 5; ++c) {
      double want = 0.0, lo = 1e300, hi = -1e300;
      for (std::size_t k = 0; k < 9; ++k) {
        want += p.at(b, k) * reprs[k].at(b, c);
        lo = std::min(lo, reprs[k].at(b, c));
        hi = std::max(hi, reprs[k].at(b, c));
      }
      EXPECT_NEAR(mixed.at(b, c), want, 1e-12);
      EXPECT_GE(mixed.at(b, c), lo - 1e-12);
      EXPECT_LE(mixed.at(b, c), hi + 1e-12);
    }
  }
}

TEST(Select, UniqueMaxTiesAndMonotoneMap) {
  std::vector<double> p(9, 0.05);
  p[scope_index(2, 1, 3)] = 0.6;
  const ScopeDecision d = select(p, 3);
  EXPECT_EQ(d.i, 2u);
  EXPECT_EQ(d.j, 1u);
  const ScopeDecision u = select(std::vector<double>(9, 1.0 / 9.0), 3);
  EXPECT_EQ(u.i, 1u);
  EXPECT_EQ(u.j, 1u);

  Rng rng(8);
  for (int c = 0; c < 200; ++c) {
    const Tensor beta = random_beta(rng, 1, 9, -5.0, 5.0);
    const Tensor probs = gumbel_probs(beta, 0.05);
    const auto& b = beta.vec();
    const std::size_t arg = std::max_element(b.begin(), b.end()) - b.begin();
    const ScopeDecision s = select(probs.vec(), 3);
    EXPECT_EQ(scope_index(s.i, s.j, 3), arg);
  }
}

TEST(ProbTables, SplitBatchIntoQueries) {
  Rng rng(9);
  const std::vector<NodePair> pairs{{0, 1}, {2, 3}};
  const Tensor beta = random_beta(rng, 2, 9);
  const Tensor p = gumbel_probs(beta, 0.05);
  const auto tables = prob_tables(pairs, beta, p, 3, 0.05, false);
  ASSERT_EQ(tables.size(), 2u);
  EXPECT_EQ(tables[1].query.u, 2u);
  EXPECT_EQ(tables[1].prob(1, 1), p.at(1, 0));
  double s = 0.0;
  for (double x : tables[0].p) s += x;
  EXPECT_NEAR(s, 1.0, 1e-9);
}

TEST(Histogram, CountsAndZeroCells) {
  std::vector<ScopeDecision> all11(7, ScopeDecision{{0, 0}, 1, 1});
  const ScopeHistogram h = scope_histogram(all11, 3);
  EXPECT_EQ(h.counts[0][0], 7u);
  EXPECT_EQ(h.total(), 7u);
  EXPECT_EQ(h.zero_cells(), 8u);

  Rng rng(10);
  std::vector<ScopeDecision> mixed;
  for (int k = 0; k < 100; ++k) mixed.push_back({{0, 0}, 1 + rng.below(3), 1 + rng.below(3)});
  EXPECT_EQ(scope_histogram(mixed, 3).total(), 100u);
  EXPECT_TRUE(scope_histogram({}, 3).empty_input);
  EXPECT_THROW(scope_histogram(std::vector<ScopeDecision>{{{0, 0}, 4, 1}}, 3), std::out_of_range);
}

TEST(ScopeFile, RoundTrip) {
  test_support::TempDir dir("scopes");
  const std::vector<ScopeDecision> ds{{{3, 4}, 1, 2}, {{5, 0}, 3, 3}};
  write_scope_decisions(dir.path() / "s.tsv", ds, "stamp");
  const auto back = read_scope_decisions(dir.path() / "s.tsv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].query.u, 5u);
  EXPECT_EQ(back[1].i, 3u);
  EXPECT_EQ(back[0].j, 2u);
}

}  // namespace
}  // namespace csse
