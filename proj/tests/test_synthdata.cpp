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

#include <set>

#include "csse/synthdata.hpp"

namespace csse {
namespace {

SynthSpec quiet(SynthSpec s) {
  s.noise = 0.0;
  return s;
}

std::set<Triple> as_set(const SynthData& d) { return {d.triples.begin(), d.triples.end()}; }

TEST(Generate, SymmetricRelationsAreClosedWithoutNoise) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const SynthSpec spec = quiet(SynthSpec::symmetric_only(seed));
    const SynthData d = generate(spec);
    const auto all = as_set(d);
    for (const auto& t : d.triples) EXPECT_TRUE(all.count({t.tail, t.relation, t.head})) << seed;
  }
}

TEST(Generate, AsymmetricReverseAbsentWithoutNoise) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const SynthData d = generate(quiet(SynthSpec::asymmetric_only(seed)));
    const auto all = as_set(d);
    for (const auto& t : d.triples) EXPECT_FALSE(all.count({t.tail, t.relation, t.head}));
  }
}

TEST(Generate, DefaultMixRespectsRelationKinds) {
  const SynthSpec spec = quiet(SynthSpec{});
  const SynthData d = generate(spec);
  const auto all = as_set(d);
  std::set<RelationId> sym(spec.symmetric.begin(), spec.symmetric.end());
  for (const auto& t : d.triples) {
    EXPECT_EQ(all.count({t.tail, t.relation, t.head}) > 0, sym.count(t.relation) > 0);
  }
  EXPECT_GE(d.triples.size(), spec.num_edges * 9 / 10);
  EXPECT_LE(d.triples.size(), spec.num_edges * 11 / 10);
}

TEST(Generate, NoiseCorruptsAboutTheRequestedShare) {
  const SynthSpec spec;
  const SynthData d = generate(spec);
  ASSERT_EQ(d.noisy.size(), d.triples.size());
  const double share = std::count(d.noisy.begin(), d.noisy.end(), 1) / static_cast<double>(d.triples.size());
  EXPECT_NEAR(share, spec.noise, 0.01);
}

TEST(Generate, QueriesAreSolvableByTwoHopRuleSearch) {
  for (const SynthSpec& spec : {SynthSpec{}, SynthSpec::asymmetric_only(3)}) {
    const SynthData d = generate(spec);
    const auto all = as_set(d);
    ASSERT_FALSE(d.queries.empty());
    std::vector<std::vector<std::pair<RelationId, NodeId>>> out(spec.num_nodes);
    for (const auto& t : d.triples) out[t.head].emplace_back(t.relation, t.tail);
    // Exhaustive search over every intermediate node, ignoring the recorded witness.
    auto solvable = [&](const LabeledQuery& q) {
      for (const auto& rule : spec.rules) {
        if (rule.result != q.label) continue;
        for (const auto& [r1, w] : out[q.u]) {
          if (r1 == rule.first && all.count({w, rule.second, q.v})) return true;
        }
      }
      return false;
    };
    std::size_t solved = 0;
    for (const auto& q : d.queries) {
      EXPECT_TRUE(all.count({q.u, q.label, q.v}));
      if (!q.noisy) {
        EXPECT_TRUE(solvable(q)) << q.u << " " << q.v;
      }
      solved += solvable(q);
    }
    EXPECT_GE(static_cast<double>(solved) / static_cast<double>(d.queries.size()), 1.0 - spec.noise);
  }
}

TEST(Generate, SeedDeterminesOutput) {
  const SynthData a = generate(SynthSpec::asymmetric_only(11));
  const SynthData b = generate(SynthSpec::asymmetric_only(11));
  const SynthData c = generate(SynthSpec::asymmetric_only(12));
  EXPECT_EQ(a.triples, b.triples);
  EXPECT_EQ(a.group, b.group);
  EXPECT_NE(a.triples, c.triples);
}

TEST(Generate, NoSelfLoopsOrRepeatedPairs) {
  const SynthData d = generate(SynthSpec{});
  std::set<std::pair<NodeId, NodeId>> seen;
  for (const auto& t : d.triples) {
    EXPECT_NE(t.head, t.tail);
    EXPECT_TRUE(seen.insert({t.head, t.tail}).second);
  }
}

TEST(Spec, JsonRoundTripAndValidation) {
  SynthSpec s = SynthSpec::asymmetric_only(4);
  s.num_nodes = 90;
  s.num_edges = 700;
  const SynthSpec back = spec_from_json(spec_to_json(s));
  EXPECT_EQ(spec_to_json(back), spec_to_json(s));

  auto bad = spec_to_json(s);
  bad["colour"] = 1;
  EXPECT_THROW(spec_from_json(bad), std::invalid_argument);
  SynthSpec overlap;
  overlap.asymmetric.push_back(0);
  EXPECT_THROW(overlap.validate(), std::invalid_argument);
  SynthSpec dense;
  dense.num_nodes = 20;
  EXPECT_THROW(generate(dense), std::invalid_argument);
}

TEST(Sidecar, ListsEveryQuery) {
  const SynthSpec spec;
  const SynthData d = generate(spec);
  const auto j = rules_sidecar(spec, d);
  EXPECT_EQ(j.at("queries").size(), d.queries.size());
  EXPECT_EQ(j.at("groups").size(), spec.num_nodes);
}

}  // namespace
}  // namespace csse
