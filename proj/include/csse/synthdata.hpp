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

#ifndef CSSE_SYNTHDATA_HPP_
#define CSSE_SYNTHDATA_HPP_

/// @file synthdata.hpp
/// Synthetic multi-relational interaction graphs with planted structure.
///
/// Every node carries a latent group and an activity weight (a power law
/// over a random node order, so degrees are skewed). A group table maps each
/// unordered pair of groups to one base relation, many pairs per relation,
/// so a single edge only narrows down the groups of its endpoints and the
/// rest has to come from the neighbourhood. Symmetric relations are emitted
/// in both directions; asymmetric ones in the table's orientation only.
/// Composition rules r1 ∘ r2 ⇒ r3 then add r3 edges over two-step paths;
/// those edges are the labelled queries, each backed by a witness path.
/// Finally a noise fraction of triples receive a wrong relation.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "csse/random.hpp"
#include "csse/relgraph.hpp"
#include "json.hpp"

namespace csse {

struct CompositionRule {
  RelationId first = 0;
  RelationId second = 0;
  RelationId result = 0;
};

struct SynthSpec {
  std::size_t num_nodes = 200;
  std::size_t num_relations = 8;
  std::vector<RelationId> symmetric{0, 1, 2, 3};
  std::vector<RelationId> asymmetric{4, 5, 6, 7};
  std::vector<CompositionRule> rules{{4, 5, 6}};
  std::size_t num_edges = 3000;
  double noise = 0.05;
  std::uint64_t seed = 0;
  /// Latent node groups the relation table is defined over.
  std::size_t num_groups = 8;
  /// Node activity follows rank^-skew; 0 gives uniform degrees.
  double degree_skew = 0.5;

  /// Default sizes with every relation symmetric.
  static SynthSpec symmetric_only(std::uint64_t seed = 0) {
    SynthSpec s;
    s.symmetric = {0, 1, 2, 3, 4, 5, 6, 7};
    s.asymmetric = {};
    s.rules = {};
    s.seed = seed;
    return s;
  }

  /// Default sizes with every relation asymmetric.
  static SynthSpec asymmetric_only(std::uint64_t seed = 0) {
    SynthSpec s;
    s.symmetric = {};
    s.asymmetric = {0, 1, 2, 3, 4, 5, 6, 7};
    s.rules = {{0, 1, 2}};
    s.seed = seed;
    return s;
  }

  bool is_result(RelationId r) const {
    return std::any_of(rules.begin(), rules.end(), [r](const CompositionRule& c) { return c.result == r; });
  }

  void validate() const {
    if (num_nodes < 2) throw std::invalid_argument("SynthSpec: need at least two nodes");
    if (num_groups == 0 || num_groups > num_nodes) throw std::invalid_argument("SynthSpec: bad group count");
    if (!(noise >= 0.0 && noise < 1.0)) throw std::invalid_argument("SynthSpec: noise must lie in [0, 1)");
    if (!(degree_skew >= 0.0)) throw std::invalid_argument("SynthSpec: degree_skew must be non-negative");
    std::vector<int> seen(num_relations, 0);
    for (const auto* ids : {&symmetric, &asymmetric}) {
      for (auto r : *ids) {
        if (r >= num_relations) throw std::invalid_argument("SynthSpec: relation id out of range");
        ++seen[r];
      }
    }
    for (std::size_t r = 0; r < num_relations; ++r) {
      if (seen[r] != 1) {
        throw std::invalid_argument("SynthSpec: relation " + std::to_string(r) +
                                    " must be in exactly one of symmetric/asymmetric");
      }
    }
    for (const auto& rule : rules) {
      if (rule.first >= num_relations || rule.second >= num_relations || rule.result >= num_relations) {
        throw std::invalid_argument("SynthSpec: rule relation out of range");
      }
      if (is_result(rule.first) || is_result(rule.second)) {
        throw std::invalid_argument("SynthSpec: rule inputs must not be rule results");
      }
    }
  }
};

/// A planted composition edge (u, label, v) and a witness node w with
/// (u, first, w) and (w, second, v).
struct LabeledQuery {
  NodeId u = 0;
  NodeId v = 0;
  RelationId label = 0;
  NodeId witness = 0;
  bool noisy = false;
};

/// Edges between a node of group `head` and a node of group `tail` carry
/// `relation` (in both directions when it is symmetric).
struct GroupRule {
  std::size_t head = 0;
  std::size_t tail = 0;
  RelationId relation = 0;
};

struct SynthData {
  std::vector<Triple> triples;
  std::vector<LabeledQuery> queries;
  std::vector<std::size_t> group;  // per node
  std::vector<GroupRule> table;
  std::vector<char> noisy;  // per triple
};

inline nlohmann::json spec_to_json(const SynthSpec& s) {
  nlohmann::json rules = nlohmann::json::array();
  for (const auto& r : s.rules) rules.push_back({r.first, r.second, r.result});
  return {{"num_nodes", s.num_nodes},   {"num_relations", s.num_relations}, {"symmetric", s.symmetric},
          {"asymmetric", s.asymmetric}, {"rules", rules},                   {"num_edges", s.num_edges},
          {"noise", s.noise},           {"seed", s.seed},                   {"num_groups", s.num_groups},
          {"degree_skew", s.degree_skew}};
}

inline SynthSpec spec_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known{"num_nodes", "num_relations", "symmetric",  "asymmetric",
                                              "rules",     "num_edges",     "noise",      "seed",
                                              "num_groups", "degree_skew"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw std::invalid_argument("synth: unknown field '" + k + "'");
    }
  }
  SynthSpec s;
  try {
    s.num_nodes = j.value("num_nodes", s.num_nodes);
    s.num_relations = j.value("num_relations", s.num_relations);
    s.symmetric = j.value("symmetric", s.symmetric);
    s.asymmetric = j.value("asymmetric", s.asymmetric);
    if (j.contains("rules")) {
      s.rules.clear();
      for (const auto& r : j.at("rules")) {
        s.rules.push_back({r.at(0).get<RelationId>(), r.at(1).get<RelationId>(), r.at(2).get<RelationId>()});
      }
    }
    s.num_edges = j.value("num_edges", s.num_edges);
    s.noise = j.value("noise", s.noise);
    s.seed = j.value("seed", s.seed);
    s.num_groups = j.value("num_groups", s.num_groups);
    s.degree_skew = j.value("degree_skew", s.degree_skew);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("synth: ") + e.what());
  }
  s.validate();
  return s;
}

/// Sidecar describing the planted ground truth. Never a model input.
inline nlohmann::json rules_sidecar(const SynthSpec& spec, const SynthData& d) {
  nlohmann::json table = nlohmann::json::array();
  for (const auto& g : d.table) table.push_back({g.head, g.tail, g.relation});
  nlohmann::json queries = nlohmann::json::array();
  for (const auto& q : d.queries) queries.push_back({q.u, q.label, q.v, q.witness, q.noisy});
  return {{"spec", spec_to_json(spec)}, {"group_table", table}, {"groups", d.group}, {"queries", queries}};
}

namespace detail {

/// Assigns every unordered group pair to a base relation. Same-group pairs
/// take symmetric relations only; if there are none they stay empty.
inline std::vector<GroupRule> group_table(const SynthSpec& s, Rng& rng) {
  std::vector<RelationId> sym, all;
  for (RelationId r = 0; r < s.num_relations; ++r) {
    if (s.is_result(r)) continue;
    all.push_back(r);
    if (std::find(s.symmetric.begin(), s.symmetric.end(), r) != s.symmetric.end()) sym.push_back(r);
  }
  if (all.empty()) throw std::invalid_argument("SynthSpec: no base relations");
  rng.shuffle(sym);
  rng.shuffle(all);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < s.num_groups; ++a) {
    for (std::size_t b = a; b < s.num_groups; ++b) pairs.emplace_back(a, b);
  }
  rng.shuffle(pairs);
  std::vector<GroupRule> table;
  std::vector<int> used(s.num_relations, 0);
  // Each rule gets a chain a -> b -> c of distinct groups so two-step paths
  // first then second always exist.
  std::set<std::pair<std::size_t, std::size_t>> reserved;
  auto unordered = [](std::size_t a, std::size_t b) { return std::make_pair(std::min(a, b), std::max(a, b)); };
  for (const auto& rule : s.rules) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      const std::size_t a = rng.below(s.num_groups), b = rng.below(s.num_groups), c = rng.below(s.num_groups);
      if (a == b || b == c || a == c || reserved.count(unordered(a, b)) || reserved.count(unordered(b, c))) continue;
      reserved.insert(unordered(a, b));
      reserved.insert(unordered(b, c));
      table.push_back({a, b, rule.first});
      table.push_back({b, c, rule.second});
      ++used[rule.first];
      ++used[rule.second];
      placed = true;
    }
    if (!placed) throw std::invalid_argument("SynthSpec: too few groups to place every rule");
  }
  std::size_t si = 0, ai = 0;
  for (const auto& [a, b] : pairs) {
    if (reserved.count({a, b})) continue;
    if (a == b) {
      if (sym.empty()) continue;
      const RelationId r = sym[si++ % sym.size()];
      table.push_back({a, b, r});
      ++used[r];
      continue;
    }
    // Off-diagonal pairs go to relations that are still unused first.
    RelationId r = all[ai++ % all.size()];
    for (std::size_t k = 0; k < all.size() && used[r] > 0; ++k) {
      const RelationId cand = all[(ai + k) % all.size()];
      if (used[cand] == 0) r = cand;
    }
    const bool flip = rng.below(2) == 1;
    table.push_back({flip ? b : a, flip ? a : b, r});
    ++used[r];
  }
  for (auto r : all) {
    if (used[r] == 0) throw std::invalid_argument("SynthSpec: too few groups to place every relation");
  }
  return table;
}

}  // namespace detail

/// Deterministic in spec (seed included). At most one relation per
/// unordered node pair before noise.
inline SynthData generate(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SynthData d;
  const std::size_t n = spec.num_nodes, K = spec.num_groups, R = spec.num_relations;
  d.table = detail::group_table(spec, rng);

  std::vector<char> is_sym(R, 0);
  for (auto r : spec.symmetric) is_sym[r] = 1;
  std::vector<std::vector<std::optional<GroupRule>>> lookup(K, std::vector<std::optional<GroupRule>>(K));
  for (const auto& g : d.table) {
    lookup[g.head][g.tail] = g;
    lookup[g.tail][g.head] = g;
  }

  std::vector<NodeId> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<NodeId>(i);
  rng.shuffle(order);
  d.group.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) d.group[order[i]] = i % K;
  rng.shuffle(order);
  std::vector<double> cum(n);
  double acc = 0.0;
  for (std::size_t rank = 0; rank < n; ++rank) {
    acc += std::pow(static_cast<double>(rank + 1), -spec.degree_skew);
    cum[rank] = acc;
  }
  auto draw = [&]() {
    const auto it = std::upper_bound(cum.begin(), cum.end(), rng.uniform() * acc);
    return order[std::min<std::size_t>(static_cast<std::size_t>(it - cum.begin()), n - 1)];
  };

  const std::size_t per_relation = std::max<std::size_t>(1, spec.num_edges / R);
  const std::size_t rule_budget = per_relation * spec.rules.size();
  const std::size_t base_budget = spec.num_edges > rule_budget ? spec.num_edges - rule_budget : 0;
  if (static_cast<double>(spec.num_edges) > 0.25 * static_cast<double>(n) * static_cast<double>(n - 1)) {
    throw std::invalid_argument("SynthSpec: edge count " + std::to_string(spec.num_edges) +
                                " exceeds generator capacity for " + std::to_string(n) + " nodes");
  }

  std::set<std::pair<NodeId, NodeId>> taken;  // unordered, stored (min, max)
  auto key = [](NodeId u, NodeId v) { return std::make_pair(std::min(u, v), std::max(u, v)); };
  auto emit = [&](NodeId u, RelationId r, NodeId v) {
    d.triples.push_back({u, r, v});
    taken.insert(key(u, v));
    if (is_sym[r]) d.triples.push_back({v, r, u});
  };

  std::size_t attempts = 0;
  while (d.triples.size() < base_budget) {
    if (++attempts > 200 * spec.num_edges) {
      throw std::invalid_argument("SynthSpec: infeasible, cannot place " + std::to_string(base_budget) +
                                  " base edges");
    }
    NodeId u = draw(), v = draw();
    if (u == v || taken.count(key(u, v))) continue;
    const auto& entry = lookup[d.group[u]][d.group[v]];
    if (!entry) continue;
    if (d.group[u] != entry->head) std::swap(u, v);
    emit(u, entry->relation, v);
  }

  // Composition edges over two-step paths of the base graph.
  std::vector<std::vector<std::pair<RelationId, NodeId>>> out_adj(n);
  for (const auto& t : d.triples) out_adj[t.head].emplace_back(t.relation, t.tail);
  for (auto& adj : out_adj) std::sort(adj.begin(), adj.end());
  std::set<Triple> witness;
  for (const auto& rule : spec.rules) {
    std::vector<std::tuple<NodeId, NodeId, NodeId>> paths;
    for (NodeId u = 0; u < n; ++u) {
      for (const auto& [r1, w] : out_adj[u]) {
        if (r1 != rule.first) continue;
        for (const auto& [r2, v] : out_adj[w]) {
          if (r2 == rule.second && v != u) paths.emplace_back(u, w, v);
        }
      }
    }
    rng.shuffle(paths);
    std::size_t emitted = 0;
    for (const auto& [u, w, v] : paths) {
      if (emitted >= per_relation) break;
      if (taken.count(key(u, v))) continue;
      d.queries.push_back({u, v, rule.result, w, false});
      witness.insert({u, rule.first, w});
      witness.insert({w, rule.second, v});
      emit(u, rule.result, v);
      emitted += is_sym[rule.result] ? 2 : 1;
    }
    if (emitted == 0) throw std::invalid_argument("SynthSpec: infeasible, a rule has no supporting paths");
  }

  // Label noise at the same rate among query triples and among the others;
  // witness edges are never corrupted so every clean query stays derivable.
  d.noisy.assign(d.triples.size(), 0);
  if (R > 1 && spec.noise > 0.0) {
    std::set<std::pair<NodeId, NodeId>> query_pairs;
    for (const auto& q : d.queries) query_pairs.insert({q.u, q.v});
    std::vector<std::size_t> query_idx, other_idx;
    for (std::size_t i = 0; i < d.triples.size(); ++i) {
      const auto& t = d.triples[i];
      if (query_pairs.count({t.head, t.tail})) {
        query_idx.push_back(i);
      } else if (!witness.count(t)) {
        other_idx.push_back(i);
      }
    }
    rng.shuffle(query_idx);
    rng.shuffle(other_idx);
    const auto total = static_cast<std::size_t>(std::floor(spec.noise * static_cast<double>(d.triples.size())));
    const auto nq = std::min(total, static_cast<std::size_t>(
                                        std::floor(spec.noise * static_cast<double>(query_idx.size()))));
    const auto no = std::min(other_idx.size(), total - nq);
    auto corrupt = [&](std::size_t i) {
      const RelationId old = d.triples[i].relation;
      auto r = static_cast<RelationId>(rng.below(R - 1));
      if (r >= old) ++r;
      d.triples[i].relation = r;
      d.noisy[i] = 1;
    };
    for (std::size_t k = 0; k < nq; ++k) corrupt(query_idx[k]);
    for (std::size_t k = 0; k < no; ++k) corrupt(other_idx[k]);
    std::map<std::pair<NodeId, NodeId>, RelationId> relabeled;
    for (std::size_t k = 0; k < nq; ++k) {
      const auto& t = d.triples[query_idx[k]];
      relabeled[{t.head, t.tail}] = t.relation;
    }
    for (auto& q : d.queries) {
      if (auto it = relabeled.find({q.u, q.v}); it != relabeled.end()) {
        q.label = it->second;
        q.noisy = true;
      }
    }
  }
  return d;
}

}  // namespace csse

#endif  // CSSE_SYNTHDATA_HPP_
