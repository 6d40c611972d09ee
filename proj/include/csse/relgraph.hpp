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

#ifndef CSSE_RELGRAPH_HPP_
#define CSSE_RELGRAPH_HPP_

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <queue>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "csse/random.hpp"

namespace csse {

using NodeId = std::uint32_t;
using RelationId = std::uint32_t;

/// One interaction (head, relation, tail).
struct Triple {
  NodeId head = 0;
  RelationId relation = 0;
  NodeId tail = 0;

  auto operator<=>(const Triple&) const = default;
};

/// Triples plus the id bounds they were read against.
struct TripleSet {
  std::vector<Triple> triples;
  std::size_t num_nodes = 0;
  std::size_t num_relations = 0;
};

/// Reads `head<TAB>relation<TAB>tail` lines; lines starting with '#' are
/// comments. Bounds default to one past the largest id seen; explicit bounds
/// must cover every id.
inline TripleSet load_triples(const std::filesystem::path& path,
                              std::optional<std::size_t> num_nodes = std::nullopt,
                              std::optional<std::size_t> num_relations = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_triples: cannot open " + path.string());
  TripleSet out;
  std::string line;
  std::size_t lineno = 0;
  std::size_t max_node = 0, max_rel = 0;
  auto parse_id = [&](const std::string& field) -> std::uint64_t {
    if (field.empty() || !std::all_of(field.begin(), field.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed line");
    }
    const std::uint64_t v = std::stoull(field);
    if (v > UINT32_MAX) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": id out of range");
    }
    return v;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::array<std::string, 3> f;
    std::size_t start = 0;
    for (int k = 0; k < 3; ++k) {
      const std::size_t tab = line.find('\t', start);
      if (k < 2 && tab == std::string::npos) {
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed line");
      }
      f[k] = line.substr(start, k < 2 ? tab - start : std::string::npos);
      start = tab + 1;
    }
    Triple t{static_cast<NodeId>(parse_id(f[0])), static_cast<RelationId>(parse_id(f[1])),
             static_cast<NodeId>(parse_id(f[2]))};
    max_node = std::max<std::size_t>(max_node, std::max(t.head, t.tail));
    max_rel = std::max<std::size_t>(max_rel, t.relation);
    out.triples.push_back(t);
  }
  if (out.triples.empty()) throw std::runtime_error("load_triples: " + path.string() + " is empty");
  out.num_nodes = num_nodes.value_or(max_node + 1);
  out.num_relations = num_relations.value_or(max_rel + 1);
  if (max_node >= out.num_nodes || max_rel >= out.num_relations) {
    throw std::runtime_error("load_triples: ids in " + path.string() + " exceed configured bounds");
  }
  return out;
}

/// Writes triples in the ingestion format, after an optional `# comment`.
inline void write_triples(const std::filesystem::path& path, std::span<const Triple> triples,
                          const std::string& comment = {}) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_triples: cannot open " + path.string());
  if (!comment.empty()) out << "# " << comment << '\n';
  for (const auto& t : triples) out << t.head << '\t' << t.relation << '\t' << t.tail << '\n';
}

/// Writes negatives as `head<TAB>relation<TAB>tail<TAB>0`.
inline void write_negatives(const std::filesystem::path& path, std::span<const Triple> negatives,
                            const std::string& comment = {}) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_negatives: cannot open " + path.string());
  if (!comment.empty()) out << "# " << comment << '\n';
  for (const auto& t : negatives) out << t.head << '\t' << t.relation << '\t' << t.tail << "\t0\n";
}

/// Reads a negatives file; the fourth column must be `0`.
inline std::vector<Triple> load_negatives(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_negatives: cannot open " + path.string());
  std::vector<Triple> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::istringstream row(line);
    std::string f[4], extra;
    bool ok = true;
    for (auto& s : f) ok = ok && static_cast<bool>(std::getline(row, s, '\t'));
    if (!ok || std::getline(row, extra, '\t') || f[3] != "0") {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed negative");
    }
    try {
      out.push_back({static_cast<NodeId>(std::stoul(f[0])), static_cast<RelationId>(std::stoul(f[1])),
                     static_cast<NodeId>(std::stoul(f[2]))});
    } catch (const std::exception&) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed negative");
    }
  }
  return out;
}

/// Directed edge of the augmented graph.
struct Edge {
  NodeId src = 0;
  RelationId relation = 0;
  NodeId dst = 0;

  auto operator<=>(const Edge&) const = default;
};

/// Immutable multi-relational graph with inverse and self-loop augmentation.
///
/// Base relation r has inverse r + R; relation 2R is the self-loop, so the
/// relation universe has 2R + 1 entries. Edges are stored sorted by
/// (src, relation, dst).
class RelGraph {
 public:
  RelGraph() = default;

  static RelGraph build(std::span<const Triple> triples, std::size_t num_nodes,
                        std::size_t num_base_relations) {
    if (num_nodes == 0) throw std::invalid_argument("RelGraph: no nodes");
    RelGraph g;
    g.num_nodes_ = num_nodes;
    g.num_base_ = num_base_relations;
    g.base_.assign(triples.begin(), triples.end());
    for (const auto& t : g.base_) {
      if (t.head >= num_nodes || t.tail >= num_nodes || t.relation >= num_base_relations) {
        throw std::out_of_range("RelGraph: triple (" + std::to_string(t.head) + "," +
                                std::to_string(t.relation) + "," + std::to_string(t.tail) +
                                ") outside bounds");
      }
    }
    std::sort(g.base_.begin(), g.base_.end());
    g.base_.erase(std::unique(g.base_.begin(), g.base_.end()), g.base_.end());

    const auto R = static_cast<RelationId>(num_base_relations);
    std::vector<Edge> edges;
    edges.reserve(2 * g.base_.size() + num_nodes);
    for (const auto& t : g.base_) {
      edges.push_back({t.head, t.relation, t.tail});
      edges.push_back({t.tail, t.relation + R, t.head});
    }
    for (NodeId u = 0; u < num_nodes; ++u) edges.push_back({u, 2 * R, u});
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    g.edges_ = std::move(edges);

    g.offsets_.assign(num_nodes + 1, 0);
    for (const auto& e : g.edges_) ++g.offsets_[e.src + 1];
    for (std::size_t u = 0; u < num_nodes; ++u) g.offsets_[u + 1] += g.offsets_[u];

    g.neighbors_.resize(num_nodes);
    for (const auto& e : g.edges_) {
      if (e.relation != 2 * R) g.neighbors_[e.src].push_back(e.dst);
    }
    for (auto& nb : g.neighbors_) {
      std::sort(nb.begin(), nb.end());
      nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
    }
    return g;
  }

  std::size_t num_nodes() const { return num_nodes_; }
  std::size_t num_base_relations() const { return num_base_; }
  /// Size of the augmented relation universe, 2R + 1.
  std::size_t num_relations() const { return 2 * num_base_ + 1; }
  RelationId self_loop_relation() const { return static_cast<RelationId>(2 * num_base_); }
  RelationId inverse(RelationId r) const {
    if (r >= 2 * num_base_) throw std::out_of_range("RelGraph::inverse: no inverse for self-loop");
    return r < num_base_ ? r + static_cast<RelationId>(num_base_) : r - static_cast<RelationId>(num_base_);
  }

  std::span<const Edge> edges() const { return edges_; }
  std::span<const Triple> base_triples() const { return base_; }

  std::span<const Edge> out_edges(NodeId u) const {
    check_node(u);
    return std::span<const Edge>(edges_).subspan(offsets_[u], offsets_[u + 1] - offsets_[u]);
  }

  /// Undirected neighbours, self excluded unless a base self-edge exists.
  std::span<const NodeId> neighbors(NodeId u) const {
    check_node(u);
    return neighbors_[u];
  }

  /// Index into edges() of (u, r, v), if stored.
  std::optional<std::size_t> find_edge(NodeId u, RelationId r, NodeId v) const {
    check_node(u);
    const Edge key{u, r, v};
    auto first = edges_.begin() + static_cast<std::ptrdiff_t>(offsets_[u]);
    auto last = edges_.begin() + static_cast<std::ptrdiff_t>(offsets_[u + 1]);
    auto it = std::lower_bound(first, last, key);
    if (it != last && *it == key) return static_cast<std::size_t>(it - edges_.begin());
    return std::nullopt;
  }

  /// Nodes within undirected distance k of u, u included, sorted.
  std::vector<NodeId> khop(NodeId u, std::size_t k) const {
    check_node(u);
    std::vector<std::size_t> dist(num_nodes_, SIZE_MAX);
    std::vector<NodeId> out{u};
    std::queue<NodeId> frontier;
    dist[u] = 0;
    frontier.push(u);
    while (!frontier.empty()) {
      const NodeId x = frontier.front();
      frontier.pop();
      if (dist[x] == k) continue;
      for (NodeId y : neighbors_[x]) {
        if (dist[y] != SIZE_MAX) continue;
        dist[y] = dist[x] + 1;
        out.push_back(y);
        frontier.push(y);
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  /// Node set of the scope-(i, j) subgraph: khop(u, i) ∪ khop(v, j).
  std::vector<NodeId> ego_union(NodeId u, std::size_t i, NodeId v, std::size_t j,
                                std::size_t max_hops) const {
    if (i < 1 || j < 1 || i > max_hops || j > max_hops) {
      throw std::out_of_range("ego_union: scope (" + std::to_string(i) + "," + std::to_string(j) +
                              ") outside [1," + std::to_string(max_hops) + "]");
    }
    const auto a = khop(u, i);
    const auto b = khop(v, j);
    std::vector<NodeId> out;
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
  }

  /// Subgraph induced by a sorted node list, nodes relabelled by position.
  /// Relabelling is monotone, so per-node edge order is preserved.
  RelGraph induced(std::span<const NodeId> nodes) const {
    if (!std::is_sorted(nodes.begin(), nodes.end())) {
      throw std::invalid_argument("RelGraph::induced: node list must be sorted");
    }
    std::vector<std::int64_t> pos(num_nodes_, -1);
    for (std::size_t i = 0; i < nodes.size(); ++i) pos[nodes[i]] = static_cast<std::int64_t>(i);
    std::vector<Triple> kept;
    for (const auto& t : base_) {
      if (pos[t.head] >= 0 && pos[t.tail] >= 0) {
        kept.push_back({static_cast<NodeId>(pos[t.head]), t.relation, static_cast<NodeId>(pos[t.tail])});
      }
    }
    return build(kept, nodes.size(), num_base_);
  }

 private:
  void check_node(NodeId u) const {
    if (u >= num_nodes_) {
      throw std::out_of_range("RelGraph: node " + std::to_string(u) + " >= " + std::to_string(num_nodes_));
    }
  }

  std::size_t num_nodes_ = 0;
  std::size_t num_base_ = 0;
  std::vector<Triple> base_;
  std::vector<Edge> edges_;
  std::vector<std::size_t> offsets_;
  std::vector<std::vector<NodeId>> neighbors_;
};

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// S0: transductive, every valid/test node is seen in training.
/// S1: valid/test triples touch at least one emerging node absent from train.
enum class SplitMode { kS0, kS1 };

struct SplitBundle {
  std::vector<Triple> train;
  std::vector<Triple> valid;
  std::vector<Triple> test;
  SplitMode mode = SplitMode::kS0;
  std::vector<NodeId> emerging;
  std::uint64_t seed = 0;
};

/// Deterministic train/valid/test split.
///
/// S0 first reserves, in shuffled order, one covering triple for every node
/// so each node appears in train; the remaining triples fill valid and test
/// to their exact quotas. S1 picks emerging nodes (each pick must leave every
/// other touched node with a train triple) and sends their triples to
/// valid/test in the valid:test ratio.
inline SplitBundle make_splits(std::span<const Triple> triples, SplitMode mode,
                               std::array<double, 3> ratios, std::uint64_t seed,
                               double emerging_fraction = 0.1) {
  for (double r : ratios) {
    if (!(r > 0.0)) throw std::invalid_argument("make_splits: ratios must be positive");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    throw std::invalid_argument("make_splits: ratios must sum to 1");
  }
  std::vector<Triple> pool(triples.begin(), triples.end());
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  if (pool.empty()) throw std::invalid_argument("make_splits: no triples");
  Rng rng(seed);
  rng.shuffle(pool);

  SplitBundle out;
  out.mode = mode;
  out.seed = seed;
  std::size_t max_node = 0;
  for (const auto& t : pool) max_node = std::max<std::size_t>(max_node, std::max(t.head, t.tail));

  if (mode == SplitMode::kS0) {
    const std::size_t n = pool.size();
    const auto n_valid = static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n)));
    const auto n_test = static_cast<std::size_t>(std::llround(ratios[2] * static_cast<double>(n)));
    std::vector<char> covered(max_node + 1, 0), forced(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& t = pool[i];
      if (!covered[t.head] || !covered[t.tail]) {
        forced[i] = 1;
        covered[t.head] = covered[t.tail] = 1;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (forced[i]) {
        out.train.push_back(pool[i]);
      } else if (out.test.size() < n_test) {
        out.test.push_back(pool[i]);
      } else if (out.valid.size() < n_valid) {
        out.valid.push_back(pool[i]);
      } else {
        out.train.push_back(pool[i]);
      }
    }
    if (out.valid.size() < n_valid || out.test.size() < n_test) {
      throw std::runtime_error("make_splits: graph too sparse for S0 quotas");
    }
    return out;
  }

  // S1
  std::vector<std::size_t> degree(max_node + 1, 0);
  for (const auto& t : pool) {
    ++degree[t.head];
    if (t.tail != t.head) ++degree[t.tail];
  }
  std::vector<NodeId> candidates;
  for (NodeId u = 0; u <= max_node; ++u) {
    if (degree[u] > 0) candidates.push_back(u);
  }
  rng.shuffle(candidates);
  const auto target = static_cast<std::size_t>(
      std::llround(emerging_fraction * static_cast<double>(candidates.size())));
  if (target == 0) throw std::runtime_error("make_splits: S1 emerging fraction selects no nodes");

  std::vector<std::vector<std::size_t>> incident(max_node + 1);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    incident[pool[i].head].push_back(i);
    if (pool[i].tail != pool[i].head) incident[pool[i].tail].push_back(i);
  }
  std::vector<char> emerging(max_node + 1, 0), held(pool.size(), 0);
  std::vector<std::size_t> train_degree = degree;
  for (NodeId u : candidates) {
    if (out.emerging.size() == target) break;
    // Triples that would newly leave train if u became emerging.
    bool ok = true;
    std::vector<std::pair<NodeId, std::size_t>> loss;
    for (std::size_t i : incident[u]) {
      if (held[i]) continue;
      const NodeId other = pool[i].head == u ? pool[i].tail : pool[i].head;
      if (other == u || emerging[other]) continue;
      loss.emplace_back(other, 1);
    }
    std::sort(loss.begin(), loss.end());
    for (std::size_t a = 0; a < loss.size() && ok;) {
      std::size_t b = a, cnt = 0;
      while (b < loss.size() && loss[b].first == loss[a].first) cnt += loss[b++].second;
      if (train_degree[loss[a].first] <= cnt) ok = false;
      a = b;
    }
    if (!ok) continue;
    emerging[u] = 1;
    out.emerging.push_back(u);
    for (std::size_t i : incident[u]) {
      if (held[i]) continue;
      held[i] = 1;
      const NodeId other = pool[i].head == u ? pool[i].tail : pool[i].head;
      if (other != u) --train_degree[other];
    }
    train_degree[u] = 0;
  }
  if (out.emerging.empty()) {
    throw std::runtime_error("make_splits: S1 infeasible, no emerging node leaves a covered train set");
  }
  std::sort(out.emerging.begin(), out.emerging.end());
  const double valid_share = ratios[1] / (ratios[1] + ratios[2]);
  std::vector<Triple> heldout;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    (held[i] ? heldout : out.train).push_back(pool[i]);
  }
  if (out.train.empty()) throw std::runtime_error("make_splits: S1 leaves an empty train set");
  const auto n_valid =
      static_cast<std::size_t>(std::llround(valid_share * static_cast<double>(heldout.size())));
  for (std::size_t i = 0; i < heldout.size(); ++i) {
    (i < n_valid ? out.valid : out.test).push_back(heldout[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Negative sampling
// ---------------------------------------------------------------------------

struct NegativeSample {
  std::vector<Triple> negatives;
  /// Positives for which no valid corruption existed.
  std::size_t saturated = 0;
};

/// Corrupts the head or tail of each positive. Replacement candidates are
/// drawn from the heads (or tails) that relation has anywhere in the
/// dataset, and no corruption may itself be a dataset positive.
inline NegativeSample sample_negatives(std::span<const Triple> positives,
                                       std::span<const Triple> dataset, std::size_t per_positive,
                                       std::uint64_t seed) {
  if (per_positive < 1) throw std::invalid_argument("sample_negatives: per_positive must be >= 1");
  std::size_t num_rel = 0;
  for (const auto& t : dataset) num_rel = std::max<std::size_t>(num_rel, t.relation + 1);
  for (const auto& t : positives) num_rel = std::max<std::size_t>(num_rel, t.relation + 1);
  auto key = [](const Triple& t) {
    return (static_cast<std::uint64_t>(t.head) << 40) ^ (static_cast<std::uint64_t>(t.relation) << 20) ^
           (static_cast<std::uint64_t>(t.tail) * 0x9E3779B97F4A7C15ULL);
  };
  std::unordered_set<std::uint64_t> keys;
  std::vector<Triple> positive_set(dataset.begin(), dataset.end());
  positive_set.insert(positive_set.end(), positives.begin(), positives.end());
  std::sort(positive_set.begin(), positive_set.end());
  positive_set.erase(std::unique(positive_set.begin(), positive_set.end()), positive_set.end());
  for (const auto& t : positive_set) keys.insert(key(t));
  auto is_positive = [&](const Triple& t) {
    return keys.count(key(t)) && std::binary_search(positive_set.begin(), positive_set.end(), t);
  };

  std::vector<std::vector<NodeId>> heads(num_rel), tails(num_rel);
  for (const auto& t : positive_set) {
    heads[t.relation].push_back(t.head);
    tails[t.relation].push_back(t.tail);
  }
  for (auto* v : {&heads, &tails}) {
    for (auto& d : *v) {
      std::sort(d.begin(), d.end());
      d.erase(std::unique(d.begin(), d.end()), d.end());
    }
  }

  Rng rng(seed);
  NegativeSample out;
  constexpr int kAttempts = 32;
  for (const auto& p : positives) {
    const auto& hd = heads[p.relation];
    const auto& tl = tails[p.relation];
    for (std::size_t k = 0; k < per_positive; ++k) {
      std::optional<Triple> found;
      for (int a = 0; a < kAttempts && !found; ++a) {
        Triple c = p;
        if (rng.below(2) == 0) {
          c.tail = tl[rng.below(tl.size())];
        } else {
          c.head = hd[rng.below(hd.size())];
        }
        if (!is_positive(c)) found = c;
      }
      if (!found) {
        std::vector<Triple> valid;
        for (NodeId v : tl) {
          Triple c{p.head, p.relation, v};
          if (!is_positive(c)) valid.push_back(c);
        }
        for (NodeId u : hd) {
          Triple c{u, p.relation, p.tail};
          if (!is_positive(c)) valid.push_back(c);
        }
        if (valid.empty()) {
          ++out.saturated;
          break;
        }
        found = valid[rng.below(valid.size())];
      }
      out.negatives.push_back(*found);
    }
  }
  return out;
}

}  // namespace csse

#endif  // CSSE_RELGRAPH_HPP_
