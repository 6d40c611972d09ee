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

#ifndef CSSE_SCOPE_HPP_
#define CSSE_SCOPE_HPP_

/// @file scope.hpp
/// Per-query subgraph scope selection.
///
/// The scope-(i, j) subgraph of a query (u, v) is the union of the i-hop ego
/// network of u and the j-hop ego network of v. Its representation is taken
/// as [H(i)_u || H(j)_v] from a full-graph encode, which is exact here
/// because a layer-i representation depends only on the i-hop neighbourhood.
/// Scores over the eta×eta scopes are relaxed with Gumbel-Softmax for
/// training and collapsed to an argmax for the final decision.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "csse/difftape.hpp"
#include "csse/encoder.hpp"
#include "csse/random.hpp"
#include "json.hpp"

namespace csse {

/// Offset added after softplus so scope scores are strictly positive.
inline constexpr double kScorePositivityFloor = 1e-6;

struct NodePair {
  NodeId u = 0;
  NodeId v = 0;
};

/// Two-layer perceptron 2d -> d -> 1 with a rectifier in between.
struct ScopeScorer {
  Tensor hidden;  // 2d x d
  Tensor out;     // d x 1

  static ScopeScorer of(const SupernetParams& p) { return {p.scorer_hidden, p.scorer_out}; }

  /// Scores each row of z (B×2d), returning B×1.
  Tensor score(const Tensor& z) const { return matmul(relu(matmul(z, hidden)), out); }
};

inline void check_scope(const LayerOutputs& layers, std::size_t i, std::size_t j) {
  if (i < 1 || j < 1 || i > layers.num_layers() || j > layers.num_layers()) {
    throw std::out_of_range("scope (" + std::to_string(i) + "," + std::to_string(j) + ") exceeds " +
                            std::to_string(layers.num_layers()) + " available layers");
  }
}

/// [H(i)_u || H(j)_v] for every pair, as a B×2d matrix.
inline Tensor pair_reprs(const LayerOutputs& layers, std::span<const NodePair> pairs, std::size_t i,
                         std::size_t j) {
  check_scope(layers, i, j);
  std::vector<std::size_t> us, vs;
  us.reserve(pairs.size());
  vs.reserve(pairs.size());
  for (const auto& p : pairs) {
    us.push_back(p.u);
    vs.push_back(p.v);
  }
  return concat({gather_rows(layers.h[i], us), gather_rows(layers.h[j], vs)});
}

/// Single-query form; a one-row 1×2d matrix.
inline Tensor pair_repr(const LayerOutputs& layers, NodeId u, NodeId v, std::size_t i, std::size_t j) {
  const NodePair p{u, v};
  return pair_reprs(layers, std::span<const NodePair>(&p, 1), i, j);
}

/// Scope index k = (i-1)*eta + (j-1), i.e. lexicographic in (i, j).
inline std::size_t scope_index(std::size_t i, std::size_t j, std::size_t eta) { return (i - 1) * eta + (j - 1); }

/// Pair representations for all eta×eta scopes, in scope_index order.
inline std::vector<Tensor> all_scope_reprs(const LayerOutputs& layers, std::span<const NodePair> pairs,
                                           std::size_t eta) {
  if (eta < 1 || eta > layers.num_layers()) {
    throw std::out_of_range("eta " + std::to_string(eta) + " outside [1, " +
                            std::to_string(layers.num_layers()) + "]");
  }
  std::vector<Tensor> out;
  out.reserve(eta * eta);
  for (std::size_t i = 1; i <= eta; ++i) {
    for (std::size_t j = 1; j <= eta; ++j) out.push_back(pair_reprs(layers, pairs, i, j));
  }
  return out;
}

/// Raw scores beta (B×eta²) for precomputed scope representations.
inline Tensor score_scopes(const std::vector<Tensor>& reprs, const ScopeScorer& scorer) {
  std::vector<Tensor> cols;
  cols.reserve(reprs.size());
  for (const auto& z : reprs) cols.push_back(scorer.score(z));
  return concat(cols);
}

/// Raw scores beta for one query, as a 1×eta² row.
inline Tensor score_scopes(const LayerOutputs& layers, NodeId u, NodeId v, const ScopeScorer& scorer,
                           std::size_t eta) {
  const NodePair p{u, v};
  return score_scopes(all_scope_reprs(layers, std::span<const NodePair>(&p, 1), eta), scorer);
}

/// Independent standard Gumbel draws for a B×K table.
inline Tensor gumbel_noise(std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<double> g(rows * cols);
  for (auto& x : g) x = rng.gumbel();
  return Tensor::matrix(rows, cols, std::move(g));
}

/// p = softmax((log(softplus(beta) + floor) + G) / tau), row-wise.
/// Without noise, G = 0.
inline Tensor gumbel_probs(const Tensor& beta, double tau, const std::optional<Tensor>& noise = std::nullopt) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_probs: temperature must be positive");
  Tensor logits = log(add_scalar(softplus(beta), kScorePositivityFloor));
  if (noise) logits = add(logits, *noise);
  return softmax_rows(scale(logits, 1.0 / tau));
}

/// z_hat = sum_k p[:, k] * reprs[k], row-wise.
inline Tensor mixture(const Tensor& p, const std::vector<Tensor>& reprs) {
  if (p.rank() != 2 || p.cols() != reprs.size() || reprs.empty()) {
    throw ShapeError("mixture: probabilities " + shape_str(p.shape()) + " for " +
                     std::to_string(reprs.size()) + " representations");
  }
  Tensor acc;
  for (std::size_t k = 0; k < reprs.size(); ++k) {
    if (reprs[k].rows() != p.rows() || reprs[k].shape() != reprs[0].shape()) {
      throw ShapeError("mixture: representation " + std::to_string(k) + " has shape " +
                       shape_str(reprs[k].shape()));
    }
    Tensor term = scale_rows(reprs[k], slice_cols(p, k, k + 1));
    acc = k == 0 ? term : add(acc, term);
  }
  return acc;
}

/// Scores and probabilities for one query.
struct ScopeProbTable {
  NodePair query;
  std::size_t eta = 0;
  std::vector<double> beta;
  std::vector<double> p;
  double tau = 0.0;
  bool sampled_noise = false;

  double prob(std::size_t i, std::size_t j) const { return p.at(scope_index(i, j, eta)); }
};

/// Splits batched beta/p tables into per-query records.
inline std::vector<ScopeProbTable> prob_tables(std::span<const NodePair> pairs, const Tensor& beta,
                                               const Tensor& p, std::size_t eta, double tau, bool sampled) {
  const std::size_t k = eta * eta;
  if (beta.rows() != pairs.size() || p.rows() != pairs.size() || beta.cols() != k || p.cols() != k) {
    throw ShapeError("prob_tables: table shapes do not match queries");
  }
  std::vector<ScopeProbTable> out;
  out.reserve(pairs.size());
  for (std::size_t b = 0; b < pairs.size(); ++b) {
    ScopeProbTable t;
    t.query = pairs[b];
    t.eta = eta;
    t.tau = tau;
    t.sampled_noise = sampled;
    t.beta.assign(beta.vec().begin() + static_cast<std::ptrdiff_t>(b * k),
                  beta.vec().begin() + static_cast<std::ptrdiff_t>((b + 1) * k));
    t.p.assign(p.vec().begin() + static_cast<std::ptrdiff_t>(b * k),
               p.vec().begin() + static_cast<std::ptrdiff_t>((b + 1) * k));
    out.push_back(std::move(t));
  }
  return out;
}

struct ScopeDecision {
  NodePair query;
  std::size_t i = 1;
  std::size_t j = 1;
};

/// Argmax over (i, j); ties go to the lexicographically smallest scope.
inline ScopeDecision select(std::span<const double> p, std::size_t eta, NodePair query = {}) {
  if (p.size() != eta * eta || eta == 0) throw ShapeError("select: table size does not match eta");
  std::size_t best = 0;
  for (std::size_t k = 1; k < p.size(); ++k) {
    if (p[k] > p[best]) best = k;
  }
  return {query, best / eta + 1, best % eta + 1};
}

inline ScopeDecision select(const ScopeProbTable& t) { return select(t.p, t.eta, t.query); }

struct ScopeHistogram {
  std::size_t eta = 0;
  std::vector<std::vector<std::size_t>> counts;  // counts[i-1][j-1]
  bool empty_input = false;

  std::size_t total() const {
    std::size_t s = 0;
    for (const auto& r : counts) {
      for (auto c : r) s += c;
    }
    return s;
  }
  std::size_t zero_cells() const {
    std::size_t z = 0;
    for (const auto& r : counts) {
      for (auto c : r) z += c == 0;
    }
    return z;
  }
};

/// eta×eta counts of chosen scopes. Empty input yields all-zero counts with
/// empty_input set.
inline ScopeHistogram scope_histogram(std::span<const ScopeDecision> decisions, std::size_t eta) {
  ScopeHistogram h;
  h.eta = eta;
  h.counts.assign(eta, std::vector<std::size_t>(eta, 0));
  h.empty_input = decisions.empty();
  for (const auto& d : decisions) {
    if (d.i < 1 || d.j < 1 || d.i > eta || d.j > eta) {
      throw std::out_of_range("scope_histogram: decision outside [1, eta]^2");
    }
    ++h.counts[d.i - 1][d.j - 1];
  }
  return h;
}

/// `u<TAB>v<TAB>i<TAB>j` per line, after an optional `# comment`.
inline void write_scope_decisions(const std::filesystem::path& path, std::span<const ScopeDecision> ds,
                                  const std::string& comment = {}) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (!comment.empty()) out << "# " << comment << '\n';
  for (const auto& d : ds) out << d.query.u << '\t' << d.query.v << '\t' << d.i << '\t' << d.j << '\n';
}

inline std::vector<ScopeDecision> read_scope_decisions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<ScopeDecision> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.front() == '#') continue;
    std::istringstream is(line);
    ScopeDecision d;
    if (!(is >> d.query.u >> d.query.v >> d.i >> d.j)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed scope line");
    }
    out.push_back(d);
  }
  return out;
}

inline nlohmann::json histogram_to_json(const ScopeHistogram& h) { return h.counts; }

}  // namespace csse

#endif  // CSSE_SCOPE_HPP_
