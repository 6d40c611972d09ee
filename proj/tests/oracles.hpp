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

#ifndef CSSE_TESTS_ORACLES_HPP_
#define CSSE_TESTS_ORACLES_HPP_

// Reference computations shared by the unit tests and the acceptance report.
// Each is written directly from a definition, without reusing the code path
// it checks.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "csse/encoder.hpp"
#include "csse/metrics.hpp"
#include "csse/scope.hpp"
#include "test_support.hpp"

namespace csse::oracles {

inline Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::matrix(r, c, std::move(v));
}

/// O(d^2) definition: out[k] = sum_i a[i] * b[(i + k) mod d].
inline std::vector<double> circ_corr_definition(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t d = a.size();
  std::vector<double> out(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t i = 0; i < d; ++i) out[k] += a[i] * b[(i + k) % d];
  }
  return out;
}

/// Largest |circ_corr - definition| over random cases of width 1..16.
inline double circ_corr_gap(Rng& rng, int cases) {
  double worst = 0.0;
  for (int c = 0; c < cases; ++c) {
    const std::size_t d = 1 + rng.below(16);
    const std::size_t rows = 1 + rng.below(3);
    const Tensor a = random_matrix(rng, rows, d), b = random_matrix(rng, rows, d);
    const Tensor out = circ_corr(a, b);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::vector<double> ar(a.vec().begin() + r * d, a.vec().begin() + (r + 1) * d);
      const std::vector<double> br(b.vec().begin() + r * d, b.vec().begin() + (r + 1) * d);
      const auto want = circ_corr_definition(ar, br);
      for (std::size_t k = 0; k < d; ++k) worst = std::max(worst, std::abs(out.at(r, k) - want[k]));
    }
  }
  return worst;
}

struct RotateGap {
  double value = 0.0;  // against the 2x2 rotation matrix
  double norm = 0.0;   // change in each pair's Euclidean norm
};

inline RotateGap complex_rotate_gap(Rng& rng, int cases) {
  RotateGap g;
  for (int c = 0; c < cases; ++c) {
    const std::size_t half = 1 + rng.below(8);
    const std::size_t rows = 1 + rng.below(3);
    const Tensor h = random_matrix(rng, rows, 2 * half);
    const Tensor theta = random_matrix(rng, rows, half, -7.0, 7.0);
    const Tensor out = complex_rotate(h, theta);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = 0; k < half; ++k) {
        const double a = h.at(r, 2 * k), b = h.at(r, 2 * k + 1), t = theta.at(r, k);
        // [cos -sin; sin cos] applied to (a, b).
        const double x = std::cos(t) * a - std::sin(t) * b;
        const double y = std::sin(t) * a + std::cos(t) * b;
        g.value = std::max({g.value, std::abs(out.at(r, 2 * k) - x), std::abs(out.at(r, 2 * k + 1) - y)});
        g.norm = std::max(g.norm, std::abs(std::hypot(out.at(r, 2 * k), out.at(r, 2 * k + 1)) - std::hypot(a, b)));
      }
    }
  }
  return g;
}

/// Largest |pair_repr - explicit ego-subgraph encoding| over every (u, v, i, j)
/// of one random graph with at most max_nodes nodes.
inline double ego_subgraph_gap(Rng& rng, std::size_t max_nodes, std::size_t dim = 4) {
  constexpr std::size_t kLayers = 3;
  const std::size_t n = 2 + rng.below(max_nodes - 1);
  const std::size_t relations = 1 + rng.below(3);
  const auto ts = test_support::random_triples(rng, n, relations, rng.below(2 * n + 1));
  const RelGraph g = RelGraph::build(ts, n, relations);
  const SupernetParams p = SupernetParams::init(n, relations, dim, kLayers, rng);
  const Genotype geno = sample_path(rng, kLayers);
  const LayerOutputs full = encode(g, geno, p);

  // ego[l][u]: layer-l representation of u computed on its l-hop ego subgraph.
  std::vector<std::vector<std::vector<double>>> ego(kLayers + 1, std::vector<std::vector<double>>(n));
  for (std::size_t l = 1; l <= kLayers; ++l) {
    for (NodeId u = 0; u < n; ++u) {
      const auto nodes = g.khop(u, l);
      SupernetParams local = p;
      local.node_emb = gather_rows(p.node_emb, std::vector<std::size_t>(nodes.begin(), nodes.end()));
      const auto out = encode(g.induced(nodes), geno, local);
      const auto pos = static_cast<NodeId>(std::lower_bound(nodes.begin(), nodes.end(), u) - nodes.begin());
      ego[l][u] = out.row(l, pos);
    }
  }
  double worst = 0.0;
  for (NodeId u = 0; u < n; ++u) {
    for (NodeId v = 0; v < n; ++v) {
      for (std::size_t i = 1; i <= kLayers; ++i) {
        for (std::size_t j = 1; j <= kLayers; ++j) {
          const Tensor z = pair_repr(full, u, v, i, j);
          for (std::size_t k = 0; k < dim; ++k) {
            worst = std::max(worst, std::abs(z.at(0, k) - ego[i][u][k]));
            worst = std::max(worst, std::abs(z.at(0, dim + k) - ego[j][v][k]));
          }
        }
      }
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Metric oracles
// ---------------------------------------------------------------------------

inline double accuracy(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred) {
  double hit = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += truth[i] == pred[i];
  return hit / static_cast<double>(truth.size());
}

/// Mean over classes present in truth or predictions of per-class F1, with
/// F1 = 0 when precision and recall are both zero.
inline double macro_f1(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred) {
  std::vector<std::size_t> classes(truth);
  classes.insert(classes.end(), pred.begin(), pred.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  double total = 0.0;
  for (auto c : classes) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      tp += truth[i] == c && pred[i] == c;
      fp += truth[i] != c && pred[i] == c;
      fn += truth[i] == c && pred[i] != c;
    }
    total += tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
  }
  return total / static_cast<double>(classes.size());
}

inline double cohen_kappa(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred) {
  const double n = static_cast<double>(truth.size());
  std::map<std::size_t, double> mt, mp;
  double agree = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    mt[truth[i]] += 1;
    mp[pred[i]] += 1;
    agree += truth[i] == pred[i];
  }
  const double po = agree / n;
  double pe = 0.0;
  for (const auto& [c, k] : mt) pe += (k / n) * (mp.count(c) ? mp[c] / n : 0.0);
  if (pe >= 1.0) return 0.0;  // single shared class: undefined, reported as 0
  return (po - pe) / (1.0 - pe);
}

/// O(n^2) pairwise comparison; ties count one half.
inline double auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t a = 0; a < s.size(); ++a) {
    if (y[a] != 1) continue;
    for (std::size_t b = 0; b < s.size(); ++b) {
      if (y[b] != 0) continue;
      pairs += 1;
      wins += s[a] > s[b] ? 1.0 : (s[a] == s[b] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

/// Threshold sweep over distinct scores, high to low: sum of precision at
/// each threshold times the recall gained there.
inline double average_precision(const std::vector<double>& s, const std::vector<int>& y) {
  std::vector<double> thresholds(s);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  const double positives = static_cast<double>(std::count(y.begin(), y.end(), 1));
  double ap = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) (y[i] ? tp : fp) += 1;
    }
    const double recall = tp / positives;
    ap += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
  }
  return ap;
}

/// Fraction of positives among the first min(k, n) entries of a stable
/// descending sort.
inline double precision_at_k(const std::vector<double>& s, const std::vector<int>& y, std::size_t k) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  const std::size_t top = std::min(k, s.size());
  double hits = 0.0;
  for (std::size_t r = 0; r < top; ++r) hits += y[order[r]];
  return hits / static_cast<double>(top);
}

/// Largest deviation between the library metrics and the oracles on one
/// random instance of each task.
inline double metric_gap(Rng& rng) {
  const std::size_t classes = 2 + rng.below(5);
  const std::size_t n = 5 + rng.below(60);
  std::vector<std::size_t> truth(n), pred(n);
  for (auto& t : truth) t = rng.below(classes);
  for (auto& p : pred) p = rng.below(classes);
  const MulticlassEval mc = MulticlassEval::from_predictions(truth, pred, classes);
  double worst = std::abs(csse::accuracy(mc) - accuracy(truth, pred));
  worst = std::max(worst, std::abs(csse::macro_f1(mc) - macro_f1(truth, pred)));
  worst = std::max(worst, std::abs(csse::cohen_kappa(mc) - cohen_kappa(truth, pred)));

  MultilabelEval ml;
  const std::size_t types = 1 + rng.below(4);
  std::map<std::size_t, std::pair<std::vector<double>, std::vector<int>>> per;
  for (std::size_t t = 0; t < types; ++t) {
    const std::size_t m = 4 + rng.below(30);
    for (std::size_t i = 0; i < m; ++i) {
      // Coarse scores so ties occur.
      const double s = std::round(rng.uniform(-2.0, 2.0) * 4.0) / 4.0;
      const int y = i == 0 ? 1 : (i == 1 ? 0 : static_cast<int>(rng.below(2)));
      ml.add(t, s, y);
      per[t].first.push_back(s);
      per[t].second.push_back(y);
    }
  }
  const std::size_t k = 1 + rng.below(40);
  double roc = 0.0, pr = 0.0, apk = 0.0;
  for (const auto& [t, sy] : per) {
    roc += auc(sy.first, sy.second);
    pr += average_precision(sy.first, sy.second);
    apk += precision_at_k(sy.first, sy.second, k);
  }
  const double T = static_cast<double>(per.size());
  worst = std::max(worst, std::abs(csse::roc_auc(ml).value - roc / T));
  worst = std::max(worst, std::abs(csse::pr_auc(ml).value - pr / T));
  worst = std::max(worst, std::abs(csse::ap_at_k(ml, k).value - apk / T));
  return worst;
}

}  // namespace csse::oracles

#endif  // CSSE_TESTS_ORACLES_HPP_
