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

#ifndef CSSE_GRADCHECK_HPP_
#define CSSE_GRADCHECK_HPP_

/// @file gradcheck.hpp
/// Finite-difference verification of every differentiable primitive and of
/// the composite operators built from them.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "csse/difftape.hpp"
#include "csse/random.hpp"

namespace csse {

struct GradCase {
  std::string name;
  /// Builds the inputs for a seed and width, and the scalar function.
  std::function<std::vector<Tensor>(Rng&, std::size_t)> inputs;
  TensorFunction fn;
};

struct GradResult {
  std::string name;
  std::uint64_t seed = 0;
  std::size_t dim = 0;
  double error = 0.0;
};

namespace detail {

/// Uniform entries in [-1, 1] kept at least 0.05 away from zero, so kinked
/// primitives are never probed across their kink.
inline Tensor away_from_zero(Rng& rng, std::size_t rows, std::size_t cols) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) {
    const double m = rng.uniform(0.05, 1.0);
    x = rng.below(2) ? m : -m;
  }
  return Tensor::matrix(rows, cols, std::move(v));
}

inline Tensor uniform_matrix(Rng& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::matrix(rows, cols, std::move(v));
}

/// Contracts with a fixed weight so every output coordinate gets its own
/// gradient, not the all-ones vector a plain sum would give.
inline Tensor probe(const Tensor& out) {
  std::vector<double> w(out.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + 0.7 * static_cast<double>(i));
  return sum(mul(out, Tensor(out.shape(), std::move(w))));
}

/// Segment targets with one empty segment and uneven sizes.
inline std::vector<std::size_t> segment_targets(std::size_t rows, std::size_t segments) {
  std::vector<std::size_t> t(rows);
  for (std::size_t i = 0; i < rows; ++i) t[i] = i % (segments - 1);
  return t;
}

/// MAX is only differentiable when each segment's winner is unique by a
/// margin larger than the probe step; spread values per column.
inline Tensor separated_messages(Rng& rng, std::size_t rows, std::size_t cols) {
  std::vector<double> v(rows * cols);
  for (std::size_t c = 0; c < cols; ++c) {
    std::vector<std::size_t> order(rows);
    for (std::size_t i = 0; i < rows; ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t i = 0; i < rows; ++i) v[order[i] * cols + c] = -1.0 + 0.1 * static_cast<double>(i);
  }
  return Tensor::matrix(rows, cols, std::move(v));
}

}  // namespace detail

/// Every primitive, every aggregation, both combination branches and both
/// losses, each wrapped as a scalar function of random inputs.
inline std::vector<GradCase> gradient_cases() {
  using detail::away_from_zero;
  using detail::probe;
  using detail::uniform_matrix;
  constexpr std::size_t kRows = 3;
  std::vector<GradCase> cs;
  auto two = [](Rng& r, std::size_t d) {
    return std::vector<Tensor>{away_from_zero(r, kRows, d), away_from_zero(r, kRows, d)};
  };
  auto one = [](Rng& r, std::size_t d) { return std::vector<Tensor>{away_from_zero(r, kRows, d)}; };

  cs.push_back({"add", two, [](const std::vector<Tensor>& x) { return probe(add(x[0], x[1])); }});
  cs.push_back({"sub", two, [](const std::vector<Tensor>& x) { return probe(sub(x[0], x[1])); }});
  cs.push_back({"mul", two, [](const std::vector<Tensor>& x) { return probe(mul(x[0], x[1])); }});
  cs.push_back({"matmul",
                [](Rng& r, std::size_t d) {
                  return std::vector<Tensor>{away_from_zero(r, kRows, d), away_from_zero(r, d, d)};
                },
                [](const std::vector<Tensor>& x) { return probe(matmul(x[0], x[1])); }});
  cs.push_back({"concat", two, [](const std::vector<Tensor>& x) { return probe(concat({x[0], x[1]})); }});
  cs.push_back({"relu", one, [](const std::vector<Tensor>& x) { return probe(relu(x[0])); }});
  cs.push_back({"tanh", one, [](const std::vector<Tensor>& x) { return probe(tanh(x[0])); }});
  cs.push_back({"identity", one, [](const std::vector<Tensor>& x) { return probe(identity(x[0])); }});
  cs.push_back({"sigmoid", one, [](const std::vector<Tensor>& x) { return probe(sigmoid(x[0])); }});
  cs.push_back({"softplus", one, [](const std::vector<Tensor>& x) { return probe(softplus(x[0])); }});
  cs.push_back({"log",
                [](Rng& r, std::size_t d) { return std::vector<Tensor>{uniform_matrix(r, kRows, d, 0.5, 2.0)}; },
                [](const std::vector<Tensor>& x) { return probe(log(x[0])); }});
  cs.push_back({"scale", one, [](const std::vector<Tensor>& x) { return probe(scale(x[0], -1.7)); }});
  cs.push_back({"gather_rows", one, [](const std::vector<Tensor>& x) {
                  const std::vector<std::size_t> idx{2, 0, 2, 1};
                  return probe(gather_rows(x[0], idx));
                }});
  cs.push_back({"slice_cols", one, [](const std::vector<Tensor>& x) {
                  return probe(slice_cols(x[0], x[0].cols() / 2, x[0].cols()));
                }});
  cs.push_back({"scale_rows",
                [](Rng& r, std::size_t d) {
                  return std::vector<Tensor>{away_from_zero(r, kRows, d), away_from_zero(r, kRows, 1)};
                },
                [](const std::vector<Tensor>& x) { return probe(scale_rows(x[0], x[1])); }});
  cs.push_back({"softmax_rows", one, [](const std::vector<Tensor>& x) { return probe(softmax_rows(x[0])); }});
  cs.push_back({"circ_corr", two, [](const std::vector<Tensor>& x) { return probe(circ_corr(x[0], x[1])); }});
  cs.push_back({"complex_rotate",
                [](Rng& r, std::size_t d) {
                  return std::vector<Tensor>{away_from_zero(r, kRows, d),
                                             uniform_matrix(r, kRows, d / 2, 0.0, 6.283185307179586)};
                },
                [](const std::vector<Tensor>& x) { return probe(complex_rotate(x[0], x[1])); }});
  const std::pair<const char*, AggKind> aggs[] = {
      {"aggregate_sum", AggKind::kSum}, {"aggregate_max", AggKind::kMax}, {"aggregate_mean", AggKind::kMean}};
  for (const auto& [name, kind] : aggs) {
    cs.push_back({name,
                  [](Rng& r, std::size_t d) { return std::vector<Tensor>{detail::separated_messages(r, 7, d)}; },
                  [kind](const std::vector<Tensor>& x) {
                    return probe(segment_aggregate(x[0], detail::segment_targets(7, 4), 4, kind));
                  }});
  }
  // The two combination branches as the encoder applies them.
  cs.push_back({"combine_mlp",
                [](Rng& r, std::size_t d) {
                  return std::vector<Tensor>{away_from_zero(r, kRows, d), away_from_zero(r, kRows, d),
                                             away_from_zero(r, d, d)};
                },
                [](const std::vector<Tensor>& x) { return probe(tanh(matmul(add(x[0], x[1]), x[2]))); }});
  cs.push_back({"combine_concat",
                [](Rng& r, std::size_t d) {
                  return std::vector<Tensor>{away_from_zero(r, kRows, d), away_from_zero(r, kRows, d),
                                             away_from_zero(r, 2 * d, d)};
                },
                [](const std::vector<Tensor>& x) { return probe(tanh(matmul(concat({x[0], x[1]}), x[2]))); }});
  cs.push_back({"softmax_cross_entropy", one, [](const std::vector<Tensor>& x) {
                  std::vector<std::size_t> t(x[0].rows());
                  for (std::size_t i = 0; i < t.size(); ++i) t[i] = (2 * i + 1) % x[0].cols();
                  return softmax_cross_entropy(x[0], t);
                }});
  cs.push_back({"binary_cross_entropy", one, [](const std::vector<Tensor>& x) {
                  std::vector<double> y(x[0].size()), m(x[0].size());
                  for (std::size_t i = 0; i < y.size(); ++i) {
                    y[i] = static_cast<double>(i % 2);
                    m[i] = i % 3 == 2 ? 0.0 : 1.0;
                  }
                  return binary_cross_entropy(x[0], Tensor(x[0].shape(), y), Tensor(x[0].shape(), m));
                }});
  return cs;
}

/// Runs every case for every seed and width.
inline std::vector<GradResult> run_gradcheck(const std::vector<std::uint64_t>& seeds,
                                             const std::vector<std::size_t>& dims, double eps = 1e-5) {
  std::vector<GradResult> out;
  for (const auto& c : gradient_cases()) {
    for (auto seed : seeds) {
      for (auto d : dims) {
        Rng rng(derive_seed(seed, c.name));
        out.push_back({c.name, seed, d, finite_diff_check(c.fn, c.inputs(rng, d), eps)});
      }
    }
  }
  return out;
}

inline double max_error(const std::vector<GradResult>& rs) {
  double m = 0.0;
  for (const auto& r : rs) m = std::max(m, r.error);
  return m;
}

}  // namespace csse

#endif  // CSSE_GRADCHECK_HPP_
