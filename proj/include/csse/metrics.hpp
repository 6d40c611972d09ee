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

#ifndef CSSE_METRICS_HPP_
#define CSSE_METRICS_HPP_

/// @file metrics.hpp
/// Multi-class (macro F1, accuracy, Cohen's kappa) and multi-label
/// (ROC-AUC, PR-AUC, AP@k) evaluation. Multi-label scores are computed per
/// relation type and averaged without weights.

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace csse {

/// Truth ids and per-query logits (row-major, num_classes wide).
struct MulticlassEval {
  std::vector<std::size_t> truth;
  std::vector<double> logits;
  std::size_t num_classes = 0;

  /// Builds an eval whose argmax predictions equal `predicted`.
  static MulticlassEval from_predictions(std::vector<std::size_t> truth, const std::vector<std::size_t>& predicted,
                                         std::size_t num_classes) {
    if (truth.size() != predicted.size()) throw std::invalid_argument("MulticlassEval: length mismatch");
    MulticlassEval e;
    e.truth = std::move(truth);
    e.num_classes = num_classes;
    e.logits.assign(predicted.size() * num_classes, 0.0);
    for (std::size_t q = 0; q < predicted.size(); ++q) {
      if (predicted[q] >= num_classes) throw std::out_of_range("MulticlassEval: prediction out of range");
      e.logits[q * num_classes + predicted[q]] = 1.0;
    }
    return e;
  }

  void validate() const {
    if (truth.empty()) throw std::invalid_argument("multi-class metric on empty input");
    if (num_classes == 0 || logits.size() != truth.size() * num_classes) {
      throw std::invalid_argument("MulticlassEval: logits width does not match num_classes");
    }
    for (auto t : truth) {
      if (t >= num_classes) throw std::out_of_range("MulticlassEval: truth id out of range");
    }
  }

  /// Argmax per query; ties go to the lowest class id.
  std::vector<std::size_t> predictions() const {
    std::vector<std::size_t> out(truth.size());
    for (std::size_t q = 0; q < truth.size(); ++q) {
      const auto first = logits.begin() + static_cast<std::ptrdiff_t>(q * num_classes);
      out[q] = static_cast<std::size_t>(std::max_element(first, first + static_cast<std::ptrdiff_t>(num_classes)) - first);
    }
    return out;
  }
};

inline double accuracy(const MulticlassEval& e) {
  e.validate();
  const auto pred = e.predictions();
  std::size_t correct = 0;
  for (std::size_t q = 0; q < pred.size(); ++q) correct += pred[q] == e.truth[q];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

/// Unweighted mean of per-class F1 over the classes that occur in the truth
/// or in the predictions.
inline double macro_f1(const MulticlassEval& e) {
  e.validate();
  const auto pred = e.predictions();
  std::vector<std::size_t> tp(e.num_classes, 0), fp(e.num_classes, 0), fn(e.num_classes, 0);
  for (std::size_t q = 0; q < pred.size(); ++q) {
    if (pred[q] == e.truth[q]) {
      ++tp[pred[q]];
    } else {
      ++fp[pred[q]];
      ++fn[e.truth[q]];
    }
  }
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < e.num_classes; ++c) {
    const std::size_t denom = 2 * tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    ++present;
    total += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
  }
  return total / static_cast<double>(present);
}

/// (p_o - p_e) / (1 - p_e); defined as 0 when p_e = 1.
inline double cohen_kappa(const MulticlassEval& e) {
  e.validate();
  const auto pred = e.predictions();
  const double n = static_cast<double>(pred.size());
  std::vector<double> row(e.num_classes, 0.0), col(e.num_classes, 0.0);
  double agree = 0.0;
  for (std::size_t q = 0; q < pred.size(); ++q) {
    row[e.truth[q]] += 1.0;
    col[pred[q]] += 1.0;
    agree += pred[q] == e.truth[q] ? 1.0 : 0.0;
  }
  const double po = agree / n;
  double pe = 0.0;
  for (std::size_t c = 0; c < e.num_classes; ++c) pe += (row[c] / n) * (col[c] / n);
  if (pe >= 1.0) return 0.0;
  return (po - pe) / (1.0 - pe);
}

/// Scored (relation type, label) entries: positives plus sampled negatives.
struct MultilabelEval {
  std::vector<std::size_t> type;
  std::vector<double> score;
  std::vector<int> label;

  void add(std::size_t t, double s, int y) {
    type.push_back(t);
    score.push_back(s);
    label.push_back(y);
  }

  void validate() const {
    if (type.size() != score.size() || type.size() != label.size()) {
      throw std::invalid_argument("MultilabelEval: column lengths differ");
    }
    for (int y : label) {
      if (y != 0 && y != 1) throw std::invalid_argument("MultilabelEval: labels must be 0 or 1");
    }
  }

  /// Entry indices per type, in input order.
  std::map<std::size_t, std::vector<std::size_t>> by_type() const {
    std::map<std::size_t, std::vector<std::size_t>> m;
    for (std::size_t i = 0; i < type.size(); ++i) m[type[i]].push_back(i);
    return m;
  }
};

enum class Averaging { kMacro, kMicro };

/// Mean of a per-type score plus the per-type breakdown.
struct AveragedScore {
  double value = 0.0;
  std::map<std::size_t, double> per_type;
  /// Types skipped because they lacked a positive or a negative.
  std::size_t excluded = 0;
};

namespace detail {

/// Mann-Whitney AUC with average ranks for ties.
inline double auc_of(const std::vector<double>& s, const std::vector<int>& y) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] < s[b]; });
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t a = 0; a < order.size();) {
    std::size_t b = a;
    while (b < order.size() && s[order[b]] == s[order[a]]) ++b;
    const double avg_rank = 0.5 * static_cast<double>(a + 1 + b);  // mean of ranks a+1..b
    for (std::size_t k = a; k < b; ++k) {
      if (y[order[k]] == 1) {
        rank_sum += avg_rank;
        ++pos;
      }
    }
    a = b;
  }
  const double P = static_cast<double>(pos);
  const double N = static_cast<double>(s.size() - pos);
  return (rank_sum - P * (P + 1.0) / 2.0) / (P * N);
}

/// Step-wise precision-recall integral, tied scores sharing one threshold.
inline double average_precision_of(const std::vector<double>& s, const std::vector<int>& y) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  const double P = static_cast<double>(std::count(y.begin(), y.end(), 1));
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0;
  for (std::size_t a = 0; a < order.size();) {
    std::size_t b = a;
    while (b < order.size() && s[order[b]] == s[order[a]]) {
      tp += y[order[b]] == 1;
      ++b;
    }
    const double recall = static_cast<double>(tp) / P;
    const double precision = static_cast<double>(tp) / static_cast<double>(b);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    a = b;
  }
  return ap;
}

template <typename F>
AveragedScore averaged(const MultilabelEval& e, Averaging avg, F per_list) {
  e.validate();
  AveragedScore out;
  if (avg == Averaging::kMicro) {
    const auto npos = std::count(e.label.begin(), e.label.end(), 1);
    if (npos == 0 || npos == static_cast<std::ptrdiff_t>(e.label.size())) {
      throw std::invalid_argument("micro-averaged metric needs positives and negatives");
    }
    out.value = per_list(e.score, e.label);
    return out;
  }
  double total = 0.0;
  for (const auto& [t, idx] : e.by_type()) {
    std::vector<double> s;
    std::vector<int> y;
    for (auto i : idx) {
      s.push_back(e.score[i]);
      y.push_back(e.label[i]);
    }
    const auto npos = std::count(y.begin(), y.end(), 1);
    if (npos == 0 || npos == static_cast<std::ptrdiff_t>(y.size())) {
      ++out.excluded;
      continue;
    }
    const double v = per_list(s, y);
    out.per_type[t] = v;
    total += v;
  }
  if (out.per_type.empty()) throw std::invalid_argument("no relation type has both positives and negatives");
  out.value = total / static_cast<double>(out.per_type.size());
  return out;
}

}  // namespace detail

inline AveragedScore roc_auc(const MultilabelEval& e, Averaging avg = Averaging::kMacro) {
  return detail::averaged(e, avg, detail::auc_of);
}

inline AveragedScore pr_auc(const MultilabelEval& e, Averaging avg = Averaging::kMacro) {
  return detail::averaged(e, avg, detail::average_precision_of);
}

/// Per type, the fraction of positives among the k highest scores (k capped
/// at the list length, ties kept in input order); mean over types.
inline AveragedScore ap_at_k(const MultilabelEval& e, std::size_t k = 50) {
  e.validate();
  if (k == 0) throw std::invalid_argument("ap_at_k: k must be positive");
  AveragedScore out;
  double total = 0.0;
  for (const auto& [t, idx] : e.by_type()) {
    std::vector<std::size_t> order = idx;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return e.score[a] > e.score[b]; });
    const std::size_t top = std::min(k, order.size());
    std::size_t hits = 0;
    for (std::size_t r = 0; r < top; ++r) hits += e.label[order[r]] == 1;
    const double v = static_cast<double>(hits) / static_cast<double>(top);
    out.per_type[t] = v;
    total += v;
  }
  if (out.per_type.empty()) throw std::invalid_argument("ap_at_k: no scored pairs");
  out.value = total / static_cast<double>(out.per_type.size());
  return out;
}

/// {"task": ..., "metrics": {name: value}, "per_type": {...}}
inline nlohmann::json metric_report(const MulticlassEval& e) {
  return {{"task", "multi_class"},
          {"metrics", {{"macro_f1", macro_f1(e)}, {"accuracy", accuracy(e)}, {"cohen_kappa", cohen_kappa(e)}}},
          {"per_type", nlohmann::json::object()}};
}

inline nlohmann::json metric_report(const MultilabelEval& e, std::size_t k = 50) {
  const auto roc = roc_auc(e);
  const auto pr = pr_auc(e);
  const auto apk = ap_at_k(e, k);
  auto per_type = [](const AveragedScore& s) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [t, v] : s.per_type) j[std::to_string(t)] = v;
    return j;
  };
  return {{"task", "multi_label"},
          {"metrics", {{"roc_auc", roc.value}, {"pr_auc", pr.value}, {"ap_at_" + std::to_string(k), apk.value}}},
          {"per_type", {{"roc_auc", per_type(roc)}, {"pr_auc", per_type(pr)}, {"ap_at_k", per_type(apk)}}},
          {"excluded_types", roc.excluded}};
}

}  // namespace csse

#endif  // CSSE_METRICS_HPP_
