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

#include "csse/metrics.hpp"
#include "oracles.hpp"

namespace csse {
namespace {

MulticlassEval worked_example() { return MulticlassEval::from_predictions({0, 0, 1, 1}, {0, 1, 1, 1}, 2); }

MultilabelEval single_type(const std::vector<double>& s, const std::vector<int>& y) {
  MultilabelEval e;
  for (std::size_t i = 0; i < s.size(); ++i) e.add(0, s[i], y[i]);
  return e;
}

TEST(WorkedExample, AccuracyF1Kappa) {
  const MulticlassEval e = worked_example();
  EXPECT_DOUBLE_EQ(accuracy(e), 0.75);
  EXPECT_NEAR(macro_f1(e), 11.0 / 15.0, 1e-15);
  EXPECT_NEAR(cohen_kappa(e), 0.5, 1e-15);
}

TEST(Multiclass, PerfectAndAllWrong) {
  const auto perfect = MulticlassEval::from_predictions({0, 1, 2, 1}, {0, 1, 2, 1}, 3);
  EXPECT_EQ(macro_f1(perfect), 1.0);
  EXPECT_EQ(accuracy(perfect), 1.0);
  EXPECT_EQ(cohen_kappa(perfect), 1.0);
  EXPECT_EQ(macro_f1(MulticlassEval::from_predictions({2, 2}, {2, 2}, 3)), 1.0);
  EXPECT_EQ(accuracy(MulticlassEval::from_predictions({0, 1}, {1, 0}, 2)), 0.0);
}

TEST(Multiclass, ArgmaxTiesGoToLowestClass) {
  MulticlassEval e;
  e.truth = {0};
  e.num_classes = 3;
  e.logits = {0.2, 0.2, 0.1};
  EXPECT_EQ(e.predictions(), (std::vector<std::size_t>{0}));
}

TEST(Multiclass, KappaNearZeroForIndependentPredictions) {
  Rng rng(99);
  std::vector<std::size_t> truth(50000), pred(50000);
  for (auto& t : truth) t = rng.below(4);
  for (auto& p : pred) p = rng.below(4);
  EXPECT_NEAR(cohen_kappa(MulticlassEval::from_predictions(truth, pred, 4)), 0.0, 0.02);
}

TEST(Multiclass, EmptyInputRejected) {
  EXPECT_THROW(accuracy(MulticlassEval::from_predictions({}, {}, 2)), std::invalid_argument);
}

TEST(RocAuc, SeparatedTiedAndOracle) {
  EXPECT_EQ(roc_auc(single_type({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0})).value, 1.0);
  EXPECT_EQ(roc_auc(single_type({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0})).value, 0.5);
}

TEST(PrAuc, PerfectAndLastRanked) {
  EXPECT_EQ(pr_auc(single_type({0.9, 0.8, 0.1}, {1, 1, 0})).value, 1.0);
  for (std::size_t n = 2; n < 12; ++n) {
    std::vector<double> s(n);
    std::vector<int> y(n, 0);
    for (std::size_t i = 0; i < n; ++i) s[i] = static_cast<double>(n - i);
    y[n - 1] = 1;
    EXPECT_NEAR(pr_auc(single_type(s, y)).value, 1.0 / static_cast<double>(n), 1e-15);
  }
}

TEST(ApAtK, ClosedFormsAndStableTies) {
  EXPECT_EQ(ap_at_k(single_type({0.9, 0.8, 0.1, 0.05}, {1, 1, 0, 0}), 2).value, 1.0);
  // k beyond a list of m = 5 with p = 2 positives ranked first: 2 / 5.
  EXPECT_NEAR(ap_at_k(single_type({5, 4, 3, 2, 1}, {1, 1, 0, 0, 0}), 50).value, 0.4, 1e-15);
  // Equal scores keep input order: the first tied entry is a negative.
  EXPECT_EQ(ap_at_k(single_type({1, 1, 1}, {0, 1, 1}), 1).value, 0.0);
  EXPECT_EQ(ap_at_k(single_type({1, 1, 1}, {1, 0, 0}), 1).value, 1.0);
}

TEST(Multilabel, TypesWithoutBothLabelsAreExcluded) {
  MultilabelEval e;
  e.add(0, 0.9, 1);
  e.add(0, 0.1, 0);
  e.add(1, 0.5, 1);
  const auto r = roc_auc(e);
  EXPECT_EQ(r.excluded, 1u);
  EXPECT_EQ(r.per_type.size(), 1u);
  EXPECT_EQ(roc_auc(e, Averaging::kMicro).value, 1.0);
}

TEST(Oracles, HundredRandomInstances) {
  Rng rng(2024);
  double worst = 0.0;
  for (int c = 0; c < 100; ++c) worst = std::max(worst, oracles::metric_gap(rng));
  EXPECT_LE(worst, 1e-10);
}

TEST(Report, Shape) {
  const auto j = metric_report(worked_example());
  EXPECT_EQ(j.at("task"), "multi_class");
  EXPECT_DOUBLE_EQ(j.at("metrics").at("accuracy").get<double>(), 0.75);
  const auto m = metric_report(single_type({0.9, 0.1}, {1, 0}));
  EXPECT_EQ(m.at("task"), "multi_label");
  EXPECT_TRUE(m.at("metrics").contains("roc_auc"));
}

}  // namespace
}  // namespace csse
