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

#ifndef CSSE_SEARCH_HPP_
#define CSSE_SEARCH_HPP_

/// @file search.hpp
/// The search procedure: single-path supernet training, the message-aware
/// partition into sub-supernets, natural-gradient search over genotypes,
/// per-query scope selection and hyperparameter-sampled fine-tuning.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "csse/difftape.hpp"
#include "csse/encoder.hpp"
#include "csse/metrics.hpp"
#include "csse/random.hpp"
#include "csse/relgraph.hpp"
#include "csse/scope.hpp"
#include "json.hpp"

namespace csse {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct SearchConfig {
  std::size_t supernet_epochs = 50;
  std::size_t subsupernet_epochs = 50;
  std::size_t batch_size = 512;
  double tau = 0.05;
  std::size_t eta = 3;
  std::size_t num_layers = 3;
  std::size_t dim = 64;
  std::size_t partitions = 4;
  TaskType task = TaskType::kMultiClass;
  /// Adam step size while training the supernet and its children.
  double supernet_learning_rate = 0.01;
  std::size_t search_steps = 100;
  std::size_t search_samples = 8;  // lambda
  double search_step_size = 0.1;   // delta
  /// Epochs adapting the winning child to its genotype before scope selection.
  std::size_t scope_epochs = 50;
  std::size_t hyper_steps = 3;
  std::size_t finetune_epochs = 60;
  std::array<double, 2> lr_log10{-3.1, -2.9};
  std::array<double, 2> wd_log10{-5.0, -3.0};
  std::size_t plateau_patience = 5;
  std::size_t negatives_per_positive = 1;
  /// Global gradient-norm bound applied before each Adam step; 0 disables.
  double grad_clip = 1.0;

  /// Epoch counts and hyper steps at the original scale.
  static SearchConfig paper_preset() {
    SearchConfig c;
    c.supernet_epochs = 400;
    c.subsupernet_epochs = 400;
    c.hyper_steps = 10;
    return c;
  }

  void validate() const {
    if (partitions != kSlotSizes[0]) {
      throw std::invalid_argument("partitions must equal the number of message operators (4)");
    }
    if (eta < 1 || eta > num_layers) throw std::invalid_argument("eta must lie in [1, num_layers]");
    if (dim == 0 || dim % 2 != 0) throw std::invalid_argument("dim must be even and positive");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
    if (search_samples < 2) throw std::invalid_argument("search_samples must be at least 2");
    if (!(search_step_size > 0.0 && search_step_size <= 1.0)) {
      throw std::invalid_argument("search_step_size must lie in (0, 1]");
    }
    if (hyper_steps == 0) throw std::invalid_argument("hyper_steps must be positive");
    if (!(lr_log10[0] <= lr_log10[1]) || !(wd_log10[0] <= wd_log10[1])) {
      throw std::invalid_argument("learning-rate and weight-decay ranges must be ordered");
    }
    if (negatives_per_positive == 0) throw std::invalid_argument("negatives_per_positive must be positive");
    if (!(grad_clip >= 0.0)) throw std::invalid_argument("grad_clip must be non-negative");
  }
};

inline nlohmann::json config_to_json(const SearchConfig& c) {
  return {{"supernet_epochs", c.supernet_epochs},
          {"subsupernet_epochs", c.subsupernet_epochs},
          {"batch_size", c.batch_size},
          {"tau", c.tau},
          {"eta", c.eta},
          {"num_layers", c.num_layers},
          {"dim", c.dim},
          {"partitions", c.partitions},
          {"task", task_name(c.task)},
          {"supernet_learning_rate", c.supernet_learning_rate},
          {"search_steps", c.search_steps},
          {"search_samples", c.search_samples},
          {"search_step_size", c.search_step_size},
          {"scope_epochs", c.scope_epochs},
          {"hyper_steps", c.hyper_steps},
          {"finetune_epochs", c.finetune_epochs},
          {"lr_log10", c.lr_log10},
          {"wd_log10", c.wd_log10},
          {"plateau_patience", c.plateau_patience},
          {"negatives_per_positive", c.negatives_per_positive},
          {"grad_clip", c.grad_clip}};
}

inline SearchConfig config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known{
      "supernet_epochs", "subsupernet_epochs", "batch_size",    "tau",
      "eta",             "num_layers",         "dim",           "partitions",
      "task",            "supernet_learning_rate", "search_steps", "search_samples",
      "search_step_size", "scope_epochs", "hyper_steps",       "finetune_epochs", "lr_log10",
      "wd_log10",        "plateau_patience",   "negatives_per_positive", "grad_clip"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw std::invalid_argument("search: unknown field '" + k + "'");
    }
  }
  SearchConfig c;
  auto get = [&j](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument(std::string("search.") + key + ": wrong type");
    }
  };
  get("supernet_epochs", c.supernet_epochs);
  get("subsupernet_epochs", c.subsupernet_epochs);
  get("batch_size", c.batch_size);
  get("tau", c.tau);
  get("eta", c.eta);
  get("num_layers", c.num_layers);
  get("dim", c.dim);
  get("partitions", c.partitions);
  if (j.contains("task")) c.task = task_from_name(j.at("task").get<std::string>());
  get("supernet_learning_rate", c.supernet_learning_rate);
  get("search_steps", c.search_steps);
  get("search_samples", c.search_samples);
  get("search_step_size", c.search_step_size);
  get("scope_epochs", c.scope_epochs);
  get("hyper_steps", c.hyper_steps);
  get("finetune_epochs", c.finetune_epochs);
  get("lr_log10", c.lr_log10);
  get("wd_log10", c.wd_log10);
  get("plateau_patience", c.plateau_patience);
  get("negatives_per_positive", c.negatives_per_positive);
  get("grad_clip", c.grad_clip);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Labelled query pairs
// ---------------------------------------------------------------------------

/// Query pairs with their targets. Multi-class rows carry one relation id;
/// multi-label rows carry a 0/1 row over all relations and a mask marking
/// the labelled entries (positives and sampled negatives).
struct LabeledPairs {
  TaskType task = TaskType::kMultiClass;
  std::size_t num_classes = 0;
  std::vector<NodePair> pairs;
  /// Positive triples of each row, hidden from propagation while that row
  /// is being trained on.
  std::vector<std::vector<Triple>> hidden;
  std::vector<std::size_t> classes;
  std::vector<double> labels;
  std::vector<double> mask;

  std::size_t size() const { return pairs.size(); }

  LabeledPairs subset(std::span<const std::size_t> rows) const {
    LabeledPairs s;
    s.task = task;
    s.num_classes = num_classes;
    for (auto r : rows) {
      s.pairs.push_back(pairs.at(r));
      s.hidden.push_back(hidden.at(r));
      if (task == TaskType::kMultiClass) {
        s.classes.push_back(classes.at(r));
      } else {
        const auto first = static_cast<std::ptrdiff_t>(r * num_classes);
        const auto last = first + static_cast<std::ptrdiff_t>(num_classes);
        s.labels.insert(s.labels.end(), labels.begin() + first, labels.begin() + last);
        s.mask.insert(s.mask.end(), mask.begin() + first, mask.begin() + last);
      }
    }
    return s;
  }

  TaskTargets targets() const {
    TaskTargets t;
    t.task = task;
    if (task == TaskType::kMultiClass) {
      t.classes = classes;
    } else {
      t.labels = Tensor::matrix(size(), num_classes, labels);
      t.mask = Tensor::matrix(size(), num_classes, mask);
    }
    return t;
  }

  std::vector<Triple> hidden_of(std::span<const std::size_t> rows) const {
    std::vector<Triple> out;
    for (auto r : rows) out.insert(out.end(), hidden[r].begin(), hidden[r].end());
    return out;
  }
};

/// One row per triple; the relation is the class.
inline LabeledPairs multiclass_pairs(std::span<const Triple> triples, std::size_t num_relations) {
  LabeledPairs p;
  p.task = TaskType::kMultiClass;
  p.num_classes = num_relations;
  for (const auto& t : triples) {
    if (t.relation >= num_relations) throw std::out_of_range("multiclass_pairs: relation out of range");
    p.pairs.push_back({t.head, t.tail});
    p.hidden.push_back({t});
    p.classes.push_back(t.relation);
  }
  return p;
}

/// One row per distinct (head, tail) pair among positives and negatives, in
/// sorted pair order.
inline LabeledPairs multilabel_pairs(std::span<const Triple> positives, std::span<const Triple> negatives,
                                     std::size_t num_relations) {
  std::map<std::pair<NodeId, NodeId>, std::size_t> row_of;
  for (const auto* list : {&positives, &negatives}) {
    for (const auto& t : *list) row_of.emplace(std::make_pair(t.head, t.tail), 0);
  }
  LabeledPairs p;
  p.task = TaskType::kMultiLabel;
  p.num_classes = num_relations;
  for (auto& [key, row] : row_of) {
    row = p.pairs.size();
    p.pairs.push_back({key.first, key.second});
  }
  p.hidden.resize(p.pairs.size());
  p.labels.assign(p.pairs.size() * num_relations, 0.0);
  p.mask.assign(p.pairs.size() * num_relations, 0.0);
  for (const auto& t : negatives) {
    if (t.relation >= num_relations) throw std::out_of_range("multilabel_pairs: relation out of range");
    p.mask[row_of.at({t.head, t.tail}) * num_relations + t.relation] = 1.0;
  }
  for (const auto& t : positives) {
    if (t.relation >= num_relations) throw std::out_of_range("multilabel_pairs: relation out of range");
    const std::size_t row = row_of.at({t.head, t.tail});
    p.labels[row * num_relations + t.relation] = 1.0;
    p.mask[row * num_relations + t.relation] = 1.0;
    p.hidden[row].push_back(t);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass over query pairs
// ---------------------------------------------------------------------------

/// Per-row scope indices, or none for the relaxed mixture.
using FixedScopes = std::optional<std::span<const std::size_t>>;

inline Tensor one_hot_rows(std::span<const std::size_t> index, std::size_t width) {
  std::vector<double> v(index.size() * width, 0.0);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= width) throw std::out_of_range("scope index out of range");
    v[r * width + index[r]] = 1.0;
  }
  return Tensor::matrix(index.size(), width, std::move(v));
}

/// Logits (B×R) for the given pairs. With fixed scopes each row uses exactly
/// its scope's representation; otherwise the Gumbel-Softmax mixture, with
/// noise drawn from `noise` when given and zero noise otherwise.
inline Tensor pair_logits(const RelGraph& graph, const EdgeIndex& edges, const Genotype& genotype,
                          const SupernetParams& params, std::span<const NodePair> pairs, FixedScopes scopes,
                          std::size_t eta, double tau, Rng* noise) {
  const LayerOutputs layers = encode(graph, genotype, params, edges);
  const auto reprs = all_scope_reprs(layers, pairs, eta);
  Tensor p;
  if (scopes) {
    if (scopes->size() != pairs.size()) throw ShapeError("pair_logits: one scope per pair required");
    p = one_hot_rows(*scopes, eta * eta);
  } else {
    const Tensor beta = score_scopes(reprs, ScopeScorer::of(params));
    p = noise ? gumbel_probs(beta, tau, gumbel_noise(pairs.size(), eta * eta, *noise)) : gumbel_probs(beta, tau);
  }
  return predict(mixture(p, reprs), params);
}

/// Validation metric driving the search: accuracy or macro PR-AUC.
inline double selection_metric(const Tensor& logits, const LabeledPairs& data);

inline MulticlassEval multiclass_eval(const Tensor& logits, const LabeledPairs& data) {
  MulticlassEval e;
  e.truth = data.classes;
  e.logits = logits.vec();
  e.num_classes = data.num_classes;
  return e;
}

inline MultilabelEval multilabel_eval(const Tensor& logits, const LabeledPairs& data) {
  MultilabelEval e;
  const std::size_t R = data.num_classes;
  for (std::size_t r = 0; r < data.size(); ++r) {
    for (std::size_t c = 0; c < R; ++c) {
      if (data.mask[r * R + c] == 0.0) continue;
      e.add(c, logits[r * R + c], data.labels[r * R + c] != 0.0 ? 1 : 0);
    }
  }
  return e;
}

inline double selection_metric(const Tensor& logits, const LabeledPairs& data) {
  if (data.task == TaskType::kMultiClass) return accuracy(multiclass_eval(logits, data));
  return pr_auc(multilabel_eval(logits, data)).value;
}

inline nlohmann::json full_metrics(const Tensor& logits, const LabeledPairs& data) {
  if (data.task == TaskType::kMultiClass) return metric_report(multiclass_eval(logits, data));
  return metric_report(multilabel_eval(logits, data));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

using PathSampler = std::function<Genotype(Rng&)>;

struct TrainTrace {
  std::vector<double> epoch_loss;    // mean batch loss per epoch
  std::vector<double> epoch_median;  // median batch loss per epoch
  std::size_t steps = 0;
};

/// Thrown when a training loss stops being finite; carries the context.
class DivergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Rescales gradients so their joint Euclidean norm is at most max_norm.
inline void clip_gradients(std::vector<std::optional<Tensor>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    if (!g) continue;
    for (double x : g->vec()) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double f = max_norm / norm;
  for (auto& g : grads) {
    if (!g) continue;
    std::vector<double> v = g->vec();
    for (auto& x : v) x *= f;
    g = Tensor(g->shape(), std::move(v));
  }
}

/// One Adam update of params on a batch. Returns the batch loss.
inline double train_batch(SupernetParams& params, OptimState& opt, const RelGraph& graph,
                          const LabeledPairs& data, std::span<const std::size_t> rows, const Genotype& genotype,
                          FixedScopes scopes, const SearchConfig& cfg, Rng* noise) {
  const LabeledPairs batch = data.subset(rows);
  const EdgeIndex edges = EdgeIndex::build(graph, data.hidden_of(rows));
  Tape tape;
  const SupernetParams live = params.attach(tape);
  Tensor loss;
  try {
    loss = task_loss(pair_logits(graph, edges, genotype, live, batch.pairs, scopes, cfg.eta, cfg.tau, noise),
                     batch.targets());
  } catch (const NumericalError& e) {
    throw DivergenceError("non-finite value under genotype " + genotype.to_string() + ": " + e.what());
  }
  const double value = loss.item();
  if (!std::isfinite(value)) throw DivergenceError("non-finite loss under genotype " + genotype.to_string());
  const Gradients grads = tape.backward(loss);
  std::vector<Tensor> flat;
  std::vector<std::optional<Tensor>> g;
  const auto targets = params.tensors();
  const auto leaves = live.tensors();
  for (std::size_t i = 0; i < targets.size(); ++i) {
    flat.push_back(*targets[i]);
    if (grads.reached(*leaves[i])) {
      g.emplace_back(grads.of(*leaves[i]));
    } else {
      g.emplace_back(std::nullopt);
    }
  }
  if (cfg.grad_clip > 0.0) clip_gradients(g, cfg.grad_clip);
  adam_step(flat, g, opt);
  for (std::size_t i = 0; i < targets.size(); ++i) *targets[i] = flat[i];
  return value;
}

/// Epochs of shuffled mini-batches, one sampled genotype per batch.
/// `scopes`, when set, is aligned with the rows of data.
inline TrainTrace train_paths(SupernetParams& params, OptimState& opt, const RelGraph& graph,
                              const LabeledPairs& data, const std::optional<std::vector<std::size_t>>& scopes,
                              const SearchConfig& cfg, std::size_t epochs, const PathSampler& sampler,
                              std::uint64_t seed, bool gumbel_noise_on = true) {
  TrainTrace trace;
  if (data.size() == 0 || epochs == 0) return trace;
  Rng rng(seed);
  Rng noise_rng(derive_seed(seed, "gumbel"));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    std::vector<double> losses;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      const Genotype g = sampler(rng);
      std::vector<std::size_t> batch_scopes;
      FixedScopes fixed;
      if (scopes) {
        for (auto r : rows) batch_scopes.push_back((*scopes)[r]);
        fixed = std::span<const std::size_t>(batch_scopes);
      }
      try {
        losses.push_back(train_batch(params, opt, graph, data, rows, g, fixed, cfg,
                                     gumbel_noise_on ? &noise_rng : nullptr));
        total += losses.back();
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batches) + ")");
      }
      ++batches;
      ++trace.steps;
    }
    trace.epoch_loss.push_back(total / static_cast<double>(batches));
    std::sort(losses.begin(), losses.end());
    const std::size_t h = losses.size() / 2;
    trace.epoch_median.push_back(losses.size() % 2 ? losses[h] : 0.5 * (losses[h - 1] + losses[h]));
  }
  return trace;
}

inline PathSampler uniform_sampler(std::size_t layers, std::vector<SlotPin> pins = {}) {
  resolve_pins(layers, pins);
  return [layers, pins](Rng& rng) { return sample_path(rng, layers, pins); };
}

/// Single-path training of the whole supernet with relaxed scopes.
inline TrainTrace train_supernet(SupernetParams& params, const RelGraph& graph, const LabeledPairs& train,
                                 const SearchConfig& cfg, std::uint64_t seed,
                                 const std::optional<std::vector<std::size_t>>& scopes = std::nullopt,
                                 std::vector<SlotPin> pins = {}) {
  OptimState opt;
  opt.learning_rate = cfg.supernet_learning_rate;
  return train_paths(params, opt, graph, train, scopes, cfg, cfg.supernet_epochs,
                     uniform_sampler(cfg.num_layers, std::move(pins)), seed);
}

// ---------------------------------------------------------------------------
// Partition
// ---------------------------------------------------------------------------

struct SubSupernet {
  MesOp pinned = MesOp::kSub;
  SupernetParams params;

  std::vector<SlotPin> pins() const { return {{0, static_cast<std::size_t>(pinned)}}; }
};

/// One child per message operator, each an exact copy of the parent.
inline std::vector<SubSupernet> partition(const SupernetParams& parent) {
  std::vector<SubSupernet> children;
  for (std::size_t m = 0; m < kSlotSizes[0]; ++m) children.push_back({static_cast<MesOp>(m), parent.detached()});
  return children;
}

inline std::uint64_t child_seed(std::uint64_t seed, std::size_t k) {
  return derive_seed(seed, "child-" + std::to_string(k));
}

/// Continues single-path training inside each child with its pin.
inline std::vector<TrainTrace> train_subsupernets(std::vector<SubSupernet>& children, const RelGraph& graph,
                                                  const LabeledPairs& train, const SearchConfig& cfg,
                                                  std::uint64_t seed,
                                                  const std::optional<std::vector<std::size_t>>& scopes =
                                                      std::nullopt) {
  std::vector<TrainTrace> traces;
  for (std::size_t k = 0; k < children.size(); ++k) {
    OptimState opt;
    opt.learning_rate = cfg.supernet_learning_rate;
    traces.push_back(train_paths(children[k].params, opt, graph, train, scopes, cfg, cfg.subsupernet_epochs,
                                 uniform_sampler(cfg.num_layers, children[k].pins()), child_seed(seed, k)));
  }
  return traces;
}

// ---------------------------------------------------------------------------
// Natural-gradient encoding search
// ---------------------------------------------------------------------------

/// Independent categorical distribution per decision slot.
struct ArchDistribution {
  std::size_t layers = 0;
  std::vector<std::vector<double>> theta;

  static ArchDistribution uniform(std::size_t layers, std::span<const SlotPin> pins = {}) {
    const auto fixed = resolve_pins(layers, pins);
    ArchDistribution d;
    d.layers = layers;
    for (std::size_t s = 0; s < fixed.size(); ++s) {
      const std::size_t k = kSlotSizes[s % kSlotsPerLayer];
      std::vector<double> row(k, fixed[s] ? 0.0 : 1.0 / static_cast<double>(k));
      if (fixed[s]) row[*fixed[s]] = 1.0;
      d.theta.push_back(std::move(row));
    }
    return d;
  }

  Genotype sample(Rng& rng) const {
    std::vector<std::size_t> c(theta.size());
    for (std::size_t s = 0; s < theta.size(); ++s) {
      const double x = rng.uniform();
      double acc = 0.0;
      c[s] = theta[s].size() - 1;
      for (std::size_t k = 0; k < theta[s].size(); ++k) {
        acc += theta[s][k];
        if (x < acc) {
          c[s] = k;
          break;
        }
      }
      while (theta[s][c[s]] == 0.0 && c[s] > 0) --c[s];  // never land on a zero-mass choice
    }
    return Genotype::from_choices(c);
  }

  /// Most probable choice per slot; ties go to the lowest index.
  Genotype mode() const {
    std::vector<std::size_t> c(theta.size());
    for (std::size_t s = 0; s < theta.size(); ++s) {
      c[s] = static_cast<std::size_t>(std::max_element(theta[s].begin(), theta[s].end()) - theta[s].begin());
    }
    return Genotype::from_choices(c);
  }

  /// Smallest probability the distribution puts on any of g's slot choices.
  double min_slot_mass(const Genotype& g) const {
    const auto c = g.choices();
    double m = 1.0;
    for (std::size_t s = 0; s < c.size(); ++s) m = std::min(m, theta[s][c[s]]);
    return m;
  }

  /// Largest per-slot total-variation distance to another distribution.
  double max_tv(const ArchDistribution& o) const {
    double worst = 0.0;
    for (std::size_t s = 0; s < theta.size(); ++s) {
      double tv = 0.0;
      for (std::size_t k = 0; k < theta[s].size(); ++k) tv += std::abs(theta[s][k] - o.theta[s][k]);
      worst = std::max(worst, 0.5 * tv);
    }
    return worst;
  }
};

/// +1 for the better half, -1 for the worse half; tied scores share the
/// mean utility of the ranks they span, so equal scores cancel out.
inline std::vector<double> ranking_utilities(std::span<const double> scores) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<double> u(n, 0.0);
  auto rank_utility = [n](std::size_t r) {
    if (n % 2 == 1 && r == n / 2) return 0.0;
    return r < n / 2 ? 1.0 : -1.0;
  };
  for (std::size_t a = 0; a < n;) {
    std::size_t b = a;
    double acc = 0.0;
    while (b < n && scores[order[b]] == scores[order[a]]) acc += rank_utility(b++);
    for (std::size_t k = a; k < b; ++k) u[order[k]] = acc / static_cast<double>(b - a);
    a = b;
  }
  return u;
}

/// theta_c += delta * mean_k(u_k * (1[c_k = c] - theta_c)), then clipped to
/// the simplex and renormalized.
inline void natural_gradient_step(ArchDistribution& dist, std::span<const Genotype> samples,
                                  std::span<const double> utilities, double delta) {
  if (samples.size() != utilities.size() || samples.empty()) {
    throw std::invalid_argument("natural_gradient_step: samples and utilities differ in length");
  }
  const double inv = 1.0 / static_cast<double>(samples.size());
  std::vector<std::vector<std::size_t>> chosen;
  for (const auto& g : samples) chosen.push_back(g.choices());
  for (std::size_t s = 0; s < dist.theta.size(); ++s) {
    auto& th = dist.theta[s];
    std::vector<double> grad(th.size(), 0.0);
    for (std::size_t k = 0; k < samples.size(); ++k) {
      for (std::size_t c = 0; c < th.size(); ++c) {
        grad[c] += utilities[k] * ((chosen[k][s] == c ? 1.0 : 0.0) - th[c]) * inv;
      }
    }
    double total = 0.0;
    for (std::size_t c = 0; c < th.size(); ++c) {
      th[c] = std::max(0.0, th[c] + delta * grad[c]);
      total += th[c];
    }
    for (auto& x : th) x /= total;
  }
}

using GenotypeEvaluator = std::function<double(const Genotype&)>;

/// Runs the natural-gradient loop on dist. `on_step`, when given, sees the
/// distribution after every update.
inline void optimize_distribution(ArchDistribution& dist, const GenotypeEvaluator& evaluate, std::size_t steps,
                                  std::size_t samples, double delta, Rng& rng,
                                  const std::function<void(const ArchDistribution&)>& on_step = {}) {
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<Genotype> gs;
    std::vector<double> scores;
    for (std::size_t k = 0; k < samples; ++k) {
      gs.push_back(dist.sample(rng));
      const double score = evaluate(gs.back());
      if (!std::isfinite(score)) throw NumericalError("search: validation metric is not finite for " +
                                                      gs.back().to_string());
      scores.push_back(score);
    }
    natural_gradient_step(dist, gs, ranking_utilities(scores), delta);
    if (on_step) on_step(dist);
  }
}

/// Frozen-weight validation metric of a genotype inside one child, memoized.
class CachedEvaluator {
 public:
  CachedEvaluator(const RelGraph& graph, const SupernetParams& params, const LabeledPairs& valid,
                  const SearchConfig& cfg, std::optional<std::vector<std::size_t>> scopes)
      : graph_(graph), params_(params), valid_(valid), cfg_(cfg), scopes_(std::move(scopes)),
        edges_(EdgeIndex::build(graph)) {}

  double operator()(const Genotype& g) {
    const auto key = g.choices();
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    FixedScopes fixed;
    if (scopes_) fixed = std::span<const std::size_t>(*scopes_);
    const Tensor logits = pair_logits(graph_, edges_, g, params_, valid_.pairs, fixed, cfg_.eta, cfg_.tau, nullptr);
    const double v = selection_metric(logits, valid_);
    ++evaluations_;
    cache_.emplace(key, v);
    return v;
  }

  std::size_t evaluations() const { return evaluations_; }

 private:
  const RelGraph& graph_;
  const SupernetParams& params_;
  const LabeledPairs& valid_;
  const SearchConfig& cfg_;
  std::optional<std::vector<std::size_t>> scopes_;
  EdgeIndex edges_;
  std::map<std::vector<std::size_t>, double> cache_;
  std::size_t evaluations_ = 0;
};

struct EncodingResult {
  std::vector<Genotype> genotypes;  // per child
  std::vector<double> scores;       // validation metric of each child's genotype
  std::size_t winner = 0;
  std::size_t evaluations = 0;
};

/// Searches each child with its own distribution; the winner is the child
/// whose most probable genotype scores best (ties to the lower index).
inline EncodingResult search_encoding(const std::vector<SubSupernet>& children, const RelGraph& graph,
                                      const LabeledPairs& valid, const SearchConfig& cfg, std::uint64_t seed,
                                      const std::optional<std::vector<std::size_t>>& scopes = std::nullopt) {
  if (children.empty()) throw std::invalid_argument("search_encoding: no sub-supernets");
  EncodingResult out;
  for (std::size_t k = 0; k < children.size(); ++k) {
    CachedEvaluator eval(graph, children[k].params, valid, cfg, scopes);
    const auto pins = children[k].pins();
    ArchDistribution dist = ArchDistribution::uniform(cfg.num_layers, pins);
    Rng rng(child_seed(seed, k));
    optimize_distribution(dist, std::ref(eval), cfg.search_steps, cfg.search_samples, cfg.search_step_size, rng);
    const Genotype best = dist.mode();
    out.genotypes.push_back(best);
    out.scores.push_back(eval(best));
    out.evaluations += eval.evaluations();
    if (out.scores.back() > out.scores[out.winner]) out.winner = k;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scope selection
// ---------------------------------------------------------------------------

/// Zero-noise scope decisions for every row of data. Rows are processed in
/// fixed batches with their own edges hidden, as during training.
inline std::vector<ScopeDecision> search_scopes(const SupernetParams& params, const Genotype& genotype,
                                                const RelGraph& graph, const LabeledPairs& data,
                                                const SearchConfig& cfg) {
  std::vector<ScopeDecision> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(data.size(), start + cfg.batch_size);
    std::vector<std::size_t> rows(end - start);
    std::iota(rows.begin(), rows.end(), start);
    const EdgeIndex edges = EdgeIndex::build(graph, data.hidden_of(rows));
    const std::span<const NodePair> pairs(data.pairs.data() + start, end - start);
    const LayerOutputs layers = encode(graph, genotype, params, edges);
    const Tensor beta = score_scopes(all_scope_reprs(layers, pairs, cfg.eta), ScopeScorer::of(params));
    const Tensor p = gumbel_probs(beta, cfg.tau);
    for (const auto& table : prob_tables(pairs, beta, p, cfg.eta, cfg.tau, false)) out.push_back(select(table));
  }
  return out;
}

inline std::vector<std::size_t> scope_indices(std::span<const ScopeDecision> ds, std::size_t eta) {
  std::vector<std::size_t> out;
  out.reserve(ds.size());
  for (const auto& d : ds) out.push_back(scope_index(d.i, d.j, eta));
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

struct HyperRun {
  double learning_rate = 0.0;
  double weight_decay = 0.0;
  double best_valid = -1.0;
  std::size_t best_epoch = 0;
  std::vector<double> epoch_loss;
  std::vector<double> valid_trace;
  std::string failure;  // empty when the run finished
};

struct FinetuneResult {
  SupernetParams params;  // best-validation weights of the best run
  std::vector<HyperRun> runs;
  std::size_t best_run = 0;
  double valid_metric = 0.0;
};

/// Logits for all rows under hard scopes, batched with the given edges.
inline Tensor evaluate_logits(const RelGraph& graph, const EdgeIndex& edges, const Genotype& genotype,
                              const SupernetParams& params, const LabeledPairs& data,
                              std::span<const std::size_t> scopes, std::size_t eta) {
  return pair_logits(graph, edges, genotype, params, data.pairs, scopes, eta, 1.0, nullptr);
}

/// Independent trainings of fresh weights with sampled learning rate and
/// weight decay; the learning rate halves when the validation metric has
/// not improved for `plateau_patience` epochs.
inline FinetuneResult finetune(const Genotype& genotype, const RelGraph& graph, const LabeledPairs& train,
                               std::span<const std::size_t> train_scopes, const LabeledPairs& valid,
                               std::span<const std::size_t> valid_scopes, const SearchConfig& cfg,
                               std::uint64_t seed) {
  if (train_scopes.size() != train.size() || valid_scopes.size() != valid.size()) {
    throw std::invalid_argument("finetune: one scope per query required");
  }
  FinetuneResult out;
  bool have_best = false;
  const EdgeIndex full = EdgeIndex::build(graph);
  const std::vector<std::size_t> tscopes(train_scopes.begin(), train_scopes.end());
  for (std::size_t h = 0; h < cfg.hyper_steps; ++h) {
    const std::uint64_t run_seed = derive_seed(seed, "hyper-" + std::to_string(h));
    Rng rng(run_seed);
    HyperRun run;
    run.learning_rate = std::pow(10.0, rng.uniform(cfg.lr_log10[0], cfg.lr_log10[1]));
    run.weight_decay = std::pow(10.0, rng.uniform(cfg.wd_log10[0], cfg.wd_log10[1]));
    Rng init_rng(derive_seed(run_seed, "init"));
    SupernetParams params = SupernetParams::init(graph.num_nodes(), graph.num_base_relations(), cfg.dim,
                                                 cfg.num_layers, init_rng);
    SupernetParams best_params = params;
    OptimState opt;
    opt.learning_rate = run.learning_rate;
    opt.weight_decay = run.weight_decay;
    const PathSampler fixed = [&genotype](Rng&) { return genotype; };
    std::size_t stall = 0;
    try {
      for (std::size_t epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
        const auto trace = train_paths(params, opt, graph, train, tscopes, cfg, 1, fixed,
                                       derive_seed(run_seed, "epoch-" + std::to_string(epoch)), false);
        run.epoch_loss.push_back(trace.epoch_loss.at(0));
        const double v =
            selection_metric(evaluate_logits(graph, full, genotype, params, valid, valid_scopes, cfg.eta), valid);
        run.valid_trace.push_back(v);
        if (v > run.best_valid) {
          run.best_valid = v;
          run.best_epoch = epoch;
          best_params = params;
          stall = 0;
        } else if (++stall >= cfg.plateau_patience) {
          opt.learning_rate *= 0.5;
          stall = 0;
        }
      }
    } catch (const NumericalError& e) {
      run.failure = e.what();
    }
    if (run.failure.empty() && run.best_valid >= 0.0 && (!have_best || run.best_valid > out.valid_metric)) {
      have_best = true;
      out.valid_metric = run.best_valid;
      out.best_run = h;
      out.params = best_params;
    }
    out.runs.push_back(std::move(run));
  }
  if (!have_best) {
    std::string msg = "finetune: every run diverged:";
    for (std::size_t h = 0; h < out.runs.size(); ++h) msg += " [run " + std::to_string(h) + "] " + out.runs[h].failure;
    throw NumericalError(msg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

/// Ablation variants: the full search, scopes fixed at (eta, eta), or the
/// encoding fixed to MULT/SUM/CONCAT/TANH in every layer.
enum class Variant { kFull, kFixedScope, kFixedFunction };

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kFixedScope: return "fixed_scope";
    case Variant::kFixedFunction: return "fixed_function";
  }
  return "?";
}

inline Variant variant_from_name(std::string_view s) {
  if (s == "full") return Variant::kFull;
  if (s == "fixed_scope") return Variant::kFixedScope;
  if (s == "fixed_function") return Variant::kFixedFunction;
  throw std::invalid_argument("unknown variant '" + std::string(s) + "'");
}

inline Genotype fixed_function_genotype(std::size_t layers) {
  return Genotype::uniform(layers, {MesOp::kMult, AggKind::kSum, ComOp::kConcat, ActOp::kTanh});
}

inline std::vector<SlotPin> pins_for(const Genotype& g) {
  std::vector<SlotPin> pins;
  const auto c = g.choices();
  for (std::size_t s = 0; s < c.size(); ++s) pins.push_back({s, c[s]});
  return pins;
}

struct SplitNegatives {
  std::vector<Triple> train, valid, test;
  std::size_t saturated = 0;  // positives with no valid corruption
};

/// Type-constrained negatives for each split, checked against all triples.
inline SplitNegatives sample_split_negatives(std::span<const Triple> all, const SplitBundle& splits,
                                             std::size_t per_positive, std::uint64_t seed) {
  SplitNegatives n;
  auto draw = [&](std::span<const Triple> pos, std::vector<Triple>& into, const char* name) {
    auto s = sample_negatives(pos, all, per_positive, derive_seed(seed, name));
    into = std::move(s.negatives);
    n.saturated += s.saturated;
  };
  draw(splits.train, n.train, "train");
  draw(splits.valid, n.valid, "valid");
  draw(splits.test, n.test, "test");
  return n;
}

/// Training graph plus labelled queries for each split.
struct PreparedData {
  RelGraph graph;
  SplitBundle splits;
  LabeledPairs train, valid, test;
};

/// The graph holds training triples only. Multi-label tasks need negatives.
inline PreparedData prepare_data(std::size_t num_nodes, std::size_t num_relations, const SplitBundle& splits,
                                 TaskType task, const SplitNegatives* negatives = nullptr) {
  PreparedData d;
  d.splits = splits;
  d.graph = RelGraph::build(splits.train, num_nodes, num_relations);
  if (task == TaskType::kMultiClass) {
    d.train = multiclass_pairs(splits.train, num_relations);
    d.valid = multiclass_pairs(splits.valid, num_relations);
    d.test = multiclass_pairs(splits.test, num_relations);
  } else {
    if (negatives == nullptr) throw std::invalid_argument("prepare_data: multi-label task needs negatives");
    d.train = multilabel_pairs(splits.train, negatives->train, num_relations);
    d.valid = multilabel_pairs(splits.valid, negatives->valid, num_relations);
    d.test = multilabel_pairs(splits.test, negatives->test, num_relations);
  }
  return d;
}

/// Stage seeds, each derived from the master seed and the stage name.
struct StageSeeds {
  std::uint64_t master = 0;
  std::uint64_t synth = 0, split = 0, negatives = 0, init = 0, supernet = 0, subsupernet = 0, search = 0,
                scopes = 0, finetune = 0;

  static StageSeeds from(std::uint64_t master) {
    StageSeeds s;
    s.master = master;
    s.synth = derive_seed(master, "synth");
    s.split = derive_seed(master, "split");
    s.negatives = derive_seed(master, "negatives");
    s.init = derive_seed(master, "init");
    s.supernet = derive_seed(master, "supernet");
    s.subsupernet = derive_seed(master, "subsupernet");
    s.search = derive_seed(master, "search");
    s.scopes = derive_seed(master, "scopes");
    s.finetune = derive_seed(master, "finetune");
    return s;
  }

  nlohmann::json to_json() const {
    return {{"master", master},     {"synth", synth},       {"split", split},
            {"negatives", negatives}, {"init", init},       {"supernet", supernet},
            {"subsupernet", subsupernet}, {"search", search}, {"scopes", scopes},
            {"finetune", finetune}};
  }
};

inline std::optional<std::vector<std::size_t>> fixed_scopes_for(Variant v, const LabeledPairs& data,
                                                                std::size_t eta) {
  if (v != Variant::kFixedScope) return std::nullopt;
  return std::vector<std::size_t>(data.size(), scope_index(eta, eta, eta));
}

inline SupernetParams initial_params(const PreparedData& data, const SearchConfig& cfg, const StageSeeds& seeds) {
  Rng rng(seeds.init);
  return SupernetParams::init(data.graph.num_nodes(), data.graph.num_base_relations(), cfg.dim, cfg.num_layers,
                              rng);
}

/// Supernet stage. The fixed-function variant trains its single path.
inline TrainTrace supernet_stage(SupernetParams& params, const PreparedData& data, const SearchConfig& cfg,
                                 Variant v, const StageSeeds& seeds) {
  std::vector<SlotPin> pins;
  if (v == Variant::kFixedFunction) pins = pins_for(fixed_function_genotype(cfg.num_layers));
  return train_supernet(params, data.graph, data.train, cfg, seeds.supernet,
                        fixed_scopes_for(v, data.train, cfg.eta), std::move(pins));
}

/// Four pinned children, or the trained path itself for fixed-function.
inline std::vector<SubSupernet> partition_stage(const SupernetParams& params, const SearchConfig& cfg, Variant v) {
  if (v == Variant::kFixedFunction) return {{fixed_function_genotype(cfg.num_layers).layers[0].mes, params.detached()}};
  return partition(params);
}

inline std::vector<TrainTrace> subtrain_stage(std::vector<SubSupernet>& children, const PreparedData& data,
                                              const SearchConfig& cfg, Variant v, const StageSeeds& seeds) {
  if (v == Variant::kFixedFunction) return std::vector<TrainTrace>(children.size());
  return train_subsupernets(children, data.graph, data.train, cfg, seeds.subsupernet,
                            fixed_scopes_for(v, data.train, cfg.eta));
}

inline EncodingResult search_stage(const std::vector<SubSupernet>& children, const PreparedData& data,
                                   const SearchConfig& cfg, Variant v, const StageSeeds& seeds) {
  if (v == Variant::kFixedFunction) {
    const Genotype g = fixed_function_genotype(cfg.num_layers);
    CachedEvaluator eval(data.graph, children.at(0).params, data.valid, cfg, std::nullopt);
    EncodingResult r;
    r.genotypes = {g};
    r.scores = {eval(g)};
    r.evaluations = eval.evaluations();
    return r;
  }
  return search_encoding(children, data.graph, data.valid, cfg, seeds.search,
                         fixed_scopes_for(v, data.valid, cfg.eta));
}

inline std::vector<ScopeDecision> constant_scopes(const LabeledPairs& data, std::size_t i, std::size_t j) {
  std::vector<ScopeDecision> out;
  for (const auto& p : data.pairs) out.push_back({p, i, j});
  return out;
}

struct SplitScopes {
  std::vector<ScopeDecision> train, valid, test;

  std::vector<ScopeDecision> all() const {
    std::vector<ScopeDecision> a = train;
    a.insert(a.end(), valid.begin(), valid.end());
    a.insert(a.end(), test.begin(), test.end());
    return a;
  }
};

/// Continues training a copy of the winning child on its searched genotype
/// alone, so the scope scorer is fitted to that encoding.
inline SupernetParams adapt_winner(const SupernetParams& winner, const Genotype& genotype, const PreparedData& data,
                                   const SearchConfig& cfg, std::uint64_t seed, TrainTrace* trace = nullptr) {
  SupernetParams params = winner.detached();
  OptimState opt;
  opt.learning_rate = cfg.supernet_learning_rate;
  const PathSampler fixed = [genotype](Rng&) { return genotype; };
  TrainTrace t = train_paths(params, opt, data.graph, data.train, std::nullopt, cfg, cfg.scope_epochs, fixed, seed);
  if (trace) *trace = std::move(t);
  return params;
}

/// Constant (eta, eta) scopes for fixed-scope; otherwise the winner is first
/// adapted to its genotype and its scorer selects a scope per query.
inline SplitScopes scopes_stage(const SupernetParams& winner, const Genotype& genotype, const PreparedData& data,
                                const SearchConfig& cfg, Variant v, std::uint64_t seed,
                                TrainTrace* adapt_trace = nullptr) {
  SplitScopes s;
  if (v == Variant::kFixedScope) {
    s.train = constant_scopes(data.train, cfg.eta, cfg.eta);
    s.valid = constant_scopes(data.valid, cfg.eta, cfg.eta);
    s.test = constant_scopes(data.test, cfg.eta, cfg.eta);
    return s;
  }
  const SupernetParams adapted = adapt_winner(winner, genotype, data, cfg, seed, adapt_trace);
  s.train = search_scopes(adapted, genotype, data.graph, data.train, cfg);
  s.valid = search_scopes(adapted, genotype, data.graph, data.valid, cfg);
  s.test = search_scopes(adapted, genotype, data.graph, data.test, cfg);
  return s;
}

inline FinetuneResult finetune_stage(const Genotype& genotype, const SplitScopes& scopes, const PreparedData& data,
                                     const SearchConfig& cfg, const StageSeeds& seeds) {
  return finetune(genotype, data.graph, data.train, scope_indices(scopes.train, cfg.eta), data.valid,
                  scope_indices(scopes.valid, cfg.eta), cfg, seeds.finetune);
}

/// {"valid": report, "test": report} under hard scopes on the training graph.
inline nlohmann::json eval_stage(const SupernetParams& params, const Genotype& genotype, const SplitScopes& scopes,
                                 const PreparedData& data, const SearchConfig& cfg) {
  const EdgeIndex full = EdgeIndex::build(data.graph);
  const auto vs = scope_indices(scopes.valid, cfg.eta);
  const auto ts = scope_indices(scopes.test, cfg.eta);
  return {{"valid", full_metrics(evaluate_logits(data.graph, full, genotype, params, data.valid, vs, cfg.eta),
                                 data.valid)},
          {"test", full_metrics(evaluate_logits(data.graph, full, genotype, params, data.test, ts, cfg.eta),
                                data.test)}};
}

struct PipelineResult {
  Variant variant = Variant::kFull;
  TrainTrace supernet_trace;
  std::vector<TrainTrace> child_traces;
  EncodingResult encoding;
  TrainTrace scope_trace;
  Genotype genotype;
  SplitScopes scopes;
  FinetuneResult finetuned;
  nlohmann::json metrics;  // {"valid": ..., "test": ...}

  double test_metric(const std::string& name) const { return metrics.at("test").at("metrics").at(name).get<double>(); }
};

/// Every stage after data preparation, in order, for one variant.
inline PipelineResult run_search(const PreparedData& data, const SearchConfig& cfg, Variant v,
                                 const StageSeeds& seeds) {
  cfg.validate();
  PipelineResult out;
  out.variant = v;
  SupernetParams params = initial_params(data, cfg, seeds);
  out.supernet_trace = supernet_stage(params, data, cfg, v, seeds);
  auto children = partition_stage(params, cfg, v);
  out.child_traces = subtrain_stage(children, data, cfg, v, seeds);
  out.encoding = search_stage(children, data, cfg, v, seeds);
  out.genotype = out.encoding.genotypes.at(out.encoding.winner);
  out.scopes = scopes_stage(children[out.encoding.winner].params, out.genotype, data, cfg, v, seeds.scopes,
                            &out.scope_trace);
  out.finetuned = finetune_stage(out.genotype, out.scopes, data, cfg, seeds);
  out.metrics = eval_stage(out.finetuned.params, out.genotype, out.scopes, data, cfg);
  return out;
}

}  // namespace csse

#endif  // CSSE_SEARCH_HPP_
