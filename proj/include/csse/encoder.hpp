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

#ifndef CSSE_ENCODER_HPP_
#define CSSE_ENCODER_HPP_

/// @file encoder.hpp
/// Weight-sharing relational message-passing supernet.
///
/// Every layer computes, for each node u,
///   m_u = AGG over incoming augmented edges (v, r, u) of MES(h_v, h_r)
///   h_u = ACT(COM(h_u, m_u))
/// with the four operators chosen per layer by a Genotype. All operator
/// branches own their weights in SupernetParams; a forward pass touches only
/// the branches the genotype selects.

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "csse/difftape.hpp"
#include "csse/random.hpp"
#include "csse/relgraph.hpp"
#include "json.hpp"

namespace csse {

enum class MesOp { kSub, kMult, kCorr, kRotate };
enum class ComOp { kMlp, kConcat };
enum class ActOp { kRelu, kTanh, kIdentity };

inline constexpr std::array<std::string_view, 4> kMesNames{"SUB", "MULT", "CORR", "ROTATE"};
inline constexpr std::array<std::string_view, 3> kAggNames{"SUM", "MAX", "MEAN"};
inline constexpr std::array<std::string_view, 2> kComNames{"MLP", "CONCAT"};
inline constexpr std::array<std::string_view, 3> kActNames{"RELU", "TANH", "IDENTITY"};

/// Decision slots per layer, in order mes, agg, com, act, and their sizes.
inline constexpr std::size_t kSlotsPerLayer = 4;
inline constexpr std::array<std::size_t, kSlotsPerLayer> kSlotSizes{4, 3, 2, 3};

struct LayerChoice {
  MesOp mes = MesOp::kSub;
  AggKind agg = AggKind::kSum;
  ComOp com = ComOp::kMlp;
  ActOp act = ActOp::kRelu;

  bool operator==(const LayerChoice&) const = default;
};

/// One concrete encoding function: an operator choice per layer.
struct Genotype {
  std::vector<LayerChoice> layers;

  bool operator==(const Genotype&) const = default;
  std::size_t num_layers() const { return layers.size(); }

  /// Flattened slot values, layer-major.
  std::vector<std::size_t> choices() const {
    std::vector<std::size_t> c;
    c.reserve(layers.size() * kSlotsPerLayer);
    for (const auto& l : layers) {
      c.push_back(static_cast<std::size_t>(l.mes));
      c.push_back(static_cast<std::size_t>(l.agg));
      c.push_back(static_cast<std::size_t>(l.com));
      c.push_back(static_cast<std::size_t>(l.act));
    }
    return c;
  }

  static Genotype from_choices(std::span<const std::size_t> c) {
    if (c.size() % kSlotsPerLayer != 0 || c.empty()) {
      throw std::invalid_argument("Genotype: slot count must be a positive multiple of 4");
    }
    Genotype g;
    for (std::size_t i = 0; i < c.size(); i += kSlotsPerLayer) {
      for (std::size_t s = 0; s < kSlotsPerLayer; ++s) {
        if (c[i + s] >= kSlotSizes[s]) throw std::out_of_range("Genotype: slot value out of range");
      }
      g.layers.push_back({static_cast<MesOp>(c[i]), static_cast<AggKind>(c[i + 1]),
                          static_cast<ComOp>(c[i + 2]), static_cast<ActOp>(c[i + 3])});
    }
    return g;
  }

  /// Same operators at every layer.
  static Genotype uniform(std::size_t layers, LayerChoice choice) {
    return Genotype{std::vector<LayerChoice>(layers, choice)};
  }

  bool uses_rotate() const {
    for (const auto& l : layers) {
      if (l.mes == MesOp::kRotate) return true;
    }
    return false;
  }

  std::string to_string() const {
    std::string s;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (i) s += " | ";
      s += std::string(kMesNames[static_cast<std::size_t>(l.mes)]) + "/" +
           std::string(kAggNames[static_cast<std::size_t>(l.agg)]) + "/" +
           std::string(kComNames[static_cast<std::size_t>(l.com)]) + "/" +
           std::string(kActNames[static_cast<std::size_t>(l.act)]);
    }
    return s;
  }
};

namespace detail {
template <std::size_t N>
std::size_t index_of(const std::array<std::string_view, N>& names, std::string_view s, const char* what) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == s) return i;
  }
  throw std::invalid_argument(std::string("unknown ") + what + " operator '" + std::string(s) + "'");
}
}  // namespace detail

/// JSON array of per-layer {"mes","agg","com","act"} objects.
inline nlohmann::json genotype_to_json(const Genotype& g) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& l : g.layers) {
    arr.push_back({{"mes", kMesNames[static_cast<std::size_t>(l.mes)]},
                   {"agg", kAggNames[static_cast<std::size_t>(l.agg)]},
                   {"com", kComNames[static_cast<std::size_t>(l.com)]},
                   {"act", kActNames[static_cast<std::size_t>(l.act)]}});
  }
  return arr;
}

inline Genotype genotype_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.empty()) throw std::invalid_argument("genotype JSON must be a non-empty array");
  Genotype g;
  for (const auto& l : j) {
    g.layers.push_back({static_cast<MesOp>(detail::index_of(kMesNames, l.at("mes").get<std::string>(), "mes")),
                        static_cast<AggKind>(detail::index_of(kAggNames, l.at("agg").get<std::string>(), "agg")),
                        static_cast<ComOp>(detail::index_of(kComNames, l.at("com").get<std::string>(), "com")),
                        static_cast<ActOp>(detail::index_of(kActNames, l.at("act").get<std::string>(), "act"))});
  }
  return g;
}

/// A pinned slot value: slot index is layer * 4 + {0 mes, 1 agg, 2 com, 3 act}.
struct SlotPin {
  std::size_t slot = 0;
  std::size_t value = 0;
};

/// Per-slot pins, validated against each other and the slot ranges.
inline std::vector<std::optional<std::size_t>> resolve_pins(std::size_t layers,
                                                            std::span<const SlotPin> pins) {
  std::vector<std::optional<std::size_t>> fixed(layers * kSlotsPerLayer);
  for (const auto& p : pins) {
    if (p.slot >= fixed.size()) throw std::out_of_range("pin slot " + std::to_string(p.slot) + " out of range");
    if (p.value >= kSlotSizes[p.slot % kSlotsPerLayer]) {
      throw std::out_of_range("pin value out of range for slot " + std::to_string(p.slot));
    }
    if (fixed[p.slot] && *fixed[p.slot] != p.value) {
      throw std::invalid_argument("contradictory pins on slot " + std::to_string(p.slot));
    }
    fixed[p.slot] = p.value;
  }
  return fixed;
}

/// Uniform single-path sample; pinned slots keep their value.
inline Genotype sample_path(Rng& rng, std::size_t layers, std::span<const SlotPin> pins = {}) {
  const auto fixed = resolve_pins(layers, pins);
  std::vector<std::size_t> c(fixed.size());
  for (std::size_t s = 0; s < c.size(); ++s) {
    c[s] = fixed[s] ? *fixed[s] : rng.below(kSlotSizes[s % kSlotsPerLayer]);
  }
  return Genotype::from_choices(c);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Shared weights for every operator branch, the predictor and the scope
/// scorer. Relation tables are per layer; ROTATE reads the phase tables.
struct SupernetParams {
  std::size_t dim = 0;
  std::size_t num_layers = 0;
  std::size_t num_classes = 0;  // base relations

  Tensor node_emb;                   // |V| x d
  std::vector<Tensor> rel_emb;       // per layer: (2R+1) x d
  std::vector<Tensor> rel_phase;     // per layer: (2R+1) x d/2
  std::vector<Tensor> com_mlp;       // per layer: d x d, applied to h_u + m_u
  std::vector<Tensor> com_concat;    // per layer: 2d x d, applied to [h_u || m_u]
  Tensor pred;                       // 2d x R
  Tensor scorer_hidden;              // 2d x d
  Tensor scorer_out;                 // d x 1

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; phases in [0, 2pi).
  static SupernetParams init(std::size_t num_nodes, std::size_t num_base_relations, std::size_t dim,
                             std::size_t num_layers, Rng& rng) {
    if (dim == 0 || dim % 2 != 0) throw std::invalid_argument("SupernetParams: dim must be even and positive");
    if (num_layers == 0) throw std::invalid_argument("SupernetParams: need at least one layer");
    if (num_base_relations == 0) throw std::invalid_argument("SupernetParams: need at least one relation");
    auto uniform = [&rng](std::size_t rows, std::size_t cols, std::size_t fan_in) {
      const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::vector<double> v(rows * cols);
      for (auto& x : v) x = rng.uniform(-b, b);
      return Tensor::matrix(rows, cols, std::move(v));
    };
    SupernetParams p;
    p.dim = dim;
    p.num_layers = num_layers;
    p.num_classes = num_base_relations;
    const std::size_t universe = 2 * num_base_relations + 1;
    p.node_emb = uniform(num_nodes, dim, dim);
    for (std::size_t l = 0; l < num_layers; ++l) {
      p.rel_emb.push_back(uniform(universe, dim, dim));
      std::vector<double> ph(universe * dim / 2);
      for (auto& x : ph) x = rng.uniform(0.0, 2.0 * std::numbers::pi);
      p.rel_phase.push_back(Tensor::matrix(universe, dim / 2, std::move(ph)));
      p.com_mlp.push_back(uniform(dim, dim, dim));
      p.com_concat.push_back(uniform(2 * dim, dim, 2 * dim));
    }
    p.pred = uniform(2 * dim, num_base_relations, 2 * dim);
    p.scorer_hidden = uniform(2 * dim, dim, 2 * dim);
    p.scorer_out = uniform(dim, 1, dim);
    return p;
  }

  std::size_t num_nodes() const { return node_emb.rows(); }
  std::size_t num_relations() const { return rel_emb.empty() ? 0 : rel_emb[0].rows(); }

  /// Every tensor in a fixed order; pairs with names().
  std::vector<Tensor*> tensors() { return collect<Tensor*>(*this); }
  std::vector<const Tensor*> tensors() const { return collect<const Tensor*>(*this); }

  std::vector<std::string> names() const {
    std::vector<std::string> n{"node_emb"};
    for (std::size_t l = 0; l < num_layers; ++l) {
      const auto s = std::to_string(l + 1);
      n.push_back("rel_emb." + s);
      n.push_back("rel_phase." + s);
      n.push_back("com_mlp." + s);
      n.push_back("com_concat." + s);
    }
    n.push_back("pred");
    n.push_back("scorer_hidden");
    n.push_back("scorer_out");
    return n;
  }

  /// Copy whose tensors are leaves of tape.
  SupernetParams attach(Tape& tape) const {
    SupernetParams p = *this;
    for (Tensor* t : p.tensors()) *t = tape.variable(*t);
    return p;
  }

  /// Copy with every tensor detached from any tape.
  SupernetParams detached() const {
    SupernetParams p = *this;
    for (Tensor* t : p.tensors()) *t = t->detach();
    return p;
  }

  /// Bitwise equality of all weights.
  bool identical(const SupernetParams& o) const {
    const auto a = tensors();
    const auto b = o.tensors();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i]->shape() != b[i]->shape() || a[i]->vec() != b[i]->vec()) return false;
    }
    return true;
  }

 private:
  template <typename Ptr, typename Self>
  static std::vector<Ptr> collect(Self& self) {
    std::vector<Ptr> t{&self.node_emb};
    for (std::size_t l = 0; l < self.num_layers; ++l) {
      t.push_back(&self.rel_emb[l]);
      t.push_back(&self.rel_phase[l]);
      t.push_back(&self.com_mlp[l]);
      t.push_back(&self.com_concat[l]);
    }
    t.push_back(&self.pred);
    t.push_back(&self.scorer_hidden);
    t.push_back(&self.scorer_out);
    return t;
  }
};

inline nlohmann::json params_to_json(const SupernetParams& p) {
  nlohmann::json j;
  j["dim"] = p.dim;
  j["num_layers"] = p.num_layers;
  j["num_classes"] = p.num_classes;
  nlohmann::json tensors = nlohmann::json::object();
  const auto names = p.names();
  const auto ts = p.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    tensors[names[i]] = {{"shape", ts[i]->shape()}, {"values", ts[i]->vec()}};
  }
  j["tensors"] = std::move(tensors);
  return j;
}

inline SupernetParams params_from_json(const nlohmann::json& j) {
  SupernetParams p;
  p.dim = j.at("dim").get<std::size_t>();
  p.num_layers = j.at("num_layers").get<std::size_t>();
  p.num_classes = j.at("num_classes").get<std::size_t>();
  p.rel_emb.resize(p.num_layers);
  p.rel_phase.resize(p.num_layers);
  p.com_mlp.resize(p.num_layers);
  p.com_concat.resize(p.num_layers);
  const auto names = p.names();
  const auto ts = p.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto& t = j.at("tensors").at(names[i]);
    *ts[i] = Tensor(t.at("shape").get<Shape>(), t.at("values").get<std::vector<double>>());
    if (!ts[i]->all_finite()) throw NumericalError("params: non-finite values in " + names[i]);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Node representations after each layer; h[0] is the embedding table.
struct LayerOutputs {
  std::vector<Tensor> h;

  std::size_t num_layers() const { return h.empty() ? 0 : h.size() - 1; }
  /// Row u of layer l as a vector.
  std::vector<double> row(std::size_t layer, NodeId u) const {
    const Tensor& t = h.at(layer);
    const std::size_t d = t.cols();
    return {t.vec().begin() + static_cast<std::ptrdiff_t>(u * d),
            t.vec().begin() + static_cast<std::ptrdiff_t>((u + 1) * d)};
  }
};

/// Edge arrays of the augmented graph with some base triples (and their
/// inverses) hidden.
struct EdgeIndex {
  std::vector<std::size_t> src, rel, dst;

  static EdgeIndex build(const RelGraph& g, std::span<const Triple> exclude = {}) {
    std::vector<char> keep(g.edges().size(), 1);
    for (const auto& t : exclude) {
      if (t.head >= g.num_nodes() || t.tail >= g.num_nodes() || t.relation >= g.num_base_relations()) {
        continue;
      }
      if (auto e = g.find_edge(t.head, t.relation, t.tail)) keep[*e] = 0;
      if (auto e = g.find_edge(t.tail, g.inverse(t.relation), t.head)) keep[*e] = 0;
    }
    EdgeIndex ix;
    const auto edges = g.edges();
    for (std::size_t i = 0; i < edges.size(); ++i) {
      if (!keep[i]) continue;
      ix.src.push_back(edges[i].src);
      ix.rel.push_back(edges[i].relation);
      ix.dst.push_back(edges[i].dst);
    }
    return ix;
  }
};

inline Tensor message(MesOp op, const Tensor& h_src, const Tensor& h_rel, const Tensor& phase) {
  switch (op) {
    case MesOp::kSub: return sub(h_src, h_rel);
    case MesOp::kMult: return mul(h_src, h_rel);
    case MesOp::kCorr: return circ_corr(h_src, h_rel);
    case MesOp::kRotate: return complex_rotate(h_src, phase);
  }
  throw std::invalid_argument("message: unknown op");
}

inline Tensor activate(ActOp op, const Tensor& x) {
  switch (op) {
    case ActOp::kRelu: return relu(x);
    case ActOp::kTanh: return tanh(x);
    case ActOp::kIdentity: return identity(x);
  }
  throw std::invalid_argument("activate: unknown op");
}

/// Runs the genotype over the graph using precomputed edge arrays.
inline LayerOutputs encode(const RelGraph& graph, const Genotype& genotype, const SupernetParams& params,
                           const EdgeIndex& edges) {
  if (genotype.num_layers() != params.num_layers) {
    throw std::invalid_argument("encode: genotype has " + std::to_string(genotype.num_layers()) +
                                " layers, parameters have " + std::to_string(params.num_layers));
  }
  if (genotype.uses_rotate() && params.dim % 2 != 0) {
    throw ShapeError("encode: ROTATE needs an even dimension");
  }
  if (params.num_nodes() != graph.num_nodes() || params.num_relations() != graph.num_relations()) {
    throw std::invalid_argument("encode: parameter tables do not match graph size");
  }
  LayerOutputs out;
  out.h.push_back(params.node_emb);
  const std::size_t n = graph.num_nodes();
  for (std::size_t l = 0; l < genotype.num_layers(); ++l) {
    const LayerChoice& c = genotype.layers[l];
    const Tensor& h = out.h.back();
    const Tensor h_src = gather_rows(h, edges.src);
    Tensor msg;
    if (c.mes == MesOp::kRotate) {
      msg = complex_rotate(h_src, gather_rows(params.rel_phase[l], edges.rel));
    } else {
      msg = message(c.mes, h_src, gather_rows(params.rel_emb[l], edges.rel), Tensor());
    }
    const Tensor m = segment_aggregate(msg, edges.dst, n, c.agg);
    const Tensor combined = c.com == ComOp::kMlp ? matmul(add(h, m), params.com_mlp[l])
                                                 : matmul(concat({h, m}), params.com_concat[l]);
    out.h.push_back(activate(c.act, combined));
  }
  return out;
}

/// Encodes with the given base triples (and inverses) hidden from propagation.
inline LayerOutputs encode(const RelGraph& graph, const Genotype& genotype, const SupernetParams& params,
                           std::span<const Triple> exclude = {}) {
  return encode(graph, genotype, params, EdgeIndex::build(graph, exclude));
}

/// Interaction logits z · W_pred for one pair (2d) or a batch (B×2d).
inline Tensor predict(const Tensor& z, const SupernetParams& params) {
  if (z.cols() != 2 * params.dim || z.rank() == 0 || z.rank() > 2) {
    throw ShapeError("predict: expected last extent " + std::to_string(2 * params.dim) + ", got " +
                     shape_str(z.shape()));
  }
  return matmul(z, params.pred);
}

enum class TaskType { kMultiClass, kMultiLabel };

inline std::string_view task_name(TaskType t) {
  return t == TaskType::kMultiClass ? "multi_class" : "multi_label";
}
inline TaskType task_from_name(std::string_view s) {
  if (s == "multi_class") return TaskType::kMultiClass;
  if (s == "multi_label") return TaskType::kMultiLabel;
  throw std::invalid_argument("unknown task '" + std::string(s) + "'");
}

/// Multi-class targets are relation ids per row; multi-label targets are a
/// 0/1 matrix with a mask selecting the labelled (positive or sampled
/// negative) entries.
struct TaskTargets {
  TaskType task = TaskType::kMultiClass;
  std::vector<std::size_t> classes;
  std::optional<Tensor> labels;
  std::optional<Tensor> mask;
};

inline Tensor task_loss(const Tensor& logits, const TaskTargets& targets) {
  if (targets.task == TaskType::kMultiClass) return softmax_cross_entropy(logits, targets.classes);
  if (!targets.labels) throw std::invalid_argument("task_loss: multi-label targets need labels");
  for (double y : targets.labels->values()) {
    if (y != 0.0 && y != 1.0) throw std::invalid_argument("task_loss: multi-label labels must be 0 or 1");
  }
  return binary_cross_entropy(logits, *targets.labels, targets.mask);
}

}  // namespace csse

#endif  // CSSE_ENCODER_HPP_
