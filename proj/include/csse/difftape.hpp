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

#ifndef CSSE_DIFFTAPE_HPP_
#define CSSE_DIFFTAPE_HPP_

/// @file difftape.hpp
/// Reverse-mode automatic differentiation over dense row-major tensors.
///
/// Tensors are immutable values. Any operation whose inputs include a tensor
/// recorded on a Tape records its output on the same tape; calling
/// Tape::backward from a scalar root yields gradients for every recorded
/// node. Only the primitives the message-passing encoder, the scope
/// relaxation, and the two task losses need are provided, and there is no
/// broadcasting: every primitive states its exact shape rule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace csse {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Operand shapes violate a primitive's shape rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN or infinity was fed to, or produced by, a computation.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tape;

/// Dense tensor of doubles. Rank 0 is a scalar holding one value.
class Tensor {
 public:
  Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    std::size_t n = 1;
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("Tensor: zero extent in shape " + shape_str(shape_));
      n *= e;
    }
    if (n != values.size()) {
      throw ShapeError("Tensor: shape " + shape_str(shape_) + " needs " + std::to_string(n) +
                       " values, got " + std::to_string(values.size()));
    }
    data_ = std::make_shared<const std::vector<double>>(std::move(values));
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }
  static Tensor zeros(Shape shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor filled(Shape shape, double v) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  /// Leading extent for matrices, 1 for vectors and scalars.
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  /// Trailing extent; 1 for scalars.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  std::span<const double> values() const { return *data_; }
  const std::vector<double>& vec() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ShapeError("Tensor::item on shape " + shape_str(shape_));
    return (*data_)[0];
  }

  bool on_tape() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }

  /// Same values, no tape association.
  Tensor detach() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = 0;
    return t;
  }

  bool all_finite() const {
    return std::all_of(data_->begin(), data_->end(), [](double x) { return std::isfinite(x); });
  }

  std::shared_ptr<const std::vector<double>> storage() const { return data_; }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

enum class OpKind {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kMatMul,
  kConcat,
  kRelu,
  kTanh,
  kIdentity,
  kSigmoid,
  kSoftmaxCrossEntropy,
  kBinaryCrossEntropy,
  kCircCorr,
  kComplexRotate,
  kSegmentAggregate,
  kGatherRows,
  kSliceCols,
  kScaleRows,
  kSum,
  kScale,
  kAddScalar,
  kSoftplus,
  kLog,
  kSoftmaxRows,
};

/// Receives the output gradient and one accumulation buffer per input;
/// buffers are null for inputs that are not on the tape.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<std::vector<double>*> grad_in)>;

/// Per-node gradients produced by Tape::backward.
class Gradients {
 public:
  Gradients() = default;
  Gradients(const Tape* tape, std::vector<std::vector<double>> grads)
      : tape_(tape), grads_(std::move(grads)) {}

  /// Gradient with respect to t; zeros if t did not influence the root.
  Tensor of(const Tensor& t) const {
    if (t.tape() == tape_ && t.node() < grads_.size() && !grads_[t.node()].empty()) {
      return Tensor(t.shape(), grads_[t.node()]);
    }
    return Tensor::zeros(t.shape());
  }

  /// True when the root depends on t through at least one recorded op.
  bool reached(const Tensor& t) const {
    return t.tape() == tape_ && t.node() < grads_.size() && !grads_[t.node()].empty();
  }

 private:
  const Tape* tape_ = nullptr;
  std::vector<std::vector<double>> grads_;
};

/// Append-only record of operations. Single writer; node ids are
/// topologically ordered because every input exists before its consumer.
class Tape {
 public:
  static constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers value as a differentiable leaf.
  Tensor variable(const Tensor& value) {
    if (!value.all_finite()) throw NumericalError("Tape::variable: non-finite value");
    Tensor t = value.detach();
    t.tape_ = this;
    t.node_ = nodes_.size();
    nodes_.push_back(Node{OpKind::kLeaf, {}, t.shape(), {}});
    return t;
  }

  /// Builds the output tensor and records it on the inputs' tape, if any.
  static Tensor emit(OpKind kind, const std::vector<const Tensor*>& inputs, Shape shape,
                     std::vector<double> values, BackwardFn backward) {
    Tape* tape = nullptr;
    for (const Tensor* in : inputs) {
      if (!in->on_tape()) continue;
      if (tape != nullptr && tape != in->tape()) {
        throw std::invalid_argument("Tape::emit: inputs belong to different tapes");
      }
      tape = in->tape();
    }
    Tensor out(std::move(shape), std::move(values));
    if (tape == nullptr) return out;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Tensor* in : inputs) ids.push_back(in->on_tape() ? in->node() : kNoNode);
    out.tape_ = tape;
    out.node_ = tape->nodes_.size();
    tape->nodes_.push_back(Node{kind, std::move(ids), out.shape(), std::move(backward)});
    return out;
  }

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

  /// Reverse sweep from a scalar root. The root's own gradient is 1.
  Gradients backward(const Tensor& root) const {
    if (root.tape() != this) throw std::invalid_argument("Tape::backward: root is not on this tape");
    if (root.size() != 1) {
      throw ShapeError("Tape::backward: root must be scalar, got " + shape_str(root.shape()));
    }
    std::vector<std::vector<double>> grads(nodes_.size());
    grads[root.node()] = {1.0};
    std::vector<std::vector<double>*> slots;
    for (std::size_t id = root.node() + 1; id-- > 0;) {
      const Node& n = nodes_[id];
      if (grads[id].empty() || n.inputs.empty()) continue;
      slots.assign(n.inputs.size(), nullptr);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t in = n.inputs[k];
        if (in == kNoNode) continue;
        if (grads[in].empty()) grads[in].assign(numel(nodes_[in].shape), 0.0);
        slots[k] = &grads[in];
      }
      n.backward(grads[id], slots);
    }
    return Gradients(this, std::move(grads));
  }

 private:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Shape shape;
    BackwardFn backward;
  };

  static std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
  }

  std::vector<Node> nodes_;
};

namespace detail {

inline void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericalError(std::string(op) + ": non-finite input");
}

inline void require_finite_output(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericalError(std::string(op) + ": non-finite output");
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline void require_rank(const Tensor& a, std::size_t lo, std::size_t hi, const char* op) {
  if (a.rank() < lo || a.rank() > hi) {
    throw ShapeError(std::string(op) + ": unsupported rank for shape " + shape_str(a.shape()));
  }
}


template <typename F, typename G>
Tensor unary(OpKind kind, const Tensor& a, const char* name, F f, G df) {
  require_finite(a, name);
  std::vector<double> out(a.size());
  const auto& x = a.vec();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  require_finite_output(out, name);
  if (!a.on_tape()) return Tensor(a.shape(), std::move(out));
  auto xs = a.storage();
  auto ys = std::make_shared<const std::vector<double>>(out);
  return Tape::emit(kind, {&a}, a.shape(), std::move(out),
                    [xs, ys, df](std::span<const double> g, std::span<std::vector<double>*> gin) {
                      auto& ga = *gin[0];
                      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df((*xs)[i], (*ys)[i]);
                    });
}

inline bool any_on_tape(std::initializer_list<const Tensor*> ts) {
  return std::any_of(ts.begin(), ts.end(), [](const Tensor* t) { return t->on_tape(); });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops. Binary operands must have identical shapes.
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  detail::require_finite(a, "add");
  detail::require_finite(b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  detail::require_finite_output(out, "add");
  return Tape::emit(OpKind::kAdd, {&a, &b}, a.shape(), std::move(out),
                    [](std::span<const double> g, std::span<std::vector<double>*> gin) {
                      for (auto* gi : gin) {
                        if (!gi) continue;
                        for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
                      }
                    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  detail::require_finite(a, "sub");
  detail::require_finite(b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  detail::require_finite_output(out, "sub");
  return Tape::emit(OpKind::kSub, {&a, &b}, a.shape(), std::move(out),
                    [](std::span<const double> g, std::span<std::vector<double>*> gin) {
                      if (gin[0]) {
                        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                      }
                      if (gin[1]) {
                        for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
                      }
                    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  detail::require_finite(a, "mul");
  detail::require_finite(b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  detail::require_finite_output(out, "mul");
  auto as = a.storage();
  auto bs = b.storage();
  return Tape::emit(OpKind::kMul, {&a, &b}, a.shape(), std::move(out),
                    [as, bs](std::span<const double> g, std::span<std::vector<double>*> gin) {
                      if (gin[0]) {
                        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * (*bs)[i];
                      }
                      if (gin[1]) {
                        for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * (*as)[i];
                      }
                    });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      OpKind::kRelu, a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      OpKind::kTanh, a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor identity(const Tensor& a) {
  return detail::unary(
      OpKind::kIdentity, a, "identity", [](double x) { return x; }, [](double, double) { return 1.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      OpKind::kSigmoid, a, "sigmoid",
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

/// log(1 + exp(x)), computed without overflow.
inline Tensor softplus(const Tensor& a) {
  return detail::unary(
      OpKind::kSoftplus, a, "softplus",
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

/// Natural log; every input must be strictly positive.
inline Tensor log(const Tensor& a) {
  for (double x : a.values()) {
    if (!(x > 0.0)) throw std::domain_error("log: non-positive input");
  }
  return detail::unary(
      OpKind::kLog, a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary(
      OpKind::kScale, a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary(
      OpKind::kAddScalar, a, "add_scalar", [c](double x) { return x + c; },
      [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout.
// ---------------------------------------------------------------------------

/// (n×k)·(k×m) → n×m, or (k)·(k×m) → m.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 1, 2, "matmul");
  detail::require_rank(b, 2, 2, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  detail::require_finite(a, "matmul");
  detail::require_finite(b, "matmul");
  std::vector<double> out(n * m, 0.0);
  const double* A = a.vec().data();
  const double* B = b.vec().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = B + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += aip * brow[j];
    }
  }
  detail::require_finite_output(out, "matmul");
  Shape shape = a.rank() == 1 ? Shape{m} : Shape{n, m};
  auto as = a.storage();
  auto bs = b.storage();
  return Tape::emit(
      OpKind::kMatMul, {&a, &b}, std::move(shape), std::move(out),
      [as, bs, n, k, m](std::span<const double> g, std::span<std::vector<double>*> gin) {
        const double* A = as->data();
        const double* B = bs->data();
        if (gin[0]) {
          double* ga = gin[0]->data();
          for (std::size_t i = 0; i < n; ++i) {
            const double* grow = g.data() + i * m;
            for (std::size_t p = 0; p < k; ++p) {
              const double* brow = B + p * m;
              double acc = 0.0;
              for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
              ga[i * k + p] += acc;
            }
          }
        }
        if (gin[1]) {
          double* gb = gin[1]->data();
          for (std::size_t i = 0; i < n; ++i) {
            const double* grow = g.data() + i * m;
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = A[i * k + p];
              if (aip == 0.0) continue;
              double* gbrow = gb + p * m;
              for (std::size_t j = 0; j < m; ++j) gbrow[j] += aip * grow[j];
            }
          }
        }
      });
}

/// Concatenation along the last axis. Vectors join end to end; matrices
/// must agree in row count.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t rank = parts[0].rank();
  if (rank != 1 && rank != 2) throw ShapeError("concat: rank must be 1 or 2");
  const std::size_t rows = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank || p.rows() != rows) {
      throw ShapeError("concat: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                       shape_str(p.shape()));
    }
    detail::require_finite(p, "concat");
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t t = 0; t < parts.size(); ++t) {
    const auto& v = parts[t].vec();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data() + r * widths[t], widths[t], out.data() + r * total + offset);
    }
    offset += widths[t];
  }
  std::vector<const Tensor*> ins;
  for (const auto& p : parts) ins.push_back(&p);
  Shape shape = rank == 1 ? Shape{total} : Shape{rows, total};
  return Tape::emit(OpKind::kConcat, ins, std::move(shape), std::move(out),
                    [widths, rows, total](std::span<const double> g,
                                          std::span<std::vector<double>*> gin) {
                      std::size_t offset = 0;
                      for (std::size_t t = 0; t < widths.size(); ++t) {
                        if (gin[t]) {
                          auto& gt = *gin[t];
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t c = 0; c < widths[t]; ++c) {
                              gt[r * widths[t] + c] += g[r * total + offset + c];
                            }
                          }
                        }
                        offset += widths[t];
                      }
                    });
}

/// Rows of a matrix selected by index (repeats allowed): (n×d) → (m×d).
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  detail::require_rank(x, 2, 2, "gather_rows");
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> out(index.size() * d);
  const double* X = x.vec().data();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= n) {
      throw std::out_of_range("gather_rows: index " + std::to_string(index[r]) + " >= " +
                              std::to_string(n));
    }
    std::copy_n(X + index[r] * d, d, out.data() + r * d);
  }
  if (!x.on_tape()) return Tensor({index.size(), d}, std::move(out));
  auto idx = std::make_shared<const std::vector<std::size_t>>(index.begin(), index.end());
  return Tape::emit(OpKind::kGatherRows, {&x}, {index.size(), d}, std::move(out),
                    [idx, d](std::span<const double> g, std::span<std::vector<double>*> gin) {
                      double* gx = gin[0]->data();
                      for (std::size_t r = 0; r < idx->size(); ++r) {
                        double* dst = gx + (*idx)[r] * d;
                        const double* src = g.data() + r * d;
                        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                      }
                    });
}

/// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 2, 2, "slice_cols");
  const std::size_t n = x.rows(), k = x.cols();
  if (begin >= end || end > k) {
    throw ShapeError("slice_cols: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") for " + shape_str(x.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<double> out(n * w);
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(x.vec().data() + r * k + begin, w, out.data() + r * w);
  }
  return Tape::emit(OpKind::kSliceCols, {&x}, {n, w}, std::move(out),
                    [n, k, w, begin](std::span<const double> g, std::span<std::vector<double>*> gin) {
                      if (!gin[0]) return;
                      for (std::size_t r = 0; r < n; ++r) {
                        for (std::size_t c = 0; c < w; ++c) (*gin[0])[r * k + begin + c] += g[r * w + c];
                      }
                    });
}

/// Multiplies row r of x (n×k) by the scalar w[r] of w (n×1).
inline Tensor scale_rows(const Tensor& x, const Tensor& w) {
  detail::require_rank(x, 2, 2, "scale_rows");
  if (w.rank() != 2 || w.cols() != 1 || w.rows() != x.rows()) {
    throw ShapeError("scale_rows: weights " + shape_str(w.shape()) + " do not match " +
                     shape_str(x.shape()));
  }
  detail::require_finite(x, "scale_rows");
  detail::require_finite(w, "scale_rows");
  const std::size_t n = x.rows(), k = x.cols();
  std::vector<double> out(n * k);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < k; ++c) out[r * k + c] = w[r] * x[r * k + c];
  }
  detail::require_finite_output(out, "scale_rows");
  auto xs = x.storage();
  auto ws = w.storage();
  return Tape::emit(OpKind::kScaleRows, {&x, &w}, x.shape(), std::move(out),
                    [xs, ws, n, k](std::span<const double> g, std::span<std::vector<double>*> gin) {
                      for (std::size_t r = 0; r < n; ++r) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < k; ++c) {
                          if (gin[0]) (*gin[0])[r * k + c] += g[r * k + c] * (*ws)[r];
                          acc += g[r * k + c] * (*xs)[r * k + c];
                        }
                        if (gin[1]) (*gin[1])[r] += acc;
                      }
                    });
}

/// Sum of all entries, as a scalar.
inline Tensor sum(const Tensor& x) {
  detail::require_finite(x, "sum");
  double s = 0.0;
  for (double v : x.values()) s += v;
  const std::size_t n = x.size();
  return Tape::emit(OpKind::kSum, {&x}, {}, {s},
                    [n](std::span<const double> g, std::span<std::vector<double>*> gin) {
                      if (!gin[0]) return;
                      for (std::size_t i = 0; i < n; ++i) (*gin[0])[i] += g[0];
                    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Row-wise softmax; a vector is treated as a single row.
inline Tensor softmax_rows(const Tensor& x) {
  detail::require_rank(x, 1, 2, "softmax_rows");
  detail::require_finite(x, "softmax_rows");
  const std::size_t n = x.rows(), k = x.cols();
  std::vector<double> out(n * k);
  for (std::size_t r = 0; r < n; ++r) {
    const double* in = x.vec().data() + r * k;
    double* o = out.data() + r * k;
    const double mx = *std::max_element(in, in + k);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < k; ++c) o[c] /= z;
  }
  auto ys = std::make_shared<const std::vector<double>>(out);
  return Tape::emit(OpKind::kSoftmaxRows, {&x}, x.shape(), std::move(out),
                    [ys, n, k](std::span<const double> g, std::span<std::vector<double>*> gin) {
                      if (!gin[0]) return;
                      for (std::size_t r = 0; r < n; ++r) {
                        const double* y = ys->data() + r * k;
                        const double* gr = g.data() + r * k;
                        double dot = 0.0;
                        for (std::size_t c = 0; c < k; ++c) dot += gr[c] * y[c];
                        for (std::size_t c = 0; c < k; ++c) (*gin[0])[r * k + c] += y[c] * (gr[c] - dot);
                      }
                    });
}

// ---------------------------------------------------------------------------
// Relational operators.
// ---------------------------------------------------------------------------

/// Circular correlation, row-wise for matrices:
///   out[k] = sum_i a[i] * b[(i + k) mod d].
/// Direct O(d^2) evaluation in both directions.
inline Tensor circ_corr(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 1, 2, "circ_corr");
  detail::require_same_shape(a, b, "circ_corr");
  detail::require_finite(a, "circ_corr");
  detail::require_finite(b, "circ_corr");
  const std::size_t n = a.rows(), d = a.cols();
  std::vector<double> out(n * d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const double* A = a.vec().data() + r * d;
    const double* B = b.vec().data() + r * d;
    double* o = out.data() + r * d;
    for (std::size_t k = 0; k < d; ++k) {
      double acc = 0.0;
      std::size_t j = k;
      for (std::size_t i = 0; i < d; ++i) {
        acc += A[i] * B[j];
        if (++j == d) j = 0;
      }
      o[k] = acc;
    }
  }
  detail::require_finite_output(out, "circ_corr");
  auto as = a.storage();
  auto bs = b.storage();
  return Tape::emit(
      OpKind::kCircCorr, {&a, &b}, a.shape(), std::move(out),
      [as, bs, n, d](std::span<const double> g, std::span<std::vector<double>*> gin) {
        for (std::size_t r = 0; r < n; ++r) {
          const double* A = as->data() + r * d;
          const double* B = bs->data() + r * d;
          const double* G = g.data() + r * d;
          // da[i] = sum_k g[k] b[(i+k) mod d];  db[j] = sum_k g[k] a[(j-k) mod d]
          if (gin[0]) {
            double* ga = gin[0]->data() + r * d;
            for (std::size_t i = 0; i < d; ++i) {
              double acc = 0.0;
              std::size_t j = i;
              for (std::size_t k = 0; k < d; ++k) {
                acc += G[k] * B[j];
                if (++j == d) j = 0;
              }
              ga[i] += acc;
            }
          }
          if (gin[1]) {
            double* gb = gin[1]->data() + r * d;
            for (std::size_t j = 0; j < d; ++j) {
              double acc = 0.0;
              std::size_t i = j;
              for (std::size_t k = 0; k < d; ++k) {
                acc += G[k] * A[i];
                i = (i == 0) ? d - 1 : i - 1;
              }
              gb[j] += acc;
            }
          }
        }
      });
}

/// Treats consecutive pairs (h[2k], h[2k+1]) as complex numbers and rotates
/// each by phases[k] radians. Row-wise for matrices: h (n×d), phases (n×d/2).
inline Tensor complex_rotate(const Tensor& h, const Tensor& phases) {
  detail::require_rank(h, 1, 2, "complex_rotate");
  const std::size_t n = h.rows(), d = h.cols();
  if (d % 2 != 0) throw ShapeError("complex_rotate: odd dimension " + shape_str(h.shape()));
  if (phases.rank() != h.rank() || phases.rows() != n || phases.cols() * 2 != d) {
    throw ShapeError("complex_rotate: phases " + shape_str(phases.shape()) + " do not match " +
                     shape_str(h.shape()));
  }
  detail::require_finite(h, "complex_rotate");
  detail::require_finite(phases, "complex_rotate");
  const std::size_t half = d / 2;
  std::vector<double> out(n * d);
  std::vector<double> cs(n * half), sn(n * half);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < half; ++k) {
      const double th = phases[r * half + k];
      const double c = std::cos(th), s = std::sin(th);
      cs[r * half + k] = c;
      sn[r * half + k] = s;
      const double x = h[r * d + 2 * k], y = h[r * d + 2 * k + 1];
      out[r * d + 2 * k] = x * c - y * s;
      out[r * d + 2 * k + 1] = x * s + y * c;
    }
  }
  auto ys = std::make_shared<const std::vector<double>>(out);
  auto css = std::make_shared<const std::vector<double>>(std::move(cs));
  auto sns = std::make_shared<const std::vector<double>>(std::move(sn));
  return Tape::emit(OpKind::kComplexRotate, {&h, &phases}, h.shape(), std::move(out),
                    [ys, css, sns, n, d, half](std::span<const double> g,
                                               std::span<std::vector<double>*> gin) {
                      for (std::size_t r = 0; r < n; ++r) {
                        for (std::size_t k = 0; k < half; ++k) {
                          const std::size_t i = r * d + 2 * k;
                          const double c = (*css)[r * half + k], s = (*sns)[r * half + k];
                          const double gx = g[i], gy = g[i + 1];
                          if (gin[0]) {
                            (*gin[0])[i] += gx * c + gy * s;
                            (*gin[0])[i + 1] += -gx * s + gy * c;
                          }
                          if (gin[1]) (*gin[1])[r * half + k] += -gx * (*ys)[i + 1] + gy * (*ys)[i];
                        }
                      }
                    });
}

enum class AggKind { kSum, kMax, kMean };

/// Reduces message rows into num_segments output rows by target index.
/// Empty segments produce the zero row for every kind. MAX routes gradient
/// to the lowest-index row attaining the maximum.
inline Tensor segment_aggregate(const Tensor& messages, std::span<const std::size_t> targets,
                                std::size_t num_segments, AggKind kind) {
  detail::require_rank(messages, 2, 2, "segment_aggregate");
  const std::size_t n = messages.rows(), d = messages.cols();
  if (targets.size() != n) {
    throw ShapeError("segment_aggregate: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " messages");
  }
  if (num_segments == 0) throw ShapeError("segment_aggregate: zero segments");
  for (std::size_t t : targets) {
    if (t >= num_segments) {
      throw std::out_of_range("segment_aggregate: target " + std::to_string(t) + " >= " +
                              std::to_string(num_segments));
    }
  }
  detail::require_finite(messages, "segment_aggregate");
  const double* M = messages.vec().data();
  std::vector<double> out(num_segments * d, 0.0);
  std::vector<std::size_t> count(num_segments, 0);
  for (std::size_t t : targets) ++count[t];
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  switch (kind) {
    case AggKind::kSum:
    case AggKind::kMean:
      for (std::size_t e = 0; e < n; ++e) {
        double* o = out.data() + targets[e] * d;
        const double* m = M + e * d;
        for (std::size_t c = 0; c < d; ++c) o[c] += m[c];
      }
      if (kind == AggKind::kMean) {
        for (std::size_t s = 0; s < num_segments; ++s) {
          if (count[s] == 0) continue;
          const double inv = 1.0 / static_cast<double>(count[s]);
          for (std::size_t c = 0; c < d; ++c) out[s * d + c] *= inv;
        }
      }
      break;
    case AggKind::kMax: {
      constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
      argmax->assign(num_segments * d, kNone);
      for (std::size_t e = 0; e < n; ++e) {
        const std::size_t s = targets[e];
        const double* m = M + e * d;
        for (std::size_t c = 0; c < d; ++c) {
          std::size_t& am = (*argmax)[s * d + c];
          if (am == kNone || m[c] > out[s * d + c]) {
            out[s * d + c] = m[c];
            am = e;
          }
        }
      }
      break;
    }
  }
  if (!messages.on_tape()) return Tensor({num_segments, d}, std::move(out));
  auto tg = std::make_shared<const std::vector<std::size_t>>(targets.begin(), targets.end());
  auto cnt = std::make_shared<const std::vector<std::size_t>>(std::move(count));
  return Tape::emit(
      OpKind::kSegmentAggregate, {&messages}, {num_segments, d}, std::move(out),
      [tg, cnt, argmax, kind, n, d](std::span<const double> g, std::span<std::vector<double>*> gin) {
        double* gm = gin[0]->data();
        if (kind == AggKind::kMax) {
          for (std::size_t i = 0; i < argmax->size(); ++i) {
            const std::size_t e = (*argmax)[i];
            if (e == std::numeric_limits<std::size_t>::max()) continue;
            gm[e * d + i % d] += g[i];
          }
          return;
        }
        for (std::size_t e = 0; e < n; ++e) {
          const std::size_t s = (*tg)[e];
          const double w = kind == AggKind::kMean ? 1.0 / static_cast<double>((*cnt)[s]) : 1.0;
          for (std::size_t c = 0; c < d; ++c) gm[e * d + c] += w * g[s * d + c];
        }
      });
}

// ---------------------------------------------------------------------------
// Losses. Both return the mean over contributing entries as a scalar.
// ---------------------------------------------------------------------------

/// Mean negative log-softmax of the target class, rows of logits (n×C) or a
/// single vector (C).
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  detail::require_rank(logits, 1, 2, "softmax_cross_entropy");
  detail::require_finite(logits, "softmax_cross_entropy");
  const std::size_t n = logits.rows(), k = logits.cols();
  if (targets.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(n) + " rows");
  }
  auto probs = std::make_shared<std::vector<double>>(n * k);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= k) {
      throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(targets[r]) +
                              " >= " + std::to_string(k));
    }
    const double* x = logits.vec().data() + r * k;
    const double mx = *std::max_element(x, x + k);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(x[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < k; ++c) (*probs)[r * k + c] = std::exp(x[c] - lse);
    loss += lse - x[targets[r]];
  }
  loss /= static_cast<double>(n);
  if (!std::isfinite(loss)) throw NumericalError("softmax_cross_entropy: non-finite loss");
  auto tg = std::make_shared<const std::vector<std::size_t>>(targets.begin(), targets.end());
  return Tape::emit(OpKind::kSoftmaxCrossEntropy, {&logits}, {}, {loss},
                    [probs, tg, n, k](std::span<const double> g, std::span<std::vector<double>*> gin) {
                      if (!gin[0]) return;
                      const double w = g[0] / static_cast<double>(n);
                      for (std::size_t r = 0; r < n; ++r) {
                        for (std::size_t c = 0; c < k; ++c) {
                          const double y = c == (*tg)[r] ? 1.0 : 0.0;
                          (*gin[0])[r * k + c] += w * ((*probs)[r * k + c] - y);
                        }
                      }
                    });
}

/// Mean binary cross-entropy on logits against labels in [0, 1]. When a
/// mask is given, only entries with a nonzero mask contribute.
inline Tensor binary_cross_entropy(const Tensor& logits, const Tensor& labels,
                                   const std::optional<Tensor>& mask = std::nullopt) {
  detail::require_same_shape(logits, labels, "binary_cross_entropy");
  if (mask) detail::require_same_shape(logits, *mask, "binary_cross_entropy");
  detail::require_finite(logits, "binary_cross_entropy");
  detail::require_finite(labels, "binary_cross_entropy");
  const std::size_t n = logits.size();
  auto weight = std::make_shared<std::vector<double>>(n, 1.0);
  if (mask) {
    for (std::size_t i = 0; i < n; ++i) (*weight)[i] = (*mask)[i] != 0.0 ? 1.0 : 0.0;
  }
  const double count = std::accumulate(weight->begin(), weight->end(), 0.0);
  if (count == 0.0) throw std::invalid_argument("binary_cross_entropy: empty mask");
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if ((*weight)[i] == 0.0) continue;
    const double x = logits[i], y = labels[i];
    if (y < 0.0 || y > 1.0) throw std::out_of_range("binary_cross_entropy: label outside [0,1]");
    loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  loss /= count;
  auto xs = logits.storage();
  auto ys = labels.storage();
  return Tape::emit(OpKind::kBinaryCrossEntropy, {&logits}, {}, {loss},
                    [xs, ys, weight, count, n](std::span<const double> g,
                                               std::span<std::vector<double>*> gin) {
                      if (!gin[0]) return;
                      for (std::size_t i = 0; i < n; ++i) {
                        if ((*weight)[i] == 0.0) continue;
                        const double x = (*xs)[i];
                        const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                                  : std::exp(x) / (1.0 + std::exp(x));
                        (*gin[0])[i] += g[0] * (s - (*ys)[i]) / count;
                      }
                    });
}

// ---------------------------------------------------------------------------
// Dispatch by kind for the core primitive set.
// ---------------------------------------------------------------------------

enum class Primitive {
  kAdd,
  kSub,
  kMul,
  kMatMul,
  kConcat,
  kRelu,
  kTanh,
  kIdentity,
  kSigmoid,
  kSoftmaxCrossEntropy,
  kBinaryCrossEntropy,
};

/// Applies one core primitive. Arity: add/sub/mul/matmul take two inputs,
/// concat one or more, activations one. softmax_cross_entropy takes logits
/// and a tensor of class ids; binary_cross_entropy takes logits, labels and
/// an optional mask.
inline Tensor apply_primitive(Primitive kind, const std::vector<Tensor>& in) {
  auto arity = [&](std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi) {
      throw ShapeError("apply_primitive: expected " + std::to_string(lo) + ".." + std::to_string(hi) +
                       " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (kind) {
    case Primitive::kAdd: arity(2, 2); return add(in[0], in[1]);
    case Primitive::kSub: arity(2, 2); return sub(in[0], in[1]);
    case Primitive::kMul: arity(2, 2); return mul(in[0], in[1]);
    case Primitive::kMatMul: arity(2, 2); return matmul(in[0], in[1]);
    case Primitive::kConcat: arity(1, std::numeric_limits<std::size_t>::max()); return concat(in);
    case Primitive::kRelu: arity(1, 1); return relu(in[0]);
    case Primitive::kTanh: arity(1, 1); return tanh(in[0]);
    case Primitive::kIdentity: arity(1, 1); return identity(in[0]);
    case Primitive::kSigmoid: arity(1, 1); return sigmoid(in[0]);
    case Primitive::kSoftmaxCrossEntropy: {
      arity(2, 2);
      std::vector<std::size_t> ids;
      for (double v : in[1].values()) {
        if (v < 0.0 || v != std::floor(v)) throw std::invalid_argument("class id must be a non-negative integer");
        ids.push_back(static_cast<std::size_t>(v));
      }
      return softmax_cross_entropy(in[0], ids);
    }
    case Primitive::kBinaryCrossEntropy:
      arity(2, 3);
      return binary_cross_entropy(in[0], in[1],
                                  in.size() == 3 ? std::optional<Tensor>(in[2]) : std::nullopt);
  }
  throw std::invalid_argument("apply_primitive: unknown kind");
}

// ---------------------------------------------------------------------------
// Verification and optimization.
// ---------------------------------------------------------------------------

/// A scalar-valued function of tensors; must be deterministic.
using TensorFunction = std::function<Tensor(const std::vector<Tensor>&)>;

/// Max over all coordinates of |analytic - central difference| / max(1, |analytic|).
inline double finite_diff_check(const TensorFunction& fn, const std::vector<Tensor>& params,
                                double eps = 1e-5) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");
  Tape tape;
  std::vector<Tensor> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.variable(p));
  const Tensor root = fn(vars);
  if (root.size() != 1) throw ShapeError("finite_diff_check: function must return a scalar");
  Gradients grads;
  if (root.on_tape()) grads = tape.backward(root);

  auto eval = [&](std::size_t which, std::size_t coord, double delta) {
    std::vector<Tensor> shifted(params.begin(), params.end());
    std::vector<double> v = params[which].vec();
    v[coord] += delta;
    shifted[which] = Tensor(params[which].shape(), std::move(v));
    return fn(shifted).item();
  };

  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor analytic = grads.of(vars[p]);
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double numeric = (eval(p, i, eps) - eval(p, i, -eps)) / (2.0 * eps);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

/// Adaptive-moment optimizer state with decoupled weight decay.
struct OptimState {
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  /// Updates applied to each parameter; drives its bias correction.
  std::vector<std::size_t> param_steps;
};

/// One update over params in place. Parameters whose gradient is absent are
/// skipped entirely, so branches outside the sampled path keep their state.
inline void adam_step(std::vector<Tensor>& params, const std::vector<std::optional<Tensor>>& grads,
                      OptimState& state) {
  if (grads.size() != params.size()) {
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0);
      state.second_moment.emplace_back(p.size(), 0.0);
    }
    state.param_steps.assign(params.size(), 0);
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (grads[p] && grads[p]->shape() != params[p].shape()) {
      throw ShapeError("adam_step: gradient " + shape_str(grads[p]->shape()) + " for parameter " +
                       shape_str(params[p].shape()));
    }
    if (state.first_moment[p].size() != params[p].size()) {
      throw ShapeError("adam_step: moment size mismatch for parameter " + shape_str(params[p].shape()));
    }
  }
  ++state.step;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!grads[p]) continue;
    const std::size_t t = ++state.param_steps[p];
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    std::vector<double> w = params[p].vec();
    const auto& g = grads[p]->vec();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= state.learning_rate * (mhat / (std::sqrt(vhat) + state.epsilon) + state.weight_decay * w[i]);
    }
    params[p] = Tensor(params[p].shape(), std::move(w));
  }
}

}  // namespace csse

#endif  // CSSE_DIFFTAPE_HPP_
