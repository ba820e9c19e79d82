#pragma once

// Dense float64 tensors with a reverse-mode gradient tape.
//
// A Tensor is a plain value (shape + row-major data). Differentiable
// computations are recorded on a Tape through Var handles; every op below
// appends one node whose parents always precede it, so a single reverse sweep
// over the node list is a valid topological backward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sibling/error.hpp"

namespace sibling {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class Tensor {
 public:
  /// Rank-0 scalar holding 0.
  Tensor() : data_(1, 0.0) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_numel(shape_), 0.0);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_numel(shape_) != data_.size()) {
      throw Error(ErrorCode::kShape, "tensor: shape " + shape_str(shape_) +
                                         " does not match data length " +
                                         std::to_string(data_.size()));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }
  static Tensor filled(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double item() const {
    if (data_.size() != 1) {
      throw Error(ErrorCode::kShape,
                  "item: tensor of shape " + shape_str(shape_) +
                      " is not a scalar");
    }
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) {
        throw Error(ErrorCode::kShape,
                    "tensor: zero extent in shape " + shape_str(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Largest absolute entry.
inline double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatMul,
  kRelu,
  kSigmoid,
  kL2Normalize,
  kDot,
  kSum,
  kMean,
  kBceWithLogits,
  kSoftmaxCrossEntropy,
  kReshape,
};

/// Append-only record of a computation. Single-threaded; give each worker its
/// own tape. Borrowed constants must outlive the tape.
class Tape {
 public:
  struct Node {
    OpKind op = OpKind::kLeaf;
    std::size_t parents[2] = {0, 0};
    std::uint8_t n_parents = 0;
    bool needs_grad = false;
    bool broadcast = false;
    double scalar = 0.0;
    const Tensor* borrowed = nullptr;
    Tensor own;
    Tensor aux;
    std::vector<std::size_t> labels;

    const Tensor& value() const { return borrowed ? *borrowed : own; }
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value) {
    Node n;
    n.op = OpKind::kLeaf;
    n.needs_grad = true;
    n.own = std::move(value);
    return push(std::move(n));
  }

  Var constant(Tensor value) {
    Node n;
    n.op = OpKind::kConstant;
    n.own = std::move(value);
    return push(std::move(n));
  }

  /// Constant that references caller-owned storage instead of copying it.
  Var borrow(const Tensor& value) {
    Node n;
    n.op = OpKind::kConstant;
    n.borrowed = &value;
    return push(std::move(n));
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id()).value(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    grads_.clear();
  }

  /// Gradient of the last backward root w.r.t. `v`; zeros if unreachable.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id());
    if (v.id() < grads_.size() && grads_[v.id()].has_value) {
      return grads_[v.id()].g;
    }
    return Tensor(n.value().shape());
  }

  inline void backward(Var root);

  /// Low-level: appends a computed node. Used by the op functions below.
  Var record(OpKind op, std::initializer_list<Var> parents, Tensor value) {
    Node n;
    n.op = op;
    std::uint8_t k = 0;
    for (Var p : parents) {
      if (&p.tape() != this) {
        throw Error(ErrorCode::kArgument, "tape: operand from another tape");
      }
      n.parents[k++] = p.id();
      n.needs_grad = n.needs_grad || nodes_[p.id()].needs_grad;
    }
    n.n_parents = k;
    n.own = std::move(value);
    return push(std::move(n));
  }

  Node& mutable_node(Var v) { return nodes_.at(v.id()); }

 private:
  struct GradSlot {
    bool has_value = false;
    Tensor g;
  };

  Var push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  GradSlot& slot_for(std::size_t id) {
    GradSlot& s = grads_[id];
    if (!s.has_value) {
      s.g = Tensor(nodes_[id].value().shape());
      s.has_value = true;
    }
    return s;
  }

  void accumulate(std::size_t id, std::span<const double> g) {
    if (!nodes_[id].needs_grad) return;
    auto dst = slot_for(id).g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }

  inline void backward_node(std::size_t id);

  std::vector<Node> nodes_;
  std::vector<GradSlot> grads_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

// ---------------------------------------------------------------------------
// Forward ops

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a,
                               const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::kShape, std::string(op) + ": shape mismatch " +
                                       shape_str(a.shape()) + " vs " +
                                       shape_str(b.shape()));
  }
}

inline void require_same_tape(const char* op, Var a, Var b) {
  if (&a.tape() != &b.tape()) {
    throw Error(ErrorCode::kArgument,
                std::string(op) + ": operands live on different tapes");
  }
}

inline std::size_t last_extent(const Tensor& t) {
  return t.rank() == 0 ? 1 : t.shape().back();
}

}  // namespace detail

inline constexpr double kNormFloor = 1e-12;

/// Elementwise sum. `b` may also be a row vector ([n] or [1,n]) broadcast over
/// the rows of a rank-2 `a`.
inline Var add(Var a, Var b) {
  detail::require_same_tape("add", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor out = av;
    auto o = out.data();
    auto bd = bv.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
    return a.tape().record(OpKind::kAdd, {a, b}, std::move(out));
  }
  const bool row_bias =
      av.rank() == 2 && bv.size() == av.dim(1) &&
      (bv.rank() == 1 || (bv.rank() == 2 && bv.dim(0) == 1));
  if (!row_bias) {
    throw Error(ErrorCode::kShape, "add: shape mismatch " +
                                       shape_str(av.shape()) + " vs " +
                                       shape_str(bv.shape()));
  }
  Tensor out = av;
  auto o = out.data();
  auto bd = bv.data();
  const std::size_t cols = av.dim(1);
  for (std::size_t r = 0; r < av.dim(0); ++r) {
    for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] += bd[c];
  }
  Var v = a.tape().record(OpKind::kAdd, {a, b}, std::move(out));
  a.tape().mutable_node(v).broadcast = true;
  return v;
}

inline Var sub(Var a, Var b) {
  detail::require_same_tape("sub", a, b);
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  auto o = out.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  return a.tape().record(OpKind::kSub, {a, b}, std::move(out));
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_tape("mul", a, b);
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  auto o = out.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
  return a.tape().record(OpKind::kMul, {a, b}, std::move(out));
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  Var r = a.tape().record(OpKind::kScale, {a}, std::move(out));
  a.tape().mutable_node(r).scalar = s;
  return r;
}

/// [m,k] x [k,n] -> [m,n].
inline Var matmul(Var a, Var b) {
  detail::require_same_tape("matmul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw Error(ErrorCode::kShape, "matmul: incompatible shapes " +
                                       shape_str(av.shape()) + " x " +
                                       shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out(Shape{m, n});
  auto o = out.data();
  auto ad = av.data();
  auto bd = bv.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = o.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ad[i * k + p];
      const double* brow = bd.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return a.tape().record(OpKind::kMatMul, {a, b}, std::move(out));
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.tape().record(OpKind::kRelu, {a}, std::move(out));
}

inline double sigmoid_scalar(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = sigmoid_scalar(v);
  return a.tape().record(OpKind::kSigmoid, {a}, std::move(out));
}

/// Normalizes each slice along the last axis to unit L2 norm. Slices with norm
/// at or below 1e-12 raise a domain error instead of being clamped.
inline Var l2_normalize(Var a) {
  const Tensor& av = a.value();
  const std::size_t width = detail::last_extent(av);
  const std::size_t rows = av.size() / width;
  Tensor out = av;
  Tensor norms(Shape{rows});
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < width; ++c) {
      const double v = o[r * width + c];
      ss += v * v;
    }
    const double norm = std::sqrt(ss);
    if (!(norm > kNormFloor)) {
      throw Error(ErrorCode::kDomain,
                  "l2_normalize: norm " + std::to_string(norm) +
                      " at or below floor 1e-12 for input " +
                      shape_str(av.shape()));
    }
    norms[r] = norm;
    for (std::size_t c = 0; c < width; ++c) o[r * width + c] /= norm;
  }
  Var v = a.tape().record(OpKind::kL2Normalize, {a}, std::move(out));
  a.tape().mutable_node(v).aux = std::move(norms);
  return v;
}

/// Sum of elementwise products of two equally shaped tensors.
inline Var dot(Var a, Var b) {
  detail::require_same_tape("dot", a, b);
  detail::require_same_shape("dot", a.value(), b.value());
  auto ad = a.value().data();
  auto bd = b.value().data();
  double s = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) s += ad[i] * bd[i];
  return a.tape().record(OpKind::kDot, {a, b}, Tensor::scalar(s));
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(OpKind::kSum, {a}, Tensor::scalar(s));
}

inline Var mean(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(OpKind::kMean, {a},
                         Tensor::scalar(s / double(a.value().size())));
}

inline Var reshape(Var a, Shape shape) {
  if (shape_numel(shape) != a.value().size()) {
    throw Error(ErrorCode::kShape, "reshape: cannot view " +
                                       shape_str(a.value().shape()) + " as " +
                                       shape_str(shape));
  }
  return a.tape().record(OpKind::kReshape, {a},
                         a.value().reshaped(std::move(shape)));
}

/// Mean binary cross-entropy of logits against {0,1} targets.
inline Var bce_with_logits(Var logits, const Tensor& targets) {
  detail::require_same_shape("bce_with_logits", logits.value(), targets);
  auto z = logits.value().data();
  auto y = targets.data();
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    s += std::max(z[i], 0.0) - z[i] * y[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  Var v = logits.tape().record(OpKind::kBceWithLogits, {logits},
                               Tensor::scalar(s / double(z.size())));
  logits.tape().mutable_node(v).aux = targets;
  return v;
}

/// Mean softmax cross-entropy of [batch, classes] logits against class labels.
inline Var softmax_cross_entropy(Var logits,
                                 const std::vector<std::size_t>& labels) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || lv.dim(0) != labels.size()) {
    throw Error(ErrorCode::kShape,
                "softmax_cross_entropy: logits " + shape_str(lv.shape()) +
                    " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = lv.dim(0), classes = lv.dim(1);
  Tensor probs(lv.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    if (labels[r] >= classes) {
      throw Error(ErrorCode::kDomain, "softmax_cross_entropy: label " +
                                          std::to_string(labels[r]) +
                                          " out of range");
    }
    const double* z = lv.data().data() + r * classes;
    double* p = probs.data().data() + r * classes;
    const double zmax = *std::max_element(z, z + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      p[c] = std::exp(z[c] - zmax);
      denom += p[c];
    }
    for (std::size_t c = 0; c < classes; ++c) p[c] /= denom;
    loss += -(z[labels[r]] - zmax - std::log(denom));
  }
  Var v = logits.tape().record(OpKind::kSoftmaxCrossEntropy, {logits},
                               Tensor::scalar(loss / double(batch)));
  auto& n = logits.tape().mutable_node(v);
  n.aux = std::move(probs);
  n.labels = labels;
  return v;
}

/// dot(a,b) / (|a| |b|) over the flattened inputs.
inline Var cosine_similarity(Var a, Var b) {
  if (a.value().size() != b.value().size()) {
    throw Error(ErrorCode::kShape, "cosine_similarity: length mismatch " +
                                       shape_str(a.value().shape()) + " vs " +
                                       shape_str(b.value().shape()));
  }
  const Shape flat{1, a.value().size()};
  return dot(l2_normalize(reshape(a, flat)), l2_normalize(reshape(b, flat)));
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Backward

inline void Tape::backward(Var root) {
  if (&root.tape() != this) {
    throw Error(ErrorCode::kArgument, "backward: root from another tape");
  }
  if (root.value().size() != 1) {
    throw Error(ErrorCode::kShape, "backward: root of shape " +
                                       shape_str(root.value().shape()) +
                                       " is not scalar");
  }
  grads_.assign(nodes_.size(), GradSlot{});
  if (!nodes_[root.id()].needs_grad) return;
  slot_for(root.id()).g[0] = 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    if (grads_[i].has_value && nodes_[i].n_parents > 0) backward_node(i);
  }
}

inline void Tape::backward_node(std::size_t id) {
  const Node& n = nodes_[id];
  const Tensor& g = grads_[id].g;
  auto gd = g.data();
  const std::size_t pa = n.parents[0];
  const std::size_t pb = n.parents[1];
  switch (n.op) {
    case OpKind::kLeaf:
    case OpKind::kConstant:
      break;
    case OpKind::kAdd: {
      accumulate(pa, gd);
      if (!nodes_[pb].needs_grad) break;
      if (!n.broadcast) {
        accumulate(pb, gd);
        break;
      }
      auto db = slot_for(pb).g.data();
      const std::size_t cols = db.size();
      const std::size_t rows = gd.size() / cols;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) db[c] += gd[r * cols + c];
      }
      break;
    }
    case OpKind::kSub: {
      accumulate(pa, gd);
      if (nodes_[pb].needs_grad) {
        auto db = slot_for(pb).g.data();
        for (std::size_t i = 0; i < db.size(); ++i) db[i] -= gd[i];
      }
      break;
    }
    case OpKind::kMul: {
      auto av = nodes_[pa].value().data();
      auto bv = nodes_[pb].value().data();
      if (nodes_[pa].needs_grad) {
        auto da = slot_for(pa).g.data();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += gd[i] * bv[i];
      }
      if (nodes_[pb].needs_grad) {
        auto db = slot_for(pb).g.data();
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += gd[i] * av[i];
      }
      break;
    }
    case OpKind::kScale: {
      if (!nodes_[pa].needs_grad) break;
      auto da = slot_for(pa).g.data();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += n.scalar * gd[i];
      break;
    }
    case OpKind::kMatMul: {
      const Tensor& av = nodes_[pa].value();
      const Tensor& bv = nodes_[pb].value();
      const std::size_t m = av.dim(0), k = av.dim(1), cols = bv.dim(1);
      if (nodes_[pa].needs_grad) {
        // dA = G B^T
        auto da = slot_for(pa).g.data();
        auto bd = bv.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = gd.data() + i * cols;
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = bd.data() + p * cols;
            double s = 0.0;
            for (std::size_t j = 0; j < cols; ++j) s += grow[j] * brow[j];
            da[i * k + p] += s;
          }
        }
      }
      if (nodes_[pb].needs_grad) {
        // dB = A^T G
        auto db = slot_for(pb).g.data();
        auto ad = av.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = gd.data() + i * cols;
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = ad[i * k + p];
            if (aip == 0.0) continue;
            double* drow = db.data() + p * cols;
            for (std::size_t j = 0; j < cols; ++j) drow[j] += aip * grow[j];
          }
        }
      }
      break;
    }
    case OpKind::kRelu: {
      if (!nodes_[pa].needs_grad) break;
      auto out = n.value().data();
      auto da = slot_for(pa).g.data();
      for (std::size_t i = 0; i < da.size(); ++i) {
        if (out[i] > 0.0) da[i] += gd[i];
      }
      break;
    }
    case OpKind::kSigmoid: {
      if (!nodes_[pa].needs_grad) break;
      auto out = n.value().data();
      auto da = slot_for(pa).g.data();
      for (std::size_t i = 0; i < da.size(); ++i) {
        da[i] += gd[i] * out[i] * (1.0 - out[i]);
      }
      break;
    }
    case OpKind::kL2Normalize: {
      if (!nodes_[pa].needs_grad) break;
      auto y = n.value().data();
      auto norms = n.aux.data();
      auto da = slot_for(pa).g.data();
      const std::size_t rows = norms.size();
      const std::size_t width = y.size() / rows;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* yr = y.data() + r * width;
        const double* gr = gd.data() + r * width;
        double yg = 0.0;
        for (std::size_t c = 0; c < width; ++c) yg += yr[c] * gr[c];
        for (std::size_t c = 0; c < width; ++c) {
          da[r * width + c] += (gr[c] - yr[c] * yg) / norms[r];
        }
      }
      break;
    }
    case OpKind::kDot: {
      const double s = gd[0];
      auto av = nodes_[pa].value().data();
      auto bv = nodes_[pb].value().data();
      if (nodes_[pa].needs_grad) {
        auto da = slot_for(pa).g.data();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += s * bv[i];
      }
      if (nodes_[pb].needs_grad) {
        auto db = slot_for(pb).g.data();
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += s * av[i];
      }
      break;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      if (!nodes_[pa].needs_grad) break;
      auto da = slot_for(pa).g.data();
      const double s =
          n.op == OpKind::kSum ? gd[0] : gd[0] / double(da.size());
      for (double& v : da) v += s;
      break;
    }
    case OpKind::kBceWithLogits: {
      if (!nodes_[pa].needs_grad) break;
      auto z = nodes_[pa].value().data();
      auto y = n.aux.data();
      auto da = slot_for(pa).g.data();
      const double s = gd[0] / double(z.size());
      for (std::size_t i = 0; i < da.size(); ++i) {
        da[i] += s * (sigmoid_scalar(z[i]) - y[i]);
      }
      break;
    }
    case OpKind::kSoftmaxCrossEntropy: {
      if (!nodes_[pa].needs_grad) break;
      auto p = n.aux.data();
      auto da = slot_for(pa).g.data();
      const std::size_t batch = n.labels.size();
      const std::size_t classes = p.size() / batch;
      const double s = gd[0] / double(batch);
      for (std::size_t r = 0; r < batch; ++r) {
        for (std::size_t c = 0; c < classes; ++c) {
          const double onehot = c == n.labels[r] ? 1.0 : 0.0;
          da[r * classes + c] += s * (p[r * classes + c] - onehot);
        }
      }
      break;
    }
    case OpKind::kReshape:
      accumulate(pa, gd);
      break;
  }
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Builds a scalar on the given tape from the input variable.
using ScalarFn = std::function<Var(Tape&, Var)>;

inline Tensor analytic_gradient(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Var xv = tape.leaf(x);
  Var y = f(tape, xv);
  tape.backward(y);
  return tape.grad(xv);
}

inline double evaluate_scalar(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  return f(tape, tape.constant(x)).value().item();
}

/// Central differences, one coordinate at a time.
inline Tensor numeric_gradient(const ScalarFn& f, const Tensor& x,
                               double step) {
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double hi = evaluate_scalar(f, probe);
    probe[i] = orig - step;
    const double lo = evaluate_scalar(f, probe);
    probe[i] = orig;
    g[i] = (hi - lo) / (2.0 * step);
  }
  return g;
}

/// max_i |analytic_i - numeric_i| / (|analytic_i| + 1e-8)
inline double finite_diff_check(const ScalarFn& f, const Tensor& x,
                                double step) {
  const Tensor a = analytic_gradient(f, x);
  const Tensor n = numeric_gradient(f, x, step);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - n[i]) / (std::abs(a[i]) + 1e-8));
  }
  return worst;
}

}  // namespace sibling
