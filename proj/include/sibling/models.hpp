#pragma once

// Surrogate S(P; F; A) with a hard-shared encoder P, an FR branch F and an AR
// branch A, plus independently initialised black-box targets.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sibling/container.hpp"
#include "sibling/error.hpp"
#include "sibling/rng.hpp"
#include "sibling/synthface.hpp"
#include "sibling/tensor.hpp"

namespace sibling {

// ---------------------------------------------------------------------------
// Layers

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }

  static Linear he_uniform(std::size_t in, std::size_t out, Rng& rng) {
    Linear l{Tensor(Shape{in, out}), Tensor(Shape{out})};
    const double bound = std::sqrt(6.0 / double(in));
    for (double& w : l.weight.data()) w = rng.uniform(-bound, bound);
    return l;
  }
};

/// Parameters are either borrowed as constants (frozen inference, attacks) or
/// registered as leaves so a trainer can read their gradients.
class ParamBinder {
 public:
  ParamBinder() = default;
  explicit ParamBinder(bool trainable) : trainable_(trainable) {}

  Var bind(Tape& tape, Tensor& param) {
    if (!trainable_) return tape.borrow(param);
    Var v = tape.leaf(param);
    bound_.push_back({&param, v});
    return v;
  }
  Var bind(Tape& tape, const Tensor& param) {
    if (trainable_) {
      throw Error(ErrorCode::kArgument, "cannot train a const parameter");
    }
    return tape.borrow(param);
  }

  struct Bound {
    Tensor* param;
    Var var;
  };
  const std::vector<Bound>& bound() const { return bound_; }

 private:
  bool trainable_ = false;
  std::vector<Bound> bound_;
};

/// Stack of Linear layers with relu between them; `relu_last` also applies it
/// to the final output.
struct Mlp {
  std::vector<Linear> layers;
  bool relu_last = false;

  static Mlp build(const std::vector<std::size_t>& widths, bool relu_last,
                   Rng& rng) {
    Mlp m;
    m.relu_last = relu_last;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      m.layers.push_back(Linear::he_uniform(widths[i], widths[i + 1], rng));
    }
    return m;
  }

  std::size_t in() const { return layers.front().in(); }
  std::size_t out() const { return layers.back().out(); }

  template <class Self>
  static Var run(Self& self, Tape& tape, Var x, ParamBinder& binder) {
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& layer = self.layers[i];
      x = add(matmul(x, binder.bind(tape, layer.weight)),
              binder.bind(tape, layer.bias));
      if (i + 1 < self.layers.size() || self.relu_last) x = relu(x);
    }
    return x;
  }
  Var forward(Tape& tape, Var x, ParamBinder& binder) {
    return run(*this, tape, x, binder);
  }
  Var forward(Tape& tape, Var x, ParamBinder& binder) const {
    return run(*this, tape, x, binder);
  }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor*>>& out) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = prefix + "." + std::to_string(i);
      out.emplace_back(p + ".weight", &layers[i].weight);
      out.emplace_back(p + ".bias", &layers[i].bias);
    }
  }
};

/// Views an image (any shape with `width` elements per row) as [rows, width].
inline Var as_rows(Var x, std::size_t width) {
  const Tensor& v = x.value();
  if (v.rank() == 2 && v.dim(1) == width) return x;
  if (v.size() % width != 0) {
    throw Error(ErrorCode::kShape, "model input " + shape_str(v.shape()) +
                                       " is not a multiple of width " +
                                       std::to_string(width));
  }
  return reshape(x, Shape{v.size() / width, width});
}

// ---------------------------------------------------------------------------
// Model interfaces

class FaceRecognizer {
 public:
  virtual ~FaceRecognizer() = default;
  /// Unit-norm embedding rows for the given image(s).
  virtual Var fr_embedding(Tape& tape, Var image) const = 0;
  virtual std::string model_id() const = 0;
};

class AttributeRecognizer {
 public:
  virtual ~AttributeRecognizer() = default;
  virtual Var attribute_logits(Tape& tape, Var image) const = 0;
};

// ---------------------------------------------------------------------------
// Surrogate

struct SurrogateArch {
  std::size_t input = kImagePixels;
  std::vector<std::size_t> encoder{128, 64};
  std::vector<std::size_t> fr{48, 32};
  std::vector<std::size_t> ar{48, 16};
  std::size_t n_attributes = kNumAttributes;

  /// 4x4-pixel toy architecture used by oracle tests.
  static SurrogateArch toy() {
    return SurrogateArch{16, {8, 6}, {5, 4}, {5, 4}, 3};
  }
};

class SurrogateModel : public FaceRecognizer, public AttributeRecognizer {
 public:
  SurrogateModel() = default;

  static SurrogateModel build(std::uint64_t arch_seed,
                              const SurrogateArch& arch = {}) {
    SurrogateModel m;
    m.arch_seed_ = arch_seed;
    auto widths = [](std::size_t first, const std::vector<std::size_t>& rest) {
      std::vector<std::size_t> w{first};
      w.insert(w.end(), rest.begin(), rest.end());
      return w;
    };
    Rng rp(derive_seed(arch_seed, {1}));
    Rng rf(derive_seed(arch_seed, {2}));
    Rng ra(derive_seed(arch_seed, {3}));
    Rng rh(derive_seed(arch_seed, {4}));
    m.encoder_ = Mlp::build(widths(arch.input, arch.encoder), true, rp);
    m.fr_ = Mlp::build(widths(m.encoder_.out(), arch.fr), false, rf);
    m.ar_ = Mlp::build(widths(m.encoder_.out(), arch.ar), false, ra);
    m.ar_head_ = Linear::he_uniform(m.ar_.out(), arch.n_attributes, rh);
    return m;
  }

  std::size_t input_width() const { return encoder_.in(); }
  std::size_t n_attributes() const { return ar_head_.out(); }
  std::uint64_t arch_seed() const { return arch_seed_; }

  Var shared(Tape& tape, Var image, ParamBinder& b) const {
    return encoder_.forward(tape, as_rows(image, input_width()), b);
  }
  Var shared(Tape& tape, Var image, ParamBinder& b) {
    return encoder_.forward(tape, as_rows(image, input_width()), b);
  }

  /// F before normalisation (input of the identity head during training).
  template <class Self>
  static Var fr_raw(Self& self, Tape& tape, Var image, ParamBinder& b) {
    return self.fr_.forward(tape, self.shared(tape, image, b), b);
  }

  Var fr_embedding(Tape& tape, Var image) const override {
    ParamBinder b;
    return l2_normalize(fr_raw(*this, tape, image, b));
  }

  /// Pre-logit feature layer of the AR branch.
  Var ar_features(Tape& tape, Var image) const {
    ParamBinder b;
    return ar_.forward(tape, shared(tape, image, b), b);
  }

  Var attribute_logits(Tape& tape, Var image) const override {
    ParamBinder b;
    Var f = ar_.forward(tape, shared(tape, image, b), b);
    return add(matmul(f, b.bind(tape, ar_head_.weight)),
               b.bind(tape, ar_head_.bias));
  }

  std::string model_id() const override { return "surrogate"; }

  /// Joint trainable forward: returns {F pre-normalisation, attribute logits}.
  std::pair<Var, Var> train_forward(Tape& tape, Var batch, ParamBinder& b) {
    Var p = shared(tape, batch, b);
    Var fr = fr_.forward(tape, p, b);
    Var af = ar_.forward(tape, p, b);
    Var logits = add(matmul(af, b.bind(tape, ar_head_.weight)),
                     b.bind(tape, ar_head_.bias));
    return {fr, logits};
  }

  std::vector<std::pair<std::string, Tensor*>> parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    encoder_.collect("P", out);
    fr_.collect("F", out);
    ar_.collect("A", out);
    out.emplace_back("A.head.weight", &ar_head_.weight);
    out.emplace_back("A.head.bias", &ar_head_.bias);
    return out;
  }
  std::vector<std::pair<std::string, const Tensor*>> parameters() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& [n, p] : const_cast<SurrogateModel*>(this)->parameters()) {
      out.emplace_back(n, p);
    }
    return out;
  }

  const Mlp& encoder() const { return encoder_; }
  const Mlp& fr_branch() const { return fr_; }
  const Mlp& ar_branch() const { return ar_; }
  const Linear& ar_head() const { return ar_head_; }

 private:
  friend SurrogateModel load_surrogate(const std::filesystem::path&);
  friend SurrogateModel surrogate_from_tensors(const std::vector<NamedTensor>&);

  std::uint64_t arch_seed_ = 0;
  Mlp encoder_;
  Mlp fr_;
  Mlp ar_;
  Linear ar_head_;
};

inline SurrogateModel build_surrogate(std::uint64_t arch_seed,
                                      const SurrogateArch& arch = {}) {
  return SurrogateModel::build(arch_seed, arch);
}

// ---------------------------------------------------------------------------
// Black-box targets

enum class TargetKind { kFaceRecognition, kAttributeRecognition };

/// Plain MLP: hidden layers with relu, final layer linear. FR targets
/// normalise the final layer into an embedding; AR targets emit logits.
class TargetModel : public FaceRecognizer, public AttributeRecognizer {
 public:
  TargetModel() = default;

  /// `widths` lists every layer size after the input, e.g. {96, 48, 24}.
  static TargetModel build(std::string id, TargetKind kind,
                           std::vector<std::size_t> widths, std::uint64_t seed,
                           std::size_t input = kImagePixels) {
    if (widths.empty()) {
      throw Error(ErrorCode::kArgument, "target model needs at least one layer");
    }
    TargetModel m;
    m.id_ = std::move(id);
    m.kind_ = kind;
    m.seed_ = seed;
    std::vector<std::size_t> all{input};
    all.insert(all.end(), widths.begin(), widths.end());
    Rng rng(derive_seed(seed, {7}));
    m.body_ = Mlp::build(all, false, rng);
    return m;
  }

  TargetKind kind() const { return kind_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t input_width() const { return body_.in(); }
  std::size_t output_width() const { return body_.out(); }
  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w;
    for (const auto& l : body_.layers) w.push_back(l.out());
    return w;
  }

  Var raw(Tape& tape, Var image, ParamBinder& b) {
    return body_.forward(tape, as_rows(image, input_width()), b);
  }
  Var raw(Tape& tape, Var image, ParamBinder& b) const {
    return body_.forward(tape, as_rows(image, input_width()), b);
  }

  Var fr_embedding(Tape& tape, Var image) const override {
    require(TargetKind::kFaceRecognition, "fr_embedding");
    ParamBinder b;
    return l2_normalize(raw(tape, image, b));
  }

  Var attribute_logits(Tape& tape, Var image) const override {
    require(TargetKind::kAttributeRecognition, "attribute_logits");
    ParamBinder b;
    return raw(tape, image, b);
  }

  std::string model_id() const override { return id_; }

  std::vector<std::pair<std::string, Tensor*>> parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    body_.collect("T", out);
    return out;
  }

 private:
  friend TargetModel target_from_tensors(const std::vector<NamedTensor>&,
                                         std::string);

  void require(TargetKind k, const char* op) const {
    if (kind_ != k) {
      throw Error(ErrorCode::kArgument, std::string(op) + ": model '" + id_ +
                                            "' has the wrong kind");
    }
  }

  std::string id_;
  TargetKind kind_ = TargetKind::kFaceRecognition;
  std::uint64_t seed_ = 0;
  Mlp body_;
};

// ---------------------------------------------------------------------------
// Inference helpers

/// Unit-norm FR embedding of one image, as a flat vector.
inline Tensor fr_embed(const FaceRecognizer& model, const Tensor& image) {
  Tape tape;
  Var e = model.fr_embedding(tape, tape.borrow(image));
  return e.value().reshaped(Shape{e.value().size()});
}

inline Tensor ar_features(const SurrogateModel& model, const Tensor& image) {
  Tape tape;
  Var f = model.ar_features(tape, tape.borrow(image));
  return f.value().reshaped(Shape{f.value().size()});
}

/// sigmoid(logits), one score per attribute.
inline Tensor ar_predict(const AttributeRecognizer& model,
                         const Tensor& image) {
  Tape tape;
  Var p = sigmoid(model.attribute_logits(tape, tape.borrow(image)));
  return p.value().reshaped(Shape{p.value().size()});
}

/// Stacks images into one [n, pixels] batch.
inline Tensor stack_images(const std::vector<const Tensor*>& images) {
  const std::size_t width = images.front()->size();
  std::vector<double> data;
  data.reserve(images.size() * width);
  for (const Tensor* t : images) {
    if (t->size() != width) {
      throw Error(ErrorCode::kShape, "stack_images: ragged image sizes");
    }
    data.insert(data.end(), t->data().begin(), t->data().end());
  }
  return Tensor(Shape{images.size(), width}, std::move(data));
}

/// Embedding rows [n, d] for many images in one pass.
inline Tensor fr_embed_batch(const FaceRecognizer& model,
                             const std::vector<const Tensor*>& images) {
  const Tensor batch = stack_images(images);
  Tape tape;
  return model.fr_embedding(tape, tape.borrow(batch)).value();
}

inline Tensor ar_predict_batch(const AttributeRecognizer& model,
                               const std::vector<const Tensor*>& images) {
  const Tensor batch = stack_images(images);
  Tape tape;
  return sigmoid(model.attribute_logits(tape, tape.borrow(batch))).value();
}

inline double row_cosine(const Tensor& a, std::size_t ra, const Tensor& b,
                         std::size_t rb) {
  const std::size_t d = a.dim(1);
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double x = a[ra * d + i], y = b[rb * d + i];
    ab += x * y;
    aa += x * x;
    bb += y * y;
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::size_t epochs = 30;
  double lr = 0.05;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
};

namespace detail {

struct TrainingData {
  std::vector<std::size_t> indices;              // into dataset samples
  std::map<std::size_t, std::size_t> class_of;   // id_index -> class
};

inline TrainingData training_data(const Dataset& ds) {
  TrainingData td;
  td.indices = ds.sample_indices(ds.train_ids);
  for (std::size_t i = 0; i < ds.train_ids.size(); ++i) {
    td.class_of[ds.train_ids[i]] = i;
  }
  return td;
}

/// Shuffled minibatches; `step(batch_images, labels, attributes)` returns the
/// batch loss after applying its own update.
template <class Step>
TrainResult run_epochs(const Dataset& ds, const TrainOptions& opt,
                       const TrainingData& td, Step&& step) {
  TrainResult result;
  std::vector<std::size_t> order = td.indices;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng rng(derive_seed(opt.seed, {0xe90c4ULL, epoch}));
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::swap(order[i], order[rng.below(i + 1)]);
    }
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      std::vector<const Tensor*> imgs;
      std::vector<std::size_t> labels;
      std::vector<double> attrs;
      for (std::size_t k = start; k < end; ++k) {
        const FaceSample& s = ds.samples[order[k]];
        imgs.push_back(&s.image);
        labels.push_back(td.class_of.at(s.id_index));
        for (auto a : s.attributes) attrs.push_back(double(a));
      }
      Tensor batch = stack_images(imgs);
      Tensor targets(Shape{end - start, kNumAttributes}, std::move(attrs));
      total += step(batch, labels, targets);
      ++batches;
    }
    result.epoch_loss.push_back(total / double(batches));
  }
  return result;
}

inline void sgd_update(const ParamBinder& binder, const Tape& tape, double lr) {
  for (const auto& [param, var] : binder.bound()) {
    const Tensor g = tape.grad(var);
    auto p = param->data();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
  }
}

inline void require_finite(const Tensor& loss, const char* what) {
  if (!loss.all_finite()) {
    throw Error(ErrorCode::kNumeric, std::string(what) + ": non-finite loss");
  }
}

}  // namespace detail

/// Joint identity-softmax (auxiliary head on F's pre-normalisation output) +
/// attribute BCE, equally weighted, plain minibatch SGD. The auxiliary head is
/// discarded afterwards.
inline TrainResult train_surrogate(SurrogateModel& model, const Dataset& ds,
                                   const TrainOptions& opt) {
  const auto td = detail::training_data(ds);
  const std::size_t fr_dim = model.fr_branch().out();
  Rng rng(derive_seed(opt.seed, {0xa0c5ULL}));
  Linear id_head = Linear::he_uniform(fr_dim, ds.train_ids.size(), rng);
  return detail::run_epochs(
      ds, opt, td,
      [&](const Tensor& batch, const std::vector<std::size_t>& labels,
          const Tensor& attrs) {
        Tape tape;
        ParamBinder b(true);
        auto [fr, logits] = model.train_forward(tape, tape.borrow(batch), b);
        Var id_logits = add(matmul(fr, b.bind(tape, id_head.weight)),
                            b.bind(tape, id_head.bias));
        Var loss = add(softmax_cross_entropy(id_logits, labels),
                       bce_with_logits(logits, attrs));
        detail::require_finite(loss.value(), "train_surrogate");
        tape.backward(loss);
        detail::sgd_update(b, tape, opt.lr);
        return loss.value().item();
      });
}

/// FR targets: identity softmax through a discarded auxiliary head on the
/// pre-normalisation embedding. AR targets: attribute BCE.
inline TrainResult train_target(TargetModel& model, const Dataset& ds,
                                const TrainOptions& opt) {
  const auto td = detail::training_data(ds);
  std::optional<Linear> id_head;
  if (model.kind() == TargetKind::kFaceRecognition) {
    Rng rng(derive_seed(opt.seed, {0xa0c5ULL}));
    id_head = Linear::he_uniform(model.output_width(), ds.train_ids.size(), rng);
  }
  return detail::run_epochs(
      ds, opt, td,
      [&](const Tensor& batch, const std::vector<std::size_t>& labels,
          const Tensor& attrs) {
        Tape tape;
        ParamBinder b(true);
        Var out = model.raw(tape, tape.borrow(batch), b);
        Var loss;
        if (id_head) {
          Var id_logits = add(matmul(out, b.bind(tape, id_head->weight)),
                              b.bind(tape, id_head->bias));
          loss = softmax_cross_entropy(id_logits, labels);
        } else {
          loss = bce_with_logits(out, attrs);
        }
        detail::require_finite(loss.value(), "train_target");
        tape.backward(loss);
        detail::sgd_update(b, tape, opt.lr);
        return loss.value().item();
      });
}

// ---------------------------------------------------------------------------
// Persistence (SIBW)

namespace detail {

inline constexpr double kSurrogateTag = 1.0;
inline constexpr double kTargetFrTag = 2.0;
inline constexpr double kTargetArTag = 3.0;

inline std::size_t count_layers(const std::vector<NamedTensor>& ts,
                                const std::string& prefix) {
  std::size_t n = 0;
  while (true) {
    const std::string name = prefix + "." + std::to_string(n) + ".weight";
    bool found = false;
    for (const auto& t : ts) found = found || t.name == name;
    if (!found) return n;
    ++n;
  }
}

inline Mlp mlp_from(const std::vector<NamedTensor>& ts,
                    const std::string& prefix, bool relu_last) {
  Mlp m;
  m.relu_last = relu_last;
  const std::size_t n = count_layers(ts, prefix);
  if (n == 0) {
    throw Error(ErrorCode::kFormat, "weights: no layers for '" + prefix + "'");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const std::string p = prefix + "." + std::to_string(i);
    Linear l{find_tensor(ts, p + ".weight"), find_tensor(ts, p + ".bias")};
    if (l.weight.rank() != 2 || l.bias.rank() != 1 ||
        l.bias.dim(0) != l.weight.dim(1) ||
        (i > 0 && m.layers.back().out() != l.in())) {
      throw Error(ErrorCode::kFormat, "weights: inconsistent shapes in " + p);
    }
    m.layers.push_back(std::move(l));
  }
  return m;
}

inline const Tensor& meta_of(const std::vector<NamedTensor>& ts) {
  const Tensor& meta = find_tensor(ts, "meta");
  if (meta.size() < 2) throw Error(ErrorCode::kFormat, "weights: short meta");
  return meta;
}

}  // namespace detail

inline std::vector<NamedTensor> to_tensors(const SurrogateModel& model) {
  std::vector<NamedTensor> out;
  out.push_back({"meta", Tensor::vector({detail::kSurrogateTag,
                                         double(model.arch_seed())})});
  for (const auto& [name, p] : model.parameters()) out.push_back({name, *p});
  return out;
}

inline std::vector<NamedTensor> to_tensors(TargetModel model) {
  std::vector<NamedTensor> out;
  const double tag = model.kind() == TargetKind::kFaceRecognition
                         ? detail::kTargetFrTag
                         : detail::kTargetArTag;
  out.push_back({"meta", Tensor::vector({tag, double(model.seed())})});
  for (const auto& [name, p] : model.parameters()) out.push_back({name, *p});
  return out;
}

inline SurrogateModel surrogate_from_tensors(
    const std::vector<NamedTensor>& ts) {
  const Tensor& meta = detail::meta_of(ts);
  if (meta[0] != detail::kSurrogateTag) {
    throw Error(ErrorCode::kFormat, "weights: file is not a surrogate model");
  }
  SurrogateModel m;
  m.arch_seed_ = std::uint64_t(meta[1]);
  m.encoder_ = detail::mlp_from(ts, "P", true);
  m.fr_ = detail::mlp_from(ts, "F", false);
  m.ar_ = detail::mlp_from(ts, "A", false);
  m.ar_head_ = Linear{find_tensor(ts, "A.head.weight"),
                      find_tensor(ts, "A.head.bias")};
  if (m.fr_.in() != m.encoder_.out() || m.ar_.in() != m.encoder_.out() ||
      m.ar_head_.in() != m.ar_.out()) {
    throw Error(ErrorCode::kFormat, "weights: surrogate branch widths disagree");
  }
  return m;
}

inline TargetModel target_from_tensors(const std::vector<NamedTensor>& ts,
                                       std::string id) {
  const Tensor& meta = detail::meta_of(ts);
  TargetModel m;
  if (meta[0] == detail::kTargetFrTag) {
    m.kind_ = TargetKind::kFaceRecognition;
  } else if (meta[0] == detail::kTargetArTag) {
    m.kind_ = TargetKind::kAttributeRecognition;
  } else {
    throw Error(ErrorCode::kFormat, "weights: file is not a target model");
  }
  m.id_ = std::move(id);
  m.seed_ = std::uint64_t(meta[1]);
  m.body_ = detail::mlp_from(ts, "T", false);
  return m;
}

inline void save_weights(const SurrogateModel& model,
                         const std::filesystem::path& path) {
  save_container(path, to_tensors(model));
}

inline void save_weights(const TargetModel& model,
                         const std::filesystem::path& path) {
  save_container(path, to_tensors(model));
}

inline SurrogateModel load_surrogate(const std::filesystem::path& path) {
  return surrogate_from_tensors(load_container(path));
}

inline TargetModel load_target(const std::filesystem::path& path,
                               std::string id) {
  return target_from_tensors(load_container(path), std::move(id));
}

}  // namespace sibling
