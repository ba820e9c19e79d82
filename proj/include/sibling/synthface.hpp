#pragma once

// Procedural identity/attribute images. Every pixel is a pure function of
// (dataset seed, identity index, variation seed), so datasets never need to be
// shipped: they regenerate bit-for-bit from the seed.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sibling/error.hpp"
#include "sibling/rng.hpp"
#include "sibling/tensor.hpp"

namespace sibling {

inline constexpr std::size_t kImageSide = 16;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;
inline constexpr std::size_t kLatentDim = 16;
inline constexpr std::size_t kNumAttributes = 8;

inline const Shape& image_shape() {
  static const Shape shape{kImageSide, kImageSide, 1};
  return shape;
}

using Attributes = std::array<std::uint8_t, kNumAttributes>;

struct Identity {
  std::array<double, kLatentDim> latent{};
  std::size_t id_index = 0;
};

struct FaceSample {
  Tensor image;  // [16,16,1], values in [0,1]
  std::size_t id_index = 0;
  Attributes attributes{};
  std::uint64_t variation_seed = 0;
};

/// attribute j = 1 iff latent[2j] + 0.5 * latent[2j+1] > 0
inline Attributes derive_attributes(std::span<const double> latent) {
  if (latent.size() != kLatentDim) {
    throw Error(ErrorCode::kShape, "derive_attributes: latent length " +
                                       std::to_string(latent.size()) +
                                       ", expected 16");
  }
  Attributes a{};
  for (std::size_t j = 0; j < kNumAttributes; ++j) {
    a[j] = latent[2 * j] + 0.5 * latent[2 * j + 1] > 0.0 ? 1 : 0;
  }
  return a;
}

/// The fixed "world model": a random two-layer generator from latent to
/// pixels plus one Gaussian blob per attribute.
class FaceWorld {
 public:
  static constexpr std::size_t kHidden = 32;
  static constexpr double kGeneratorGain = 0.6;
  static constexpr double kBlobScale = 0.1;
  static constexpr double kNoiseScale = 0.05;
  /// Blob j is added at +kBlobPeak when attribute j is set, -kBlobPeak otherwise.
  static constexpr double kBlobPeak = 2.0;

  explicit FaceWorld(std::uint64_t seed) : seed_(seed) {
    Rng rng(derive_seed(seed, {kGeneratorTag}));
    w1_.resize(kLatentDim * kHidden);
    b1_.resize(kHidden);
    w2_.resize(kHidden * kImagePixels);
    b2_.resize(kImagePixels);
    for (double& w : w1_) w = rng.normal() / std::sqrt(double(kLatentDim)) * 1.5;
    for (double& b : b1_) b = 0.1 * rng.normal();
    for (double& w : w2_) w = rng.normal() / std::sqrt(double(kHidden));
    for (double& b : b2_) b = 0.3 * rng.normal();

    // Blob centres sit in four facial bands: eyes, nose, mouth, other.
    static constexpr std::array<std::array<double, 2>, kNumAttributes>
        kCentres{{{5, 4}, {5, 11}, {8, 6}, {8, 9}, {12, 5}, {12, 10},
                  {2, 7.5}, {14, 2}}};
    blobs_.assign(kNumAttributes * kImagePixels, 0.0);
    for (std::size_t j = 0; j < kNumAttributes; ++j) {
      for (std::size_t r = 0; r < kImageSide; ++r) {
        for (std::size_t c = 0; c < kImageSide; ++c) {
          const double dr = double(r) - kCentres[j][0];
          const double dc = double(c) - kCentres[j][1];
          blobs_[j * kImagePixels + r * kImageSide + c] =
              std::exp(-(dr * dr + dc * dc) / (2.0 * 1.3 * 1.3));
        }
      }
    }
  }

  std::uint64_t seed() const noexcept { return seed_; }

  Identity identity(std::size_t id_index) const {
    Rng rng(derive_seed(seed_, {kLatentTag, id_index}));
    Identity id;
    id.id_index = id_index;
    for (double& v : id.latent) v = rng.uniform(-1.0, 1.0);
    return id;
  }

  /// Noise-free generator output G(latent), 256 values in (0,1).
  std::vector<double> generate(std::span<const double> latent) const {
    std::array<double, kHidden> h{};
    for (std::size_t k = 0; k < kHidden; ++k) {
      double s = b1_[k];
      for (std::size_t i = 0; i < kLatentDim; ++i) {
        s += latent[i] * w1_[i * kHidden + k];
      }
      h[k] = std::tanh(s);
    }
    std::vector<double> out(kImagePixels);
    for (std::size_t p = 0; p < kImagePixels; ++p) {
      double s = b2_[p];
      for (std::size_t k = 0; k < kHidden; ++k) s += h[k] * w2_[k * kImagePixels + p];
      out[p] = sigmoid_scalar(kGeneratorGain * s);
    }
    return out;
  }

  /// Signed sum of the attribute blob patterns.
  std::vector<double> blob_layer(const Attributes& attributes) const {
    std::vector<double> out(kImagePixels, 0.0);
    for (std::size_t j = 0; j < kNumAttributes; ++j) {
      const double s = attributes[j] ? kBlobPeak : -kBlobPeak;
      for (std::size_t p = 0; p < kImagePixels; ++p) {
        out[p] += s * blobs_[j * kImagePixels + p];
      }
    }
    return out;
  }

  /// Per-sample standard normal noise field.
  std::vector<double> noise(std::size_t id_index,
                            std::uint64_t variation_seed) const {
    Rng rng(derive_seed(seed_, {kNoiseTag, id_index, variation_seed}));
    std::vector<double> out(kImagePixels);
    for (double& v : out) v = rng.normal();
    return out;
  }

  FaceSample render(const Identity& identity,
                    std::uint64_t variation_seed) const {
    FaceSample s;
    s.id_index = identity.id_index;
    s.variation_seed = variation_seed;
    s.attributes = derive_attributes(identity.latent);
    const auto g = generate(identity.latent);
    const auto b = blob_layer(s.attributes);
    const auto n = noise(identity.id_index, variation_seed);
    std::vector<double> px(kImagePixels);
    for (std::size_t p = 0; p < kImagePixels; ++p) {
      px[p] = std::clamp(g[p] + kBlobScale * b[p] + kNoiseScale * n[p], 0.0, 1.0);
    }
    s.image = Tensor(image_shape(), std::move(px));
    return s;
  }

 private:
  static constexpr std::uint64_t kGeneratorTag = 1;
  static constexpr std::uint64_t kLatentTag = 2;
  static constexpr std::uint64_t kNoiseTag = 3;

  std::uint64_t seed_;
  std::vector<double> w1_, b1_, w2_, b2_;
  std::vector<double> blobs_;
};

inline FaceSample render_face(const FaceWorld& world, const Identity& identity,
                              std::uint64_t variation_seed) {
  return world.render(identity, variation_seed);
}

struct Dataset {
  std::uint64_t seed = 0;
  std::size_t n_identities = 0;
  std::size_t samples_per_identity = 0;
  std::vector<FaceSample> samples;         // identity-major order
  std::vector<std::size_t> train_ids;      // sorted
  std::vector<std::size_t> heldout_ids;    // sorted

  const FaceSample& sample(std::size_t id_index, std::size_t k) const {
    return samples.at(id_index * samples_per_identity + k);
  }

  std::vector<std::size_t> sample_indices(
      const std::vector<std::size_t>& ids) const {
    std::vector<std::size_t> out;
    out.reserve(ids.size() * samples_per_identity);
    for (std::size_t id : ids) {
      for (std::size_t k = 0; k < samples_per_identity; ++k) {
        out.push_back(id * samples_per_identity + k);
      }
    }
    return out;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    if (a.seed != b.seed || a.n_identities != b.n_identities ||
        a.samples_per_identity != b.samples_per_identity ||
        a.train_ids != b.train_ids || a.heldout_ids != b.heldout_ids ||
        a.samples.size() != b.samples.size()) {
      return false;
    }
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
      const auto& x = a.samples[i];
      const auto& y = b.samples[i];
      if (!(x.image == y.image) || x.id_index != y.id_index ||
          x.attributes != y.attributes || x.variation_seed != y.variation_seed) {
        return false;
      }
    }
    return true;
  }
};

/// Identities are split 80/20 (train / held-out) by a seeded shuffle.
inline Dataset make_dataset(std::uint64_t seed, std::size_t n_identities,
                            std::size_t samples_per_identity) {
  if (n_identities < 2) {
    throw Error(ErrorCode::kArgument,
                "make_dataset: need at least 2 identities, got " +
                    std::to_string(n_identities));
  }
  if (samples_per_identity < 1) {
    throw Error(ErrorCode::kArgument,
                "make_dataset: samples_per_identity must be >= 1");
  }
  const FaceWorld world(seed);
  Dataset ds;
  ds.seed = seed;
  ds.n_identities = n_identities;
  ds.samples_per_identity = samples_per_identity;
  ds.samples.reserve(n_identities * samples_per_identity);
  for (std::size_t id = 0; id < n_identities; ++id) {
    const Identity identity = world.identity(id);
    for (std::size_t k = 0; k < samples_per_identity; ++k) {
      ds.samples.push_back(world.render(identity, k));
    }
  }

  std::vector<std::size_t> ids(n_identities);
  for (std::size_t i = 0; i < n_identities; ++i) ids[i] = i;
  Rng rng(derive_seed(seed, {0x5b117ULL}));
  for (std::size_t i = n_identities - 1; i > 0; --i) {
    std::swap(ids[i], ids[rng.below(i + 1)]);
  }
  const auto n_train = std::clamp<std::size_t>(
      std::size_t(std::llround(0.8 * double(n_identities))), 1,
      n_identities - 1);
  ds.train_ids.assign(ids.begin(), ids.begin() + std::ptrdiff_t(n_train));
  ds.heldout_ids.assign(ids.begin() + std::ptrdiff_t(n_train), ids.end());
  std::sort(ds.train_ids.begin(), ds.train_ids.end());
  std::sort(ds.heldout_ids.begin(), ds.heldout_ids.end());
  return ds;
}

enum class PairKind { kGenuine, kImpostor };

inline const char* pair_kind_name(PairKind k) {
  return k == PairKind::kGenuine ? "genuine" : "impostor";
}

/// Indices into Dataset::samples.
struct SamplePair {
  std::size_t attacker = 0;
  std::size_t victim = 0;
};

struct PairSet {
  PairKind kind = PairKind::kImpostor;
  std::vector<SamplePair> pairs;
};

/// Draws `n` pairs from the identities in `id_pool`.
inline PairSet sample_pairs(const Dataset& ds, std::size_t n, PairKind kind,
                            std::uint64_t seed,
                            const std::vector<std::size_t>& id_pool) {
  if (kind == PairKind::kImpostor && id_pool.size() < 2) {
    throw Error(ErrorCode::kArgument,
                "sample_pairs: impostor pairs need at least 2 identities, got " +
                    std::to_string(id_pool.size()));
  }
  if (kind == PairKind::kGenuine &&
      (id_pool.empty() || ds.samples_per_identity < 2)) {
    throw Error(ErrorCode::kArgument,
                "sample_pairs: genuine pairs need an identity with at least 2 "
                "samples");
  }
  const std::size_t spi = ds.samples_per_identity;
  Rng rng(derive_seed(seed, {kind == PairKind::kGenuine ? 11ULL : 13ULL}));
  PairSet out;
  out.kind = kind;
  out.pairs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t a = id_pool[rng.below(id_pool.size())];
    std::size_t v = a;
    std::size_t ka = rng.below(spi);
    std::size_t kv = ka;
    if (kind == PairKind::kImpostor) {
      while (v == a) v = id_pool[rng.below(id_pool.size())];
      kv = rng.below(spi);
    } else {
      while (kv == ka) kv = rng.below(spi);
    }
    out.pairs.push_back({a * spi + ka, v * spi + kv});
  }
  return out;
}

/// Draws from the whole dataset.
inline PairSet sample_pairs(const Dataset& ds, std::size_t n, PairKind kind,
                            std::uint64_t seed) {
  std::vector<std::size_t> all(ds.n_identities);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return sample_pairs(ds, n, kind, seed, all);
}

}  // namespace sibling
