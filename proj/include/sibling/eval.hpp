#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sibling/attack.hpp"
#include "sibling/error.hpp"
#include "sibling/models.hpp"
#include "sibling/synthface.hpp"
#include "sibling/tensor.hpp"

namespace sibling {

// ---------------------------------------------------------------------------
// Thresholds and success rate

struct ThresholdCalibration {
  std::string model_id;
  double tau = 0.0;
  double target_fpr = 0.0;
  std::size_t n_impostor_pairs = 0;
  double realized_fpr = 0.0;
};

/// Fraction of scores >= tau.
inline double fraction_at_or_above(std::span<const double> scores, double tau) {
  std::size_t hits = 0;
  for (double s : scores) hits += s >= tau ? 1 : 0;
  return double(hits) / double(scores.size());
}

/// Smallest observed score s with fraction(scores >= s) <= target_fpr. When
/// even the top score admits too many (ties at the top, or fewer than one
/// allowed false positive), tau is placed just above the maximum.
inline double calibrate_threshold(std::span<const double> scores,
                                  double target_fpr) {
  if (scores.empty()) {
    throw Error(ErrorCode::kArgument, "calibrate_threshold: no impostor scores");
  }
  if (!(target_fpr > 0.0 && target_fpr < 1.0)) {
    throw Error(ErrorCode::kArgument,
                "calibrate_threshold: target_fpr must be in (0, 1)");
  }
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const std::size_t n = sorted.size();
  // Largest count of scores >= tau that stays within the target.
  std::size_t allowed = 0;
  while (allowed < n && double(allowed + 1) <= target_fpr * double(n)) ++allowed;
  // Walk down from the allowed count until the candidate is not tied with
  // the next lower score.
  for (std::size_t k = allowed; k > 0; --k) {
    const std::size_t j = k - 1;
    if (j + 1 == n || sorted[j] > sorted[j + 1]) return sorted[j];
  }
  return std::nextafter(sorted.front(), std::numeric_limits<double>::infinity());
}

/// Impostor cosine scores of a model over the given pairs.
inline std::vector<double> pair_scores(const FaceRecognizer& model,
                                       const Dataset& ds, const PairSet& pairs) {
  // Embed each distinct sample once.
  std::vector<std::size_t> uniq;
  for (const auto& p : pairs.pairs) {
    uniq.push_back(p.attacker);
    uniq.push_back(p.victim);
  }
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::vector<const Tensor*> imgs;
  for (std::size_t i : uniq) imgs.push_back(&ds.samples.at(i).image);
  const Tensor emb = fr_embed_batch(model, imgs);
  auto row = [&](std::size_t idx) {
    return std::size_t(std::lower_bound(uniq.begin(), uniq.end(), idx) -
                       uniq.begin());
  };
  std::vector<double> scores;
  scores.reserve(pairs.pairs.size());
  for (const auto& p : pairs.pairs) {
    scores.push_back(row_cosine(emb, row(p.attacker), emb, row(p.victim)));
  }
  return scores;
}

inline ThresholdCalibration calibrate_threshold(const FaceRecognizer& model,
                                                const Dataset& ds,
                                                const PairSet& impostors,
                                                double target_fpr) {
  if (impostors.pairs.empty()) {
    throw Error(ErrorCode::kArgument, "calibrate_threshold: empty pair set");
  }
  const auto scores = pair_scores(model, ds, impostors);
  ThresholdCalibration c;
  c.model_id = model.model_id();
  c.tau = calibrate_threshold(scores, target_fpr);
  c.target_fpr = target_fpr;
  c.n_impostor_pairs = scores.size();
  c.realized_fpr = fraction_at_or_above(scores, c.tau);
  return c;
}

/// Attack success rate: (count of scores >= tau) / total.
inline double asr(std::span<const double> scores, double tau) {
  if (scores.empty()) throw Error(ErrorCode::kArgument, "asr: no scores");
  return fraction_at_or_above(scores, tau);
}

// ---------------------------------------------------------------------------
// Imperceptibility

namespace detail {

inline void image_dims(const Tensor& t, std::size_t& h, std::size_t& w) {
  if (t.rank() == 2 || (t.rank() == 3 && t.dim(2) == 1)) {
    h = t.dim(0);
    w = t.dim(1);
    return;
  }
  throw Error(ErrorCode::kShape,
              "expected a single-channel image, got " + shape_str(t.shape()));
}

}  // namespace detail

/// Mean squared error on the 0-255 scale.
inline double mse(const Tensor& x, const Tensor& y) {
  if (x.shape() != y.shape()) {
    throw Error(ErrorCode::kShape, "mse: shape mismatch " + shape_str(x.shape()) +
                                       " vs " + shape_str(y.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = 255.0 * x[i] - 255.0 * y[i];
    s += d * d;
  }
  return s / double(x.size());
}

inline constexpr std::size_t kSsimWindow = 8;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Mean SSIM over all 8x8 windows at stride 1, uniform weights, population
/// statistics, constants for a [0,1] dynamic range.
inline double ssim(const Tensor& x, const Tensor& y) {
  if (x.shape() != y.shape()) {
    throw Error(ErrorCode::kShape, "ssim: shape mismatch " + shape_str(x.shape()) +
                                       " vs " + shape_str(y.shape()));
  }
  std::size_t h = 0, w = 0;
  detail::image_dims(x, h, w);
  if (h < kSsimWindow || w < kSsimWindow) {
    throw Error(ErrorCode::kShape, "ssim: image " + shape_str(x.shape()) +
                                       " smaller than the 8x8 window");
  }
  const double n = double(kSsimWindow * kSsimWindow);
  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t r0 = 0; r0 + kSsimWindow <= h; ++r0) {
    for (std::size_t c0 = 0; c0 + kSsimWindow <= w; ++c0) {
      double mx = 0, my = 0;
      for (std::size_t r = r0; r < r0 + kSsimWindow; ++r) {
        for (std::size_t c = c0; c < c0 + kSsimWindow; ++c) {
          mx += x[r * w + c];
          my += y[r * w + c];
        }
      }
      mx /= n;
      my /= n;
      double vx = 0, vy = 0, cxy = 0;
      for (std::size_t r = r0; r < r0 + kSsimWindow; ++r) {
        for (std::size_t c = c0; c < c0 + kSsimWindow; ++c) {
          const double dx = x[r * w + c] - mx;
          const double dy = y[r * w + c] - my;
          vx += dx * dx;
          vy += dy * dy;
          cxy += dx * dy;
        }
      }
      vx /= n;
      vy /= n;
      cxy /= n;
      total += ((2 * mx * my + kSsimC1) * (2 * cxy + kSsimC2)) /
               ((mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2));
      ++windows;
    }
  }
  return total / double(windows);
}

// ---------------------------------------------------------------------------
// Attribute prediction difference

/// sum over pairs of sum_{j in group} |a_adv[j] - a_clean[j]|, from
/// precomputed attribute scores.
inline double pred_diff_scores(std::span<const Tensor> adv_scores,
                               std::span<const Tensor> clean_scores,
                               std::span<const std::size_t> group) {
  if (adv_scores.empty() || adv_scores.size() != clean_scores.size()) {
    throw Error(ErrorCode::kArgument, "pred_diff: empty or mismatched pairs");
  }
  double total = 0.0;
  for (std::size_t s = 0; s < adv_scores.size(); ++s) {
    for (std::size_t j : group) {
      total += std::abs(adv_scores[s].data()[j] - clean_scores[s].data()[j]);
    }
  }
  return total;
}

struct ImagePair {
  const Tensor* adversarial = nullptr;
  const Tensor* clean = nullptr;
};

/// Overall prediction change of a black-box attribute model.
inline double pred_diff(const AttributeRecognizer& target,
                        std::span<const ImagePair> pairs,
                        std::span<const std::size_t> group) {
  if (pairs.empty()) throw Error(ErrorCode::kArgument, "pred_diff: no pairs");
  std::vector<Tensor> adv, clean;
  for (const auto& p : pairs) {
    adv.push_back(ar_predict(target, *p.adversarial));
    clean.push_back(ar_predict(target, *p.clean));
  }
  return pred_diff_scores(adv, clean, group);
}

// ---------------------------------------------------------------------------
// Visual exports

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

inline std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

/// Parses binary P5 with maxval 255 (single whitespace after maxval).
inline GrayImage parse_pgm(std::string_view bytes) {
  std::size_t pos = 0;
  auto fail = [](const std::string& m) -> GrayImage {
    throw Error(ErrorCode::kFormat, "pgm: " + m);
  };
  auto skip_ws = [&] {
    while (pos < bytes.size() &&
           (bytes[pos] == ' ' || bytes[pos] == '\n' || bytes[pos] == '\r' ||
            bytes[pos] == '\t')) {
      ++pos;
    }
  };
  auto number = [&]() -> std::size_t {
    skip_ws();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + std::size_t(bytes[pos++] - '0');
      ++digits;
    }
    if (digits == 0) throw Error(ErrorCode::kFormat, "pgm: expected a number");
    return v;
  };
  if (bytes.substr(0, 2) != "P5") return fail("missing P5 magic");
  pos = 2;
  GrayImage img;
  img.width = number();
  img.height = number();
  if (number() != 255) return fail("maxval must be 255");
  if (pos >= bytes.size()) return fail("missing raster");
  ++pos;  // single whitespace byte
  if (bytes.size() - pos != img.width * img.height) return fail("raster size");
  img.pixels.assign(bytes.begin() + std::ptrdiff_t(pos), bytes.end());
  return img;
}

/// x5 amplification, magnitudes below xi/3 zeroed, |v| mapped to [0,255].
inline GrayImage render_perturbation(const Tensor& eps, double xi) {
  std::size_t h = 0, w = 0;
  detail::image_dims(eps, h, w);
  GrayImage img{w, h, std::vector<std::uint8_t>(w * h)};
  for (std::size_t i = 0; i < eps.size(); ++i) {
    double v = std::abs(5.0 * eps[i]);
    if (v < xi / 3.0) v = 0.0;
    img.pixels[i] = std::uint8_t(std::lround(255.0 * std::min(v, 1.0)));
  }
  return img;
}

/// Per-pixel |d adv_loss / d x_adv| scaled so the maximum is 1.
inline Tensor saliency_map(const SurrogateModel& model, const Tensor& x_adv,
                           const Tensor& x_v, Branch branch) {
  const auto lg = loss_and_grad(branch_objective(model, branch, x_v), x_adv);
  Tensor out = lg.grad;
  for (double& v : out.data()) v = std::abs(v);
  const double m = max_abs(out);
  if (m > 0.0) {
    for (double& v : out.data()) v /= m;
  }
  return out;
}

inline GrayImage render_map(const Tensor& map01) {
  std::size_t h = 0, w = 0;
  detail::image_dims(map01, h, w);
  GrayImage img{w, h, std::vector<std::uint8_t>(w * h)};
  for (std::size_t i = 0; i < map01.size(); ++i) {
    img.pixels[i] =
        std::uint8_t(std::lround(255.0 * std::clamp(map01[i], 0.0, 1.0)));
  }
  return img;
}

// ---------------------------------------------------------------------------
// Report

/// Attribute index groups standing in for eye / nose / mouth / other regions.
inline const std::vector<std::vector<std::size_t>>& attribute_groups() {
  static const std::vector<std::vector<std::size_t>> groups{
      {0, 1}, {2, 3}, {4, 5}, {6, 7}};
  return groups;
}

inline const std::vector<std::string>& attribute_group_names() {
  static const std::vector<std::string> names{"eye", "nose", "mouth", "other"};
  return names;
}

struct ReportRow {
  std::string algorithm;
  std::string target;
  double asr = 0.0;
  double ssim = 0.0;
  double mse = 0.0;
  std::vector<double> pred_diff;  // one per attribute group
  std::optional<double> runtime_s;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::vector<ReportRow> rows;
};

}  // namespace sibling
