#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "support.hpp"
#include "sibling/attack.hpp"
#include "sibling/eval.hpp"

using namespace sibling;
using test::random_image;

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * double(i + j);
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / double(ra.size());
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / double(rb.size());
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

Tensor constant_image(double v) {
  Tensor t(Shape{16, 16, 1});
  for (double& x : t.data()) x = v;
  return t;
}

}  // namespace

TEST(Calibration, Examples) {
  const std::vector<double> s{0.9, 0.5, 0.1};
  EXPECT_EQ(calibrate_threshold(s, 0.34), 0.9);
  // At 0.67 two of three may pass, so the smallest valid tau is 0.5. The
  // minimum itself would admit all three.
  EXPECT_EQ(calibrate_threshold(s, 0.67), 0.5);
  EXPECT_EQ(calibrate_threshold(s, 0.999), 0.5);
  // Too strict for even one false positive: tau sits just above the top.
  EXPECT_GT(calibrate_threshold(s, 0.1), 0.9);
  EXPECT_EQ(fraction_at_or_above(s, calibrate_threshold(s, 0.1)), 0.0);
}

TEST(Calibration, Errors) {
  EXPECT_THROW(calibrate_threshold(std::vector<double>{}, 0.1), Error);
  EXPECT_THROW(calibrate_threshold(std::vector<double>{0.3}, 0.0), Error);
  EXPECT_THROW(calibrate_threshold(std::vector<double>{0.3}, 1.0), Error);
}

TEST(Calibration, RealizedRateOnRandomScores) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> s(10000);
    // Coarse values force plenty of ties.
    for (double& v : s) v = trial % 2 ? rng.uniform() : std::round(rng.uniform() * 500) / 500;
    for (double fpr : {0.001, 0.01, 0.2}) {
      const double tau = calibrate_threshold(s, fpr);
      std::size_t hits = 0;
      for (double v : s) hits += v >= tau;
      EXPECT_LE(double(hits) / 1e4, fpr + 1e-4);
      // Smallest such tau: any lower observed score breaks the rate.
      double below = -1;
      for (double v : s) if (v < tau) below = std::max(below, v);
      if (below >= 0) {
        std::size_t more = 0;
        for (double v : s) more += v >= below;
        EXPECT_GT(double(more) / 1e4, fpr);
      }
    }
  }
}

TEST(Calibration, MonotoneInTargetRate) {
  Rng rng(12);
  std::vector<double> s(2000);
  for (double& v : s) v = rng.uniform();
  double prev = -1;
  for (double fpr : {0.5, 0.2, 0.05, 0.01, 0.001, 0.0001}) {
    const double tau = calibrate_threshold(s, fpr);
    EXPECT_GE(tau, prev);
    prev = tau;
  }
}

TEST(Asr, Examples) {
  EXPECT_DOUBLE_EQ(asr(std::vector<double>{0.30, 0.25, 0.28}, 0.277), 2.0 / 3.0);
  EXPECT_EQ(asr(std::vector<double>{0.1, 0.2}, 0.5), 0.0);
  EXPECT_EQ(asr(std::vector<double>{0.277}, 0.277), 1.0);
  EXPECT_THROW(asr(std::vector<double>{}, 0.2), Error);
}

TEST(Asr, MatchesBruteForce) {
  Rng rng(13);
  for (int k = 0; k < 1000; ++k) {
    std::vector<double> s(1 + rng.below(50));
    for (double& v : s) v = std::round(rng.uniform() * 20) / 20;
    const double tau = std::round(rng.uniform() * 20) / 20;
    const auto c = std::count_if(s.begin(), s.end(), [&](double v) { return v >= tau; });
    ASSERT_EQ(asr(s, tau), double(c) / double(s.size()));
  }
}

TEST(Mse, Examples) {
  Rng rng(14);
  const Tensor x = random_image(rng);
  EXPECT_EQ(mse(x, x), 0.0);
  const Tensor a = constant_image(0.3), b = constant_image(0.3 + 40.0 / 255.0);
  EXPECT_NEAR(mse(a, b), 1600.0, 1e-9);
  const Tensor y = random_image(rng);
  EXPECT_EQ(mse(x, y), mse(y, x));
  EXPECT_THROW(mse(x, Tensor(Shape{4, 4})), Error);
}

TEST(Ssim, IdentityAndSymmetry) {
  Rng rng(15);
  for (int k = 0; k < 50; ++k) {
    const Tensor x = random_image(rng), y = random_image(rng);
    EXPECT_NEAR(ssim(x, x), 1.0, 1e-9);
    EXPECT_EQ(ssim(x, y), ssim(y, x));
    EXPECT_LT(ssim(x, y), 1.0);
    EXPECT_GE(ssim(x, y), -1.0);
  }
}

TEST(Ssim, ConstantImages) {
  EXPECT_NEAR(ssim(constant_image(0.2), constant_image(0.8)), 0.4707, 1e-4);
}

TEST(Ssim, SmallOrMismatchedInputs) {
  EXPECT_THROW(ssim(Tensor(Shape{4, 4}), Tensor(Shape{4, 4})), Error);
  EXPECT_THROW(ssim(constant_image(0.1), Tensor(Shape{16, 8})), Error);
}

TEST(PredDiff, Examples) {
  const std::vector<Tensor> adv{Tensor::vector({0.5, 0.4})}, clean{Tensor::vector({0.2, 0.9})};
  const std::vector<std::size_t> both{0, 1};
  EXPECT_NEAR(pred_diff_scores(adv, clean, both), 0.8, 1e-15);
  EXPECT_THROW(pred_diff_scores({}, {}, both), Error);
}

TEST(PredDiff, ZeroForCleanAndAdditiveOverGroups) {
  const auto ar = TargetModel::build("ar", TargetKind::kAttributeRecognition, {40, 20, 8}, 4);
  Rng rng(16);
  std::vector<Tensor> clean, adv;
  for (int i = 0; i < 5; ++i) {
    clean.push_back(random_image(rng));
    adv.push_back(random_image(rng));
  }
  std::vector<ImagePair> same, moved;
  for (int i = 0; i < 5; ++i) {
    same.push_back({&clean[i], &clean[i]});
    moved.push_back({&adv[i], &clean[i]});
  }
  const std::vector<std::size_t> all{0, 1, 2, 3, 4, 5, 6, 7};
  EXPECT_EQ(pred_diff(ar, same, all), 0.0);
  double parts = 0;
  for (const auto& g : attribute_groups()) parts += pred_diff(ar, moved, g);
  EXPECT_NEAR(parts, pred_diff(ar, moved, all), 1e-12);
  EXPECT_GT(parts, 0.0);
  EXPECT_THROW(pred_diff(ar, std::vector<ImagePair>{}, all), Error);
}

TEST(Render, PerturbationExamples) {
  const double xi = 40.0 / 255.0;
  Tensor eps(Shape{16, 16, 1});
  EXPECT_TRUE(std::all_of(render_perturbation(eps, xi).pixels.begin(),
                          render_perturbation(eps, xi).pixels.end(),
                          [](auto p) { return p == 0; }));
  eps[0] = 0.02;
  eps[1] = 0.005;
  eps[2] = -0.02;
  eps[3] = xi;
  const auto img = render_perturbation(eps, xi);
  EXPECT_EQ(img.width, 16u);
  EXPECT_EQ(img.height, 16u);
  EXPECT_EQ(img.pixels[0], 26);
  EXPECT_EQ(img.pixels[1], 0);
  EXPECT_EQ(img.pixels[2], 26);
  EXPECT_EQ(img.pixels[3], 200);
}

TEST(Render, PgmGrammar) {
  Rng rng(17);
  Tensor eps = test::random_tensor(rng, {16, 16, 1}, -0.15, 0.15);
  const auto img = render_perturbation(eps, 40.0 / 255.0);
  const std::string bytes = encode_pgm(img);
  EXPECT_EQ(bytes.substr(0, 13), "P5\n16 16\n255\n");
  EXPECT_EQ(bytes.size(), 13u + 256u);
  const auto back = parse_pgm(bytes);
  EXPECT_EQ(back.pixels, img.pixels);
  EXPECT_THROW(parse_pgm("P2\n1 1\n255\n\x01"), Error);
  EXPECT_THROW(parse_pgm("P5\n2 2\n255\n\x01"), Error);
  EXPECT_THROW(parse_pgm("P5\n1 1\n15\n\x01"), Error);
}

TEST(Saliency, RangeAndDeterminism) {
  const auto m = build_surrogate(18);
  Rng rng(18);
  const Tensor x = random_image(rng), v = random_image(rng);
  for (Branch b : {Branch::kFr, Branch::kAr}) {
    const Tensor s = saliency_map(m, x, v, b);
    EXPECT_EQ(max_abs(s), 1.0);
    for (double p : s.data()) {
      ASSERT_GE(p, 0.0);
      ASSERT_LE(p, 1.0);
    }
    EXPECT_TRUE(test::bitwise_equal(s, saliency_map(m, x, v, b)));
  }
}

TEST(Saliency, RanksLikeFiniteDifferences) {
  const auto m = build_surrogate(19);
  Rng rng(19);
  for (Branch b : {Branch::kFr, Branch::kAr}) {
    const Tensor x = random_image(rng), v = random_image(rng);
    const Tensor s = saliency_map(m, x, v, b);
    const auto f = branch_objective(m, b, v);
    std::vector<double> fd(x.size());
    constexpr double h = 1e-5;
    for (std::size_t i = 0; i < x.size(); ++i) {
      Tensor up = x, dn = x;
      up[i] += h;
      dn[i] -= h;
      fd[i] = std::abs(loss_value(f, up) - loss_value(f, dn)) / (2 * h);
    }
    EXPECT_GT(spearman({s.data().begin(), s.data().end()}, fd), 0.9);
  }
}
