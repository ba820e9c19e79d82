#include <gtest/gtest.h>

#include <filesystem>

#include "gradcheck_suite.hpp"
#include "sibling/container.hpp"
#include "sibling/eval.hpp"
#include "sibling/models.hpp"

using namespace sibling;
using sibling::test::random_image;

namespace {

bool same_parameters(const SurrogateModel& a, const SurrogateModel& b) {
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first || !(*pa[i].second == *pb[i].second)) return false;
  }
  return true;
}

double mean_score(const FaceRecognizer& m, const Dataset& ds, const PairSet& ps) {
  const auto s = pair_scores(m, ds, ps);
  double total = 0.0;
  for (double v : s) total += v;
  return total / double(s.size());
}

// One trained world shared by the slower tests.
struct Trained {
  Dataset ds = make_dataset(7, 64, 20);
  SurrogateModel surrogate = build_surrogate(8);
  TargetModel fr_a = TargetModel::build("fr_target_a", TargetKind::kFaceRecognition,
                                        {96, 48, 24}, 10);
  TargetModel fr_b = TargetModel::build("fr_target_b", TargetKind::kFaceRecognition,
                                        {160, 80, 40}, 11);
  TargetModel ar = TargetModel::build("ar_target", TargetKind::kAttributeRecognition,
                                      {96, 48, 8}, 12);
  TrainResult surrogate_log;

  Trained() {
    TrainOptions opt;
    opt.seed = 7;
    surrogate_log = train_surrogate(surrogate, ds, opt);
    train_target(fr_a, ds, opt);
    train_target(fr_b, ds, opt);
    train_target(ar, ds, opt);
  }

  static const Trained& get() {
    static const Trained t;
    return t;
  }

  PairSet heldout(PairKind kind) const {
    return sample_pairs(ds, 400, kind, 21, ds.heldout_ids);
  }
};

}  // namespace

TEST(BuildSurrogate, SameSeedSameParameters) {
  EXPECT_TRUE(same_parameters(build_surrogate(3), build_surrogate(3)));
  EXPECT_FALSE(same_parameters(build_surrogate(3), build_surrogate(4)));
}

TEST(BuildSurrogate, BranchOutputShapes) {
  const auto m = build_surrogate(1);
  Rng rng(1);
  const Tensor x = random_image(rng);
  const Tensor e = fr_embed(m, x);
  EXPECT_EQ(e.size(), 32u);
  double n2 = 0.0;
  for (double v : e.data()) n2 += v * v;
  EXPECT_NEAR(std::sqrt(n2), 1.0, 1e-9);
  Tape t;
  const Tensor logits = m.attribute_logits(t, t.borrow(x)).value();
  EXPECT_EQ(logits.size(), 8u);
  EXPECT_TRUE(logits.all_finite());
  EXPECT_EQ(ar_features(m, x).size(), 16u);
}

TEST(BuildSurrogate, BranchesShareTheEncoder) {
  auto m = build_surrogate(2);
  Rng rng(2);
  const Tensor x = random_image(rng);
  const Tensor f0 = fr_embed(m, x);
  const Tensor a0 = ar_features(m, x);
  // Bump every weight of the first encoder layer; both branches must move.
  for (auto& [name, p] : m.parameters()) {
    if (name == "P.0.weight") {
      for (double& v : p->data()) v += 0.01;
    }
  }
  EXPECT_FALSE(fr_embed(m, x) == f0);
  EXPECT_FALSE(ar_features(m, x) == a0);
}

TEST(Inference, EmbeddingProperties) {
  const auto m = build_surrogate(5);
  Rng rng(5);
  for (int k = 0; k < 20; ++k) {
    const Tensor x = random_image(rng);
    const Tensor e1 = fr_embed(m, x);
    EXPECT_EQ(e1, fr_embed(m, x));
    Tape t;
    EXPECT_NEAR(cosine_similarity(t.constant(e1), t.constant(e1)).value().item(), 1.0, 1e-12);
    const Tensor scores = ar_predict(m, x);
    for (double p : scores.data()) {
      EXPECT_GT(p, 0.0);
      EXPECT_LT(p, 1.0);
    }
  }
}

TEST(Inference, ArFeaturesAreDifferentiable) {
  const auto m = build_surrogate(6);
  Rng rng(6);
  const Tensor x = random_image(rng);
  const Tensor w = test::random_tensor(rng, {1, 16}, 0.5, 1.5);
  ScalarFn f = [&](Tape& t, Var v) { return dot(m.ar_features(t, v), t.constant(w)); };
  EXPECT_LT(finite_diff_check(f, x, 1e-5), 1e-4);
}

TEST(Training, ZeroEpochsLeavesParametersUnchanged) {
  const Dataset ds = make_dataset(1, 8, 3);
  auto m = build_surrogate(1);
  TrainOptions opt;
  opt.epochs = 0;
  const auto log = train_surrogate(m, ds, opt);
  EXPECT_TRUE(log.epoch_loss.empty());
  EXPECT_TRUE(same_parameters(m, build_surrogate(1)));
}

TEST(Training, LossHalves) {
  const auto& log = Trained::get().surrogate_log.epoch_loss;
  ASSERT_EQ(log.size(), 30u);
  EXPECT_LT(log.back(), 0.5 * log.front());
}

TEST(Training, ParametersFinite) {
  const auto& tr = Trained::get();
  for (const auto& [name, p] : tr.surrogate.parameters()) {
    EXPECT_TRUE(p->all_finite()) << name;
  }
}

TEST(Training, GenuineImpostorSeparation) {
  const auto& tr = Trained::get();
  const auto gen = tr.heldout(PairKind::kGenuine);
  const auto imp = tr.heldout(PairKind::kImpostor);
  for (const FaceRecognizer* m : std::initializer_list<const FaceRecognizer*>{
           &tr.surrogate, &tr.fr_a, &tr.fr_b}) {
    EXPECT_GT(mean_score(*m, tr.ds, gen) - mean_score(*m, tr.ds, imp), 0.3)
        << m->model_id();
  }
}

// The two FR targets must not be the same function in disguise: their
// similarity scores over the same pairs differ.
TEST(Training, TargetsDisagree) {
  const auto& tr = Trained::get();
  const auto pairs = sample_pairs(tr.ds, 400, PairKind::kImpostor, 5, tr.ds.heldout_ids);
  const auto sa = pair_scores(tr.fr_a, tr.ds, pairs);
  const auto sb = pair_scores(tr.fr_b, tr.ds, pairs);
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    ma += sa[i] / double(sa.size());
    mb += sb[i] / double(sb.size());
  }
  double cab = 0, caa = 0, cbb = 0;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    cab += (sa[i] - ma) * (sb[i] - mb);
    caa += (sa[i] - ma) * (sa[i] - ma);
    cbb += (sb[i] - mb) * (sb[i] - mb);
  }
  EXPECT_LT(cab / std::sqrt(caa * cbb), 0.99);
}

TEST(Training, AttributeAccuracyOnHeldOut) {
  const auto& tr = Trained::get();
  for (const AttributeRecognizer* m :
       std::initializer_list<const AttributeRecognizer*>{&tr.surrogate, &tr.ar}) {
    std::size_t correct = 0, total = 0;
    for (std::size_t i : tr.ds.sample_indices(tr.ds.heldout_ids)) {
      const auto& s = tr.ds.samples[i];
      const Tensor p = ar_predict(*m, s.image);
      for (std::size_t j = 0; j < kNumAttributes; ++j, ++total) {
        correct += (p[j] > 0.5) == (s.attributes[j] == 1);
      }
    }
    EXPECT_GT(double(correct) / double(total), 0.8);
  }
}

TEST(Weights, RoundTripGivesIdenticalOutputs) {
  const auto& tr = Trained::get();
  const auto dir = std::filesystem::temp_directory_path() / "sibling_test_weights";
  save_weights(tr.surrogate, dir / "s.sibw");
  save_weights(tr.fr_a, dir / "a.sibw");
  const auto s2 = load_surrogate(dir / "s.sibw");
  const auto a2 = load_target(dir / "a.sibw", "fr_target_a");
  EXPECT_TRUE(same_parameters(tr.surrogate, s2));
  Rng rng(9);
  for (int k = 0; k < 100; ++k) {
    const Tensor x = random_image(rng);
    ASSERT_EQ(fr_embed(tr.surrogate, x), fr_embed(s2, x));
    ASSERT_EQ(ar_predict(tr.surrogate, x), ar_predict(s2, x));
    ASSERT_EQ(fr_embed(tr.fr_a, x), fr_embed(a2, x));
  }
  std::filesystem::remove_all(dir);
}

TEST(Container, ByteLayout) {
  const std::string b = encode_container({{"ab", Tensor::vector({1.0})}});
  const std::string expect = std::string("SIBW") + std::string("\x01\0\0\0", 4) +
                             std::string("\x01\0\0\0", 4) + std::string("\x02\0", 2) +
                             "ab" + std::string("\x01", 1) + std::string("\x01\0\0\0", 4) +
                             std::string("\0\0\0\0\0\0\xf0\x3f", 8);
  EXPECT_EQ(b, expect);
}

TEST(Container, CorruptionErrors) {
  const std::string good =
      encode_container(to_tensors(build_surrogate(1, SurrogateArch::toy())));
  auto message = [](const std::string& bytes) {
    try {
      decode_container(bytes);
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kFormat);
      return std::string(e.what());
    }
    return std::string("no error");
  };
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_NE(message(bad).find("bad magic"), std::string::npos);
  bad = good;
  bad[4] = 2;
  EXPECT_NE(message(bad).find("version mismatch"), std::string::npos);
  EXPECT_NE(message(good.substr(0, good.size() - 3)).find("unexpected end"), std::string::npos);
  EXPECT_NE(message(good + "x").find("trailing"), std::string::npos);
  EXPECT_NO_THROW(surrogate_from_tensors(decode_container(good)));
}

TEST(Container, WrongModelKindRejected) {
  const auto ts = to_tensors(build_surrogate(1, SurrogateArch::toy()));
  EXPECT_THROW(target_from_tensors(ts, "x"), Error);
}
