#include <gtest/gtest.h>

#include "gradcheck_suite.hpp"
#include "sibling/tensor.hpp"

using namespace sibling;
using sibling::test::random_tensor;

namespace {

Tensor eval(const std::function<Var(Tape&)>& f) {
  Tape t;
  return f(t).value();
}

}  // namespace

TEST(TensorOps, ReluExample) {
  const Tensor y = eval([](Tape& t) { return relu(t.constant(Tensor::vector({-1, 0, 2}))); });
  EXPECT_EQ(y, Tensor::vector({0, 0, 2}));
}

TEST(TensorOps, L2NormalizeExample) {
  const Tensor y =
      eval([](Tape& t) { return l2_normalize(t.constant(Tensor::vector({3, 4}))); });
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
}

TEST(TensorOps, MatmulExample) {
  const Tensor y = eval([](Tape& t) {
    return matmul(t.constant(Tensor::matrix(2, 2, {1, 2, 3, 4})),
                  t.constant(Tensor::matrix(2, 1, {1, 1})));
  });
  EXPECT_EQ(y, Tensor::matrix(2, 1, {3, 7}));
}

TEST(TensorOps, CosineExamples) {
  auto cos = [](std::vector<double> a, std::vector<double> b) {
    return eval([&](Tape& t) {
             return cosine_similarity(t.constant(Tensor::vector(a)),
                                      t.constant(Tensor::vector(b)));
           })
        .item();
  };
  EXPECT_DOUBLE_EQ(cos({1, 0}, {1, 0}), 1.0);
  EXPECT_DOUBLE_EQ(cos({1, 0}, {0, 1}), 0.0);
  EXPECT_DOUBLE_EQ(cos({1, 0}, {-1, 0}), -1.0);
}

TEST(TensorOps, CosineSymmetricAndScaleInvariant) {
  Rng rng(5);
  for (int k = 0; k < 50; ++k) {
    const Tensor a = random_tensor(rng, {9}, -2, 2);
    const Tensor b = random_tensor(rng, {9}, -2, 2);
    const double lambda = rng.uniform(0.01, 50.0);
    Tensor la = a;
    for (double& v : la.data()) v *= lambda;
    Tape t;
    const double ab = cosine_similarity(t.constant(a), t.constant(b)).value().item();
    const double ba = cosine_similarity(t.constant(b), t.constant(a)).value().item();
    const double lab = cosine_similarity(t.constant(la), t.constant(b)).value().item();
    EXPECT_NEAR(ab, ba, 1e-12);
    EXPECT_NEAR(ab, lab, 1e-12);
    EXPECT_LE(std::abs(ab), 1.0 + 1e-12);
  }
}

TEST(TensorOps, BroadcastBiasAddsPerRow) {
  const Tensor y = eval([](Tape& t) {
    return add(t.constant(Tensor::matrix(2, 2, {1, 2, 3, 4})),
               t.constant(Tensor::vector({10, 20})));
  });
  EXPECT_EQ(y, Tensor::matrix(2, 2, {11, 22, 13, 24}));
}

TEST(TensorOps, LossValues) {
  // bce(0, y) = log 2 for any y; softmax_ce of equal logits = log(classes).
  Tape t;
  const double bce =
      bce_with_logits(t.constant(Tensor::matrix(1, 2, {0, 0})), Tensor::matrix(1, 2, {1, 0}))
          .value()
          .item();
  EXPECT_NEAR(bce, std::log(2.0), 1e-15);
  const double ce =
      softmax_cross_entropy(t.constant(Tensor::matrix(2, 4, std::vector<double>(8, 0.3))), {0, 3})
          .value()
          .item();
  EXPECT_NEAR(ce, std::log(4.0), 1e-14);
}

TEST(TensorErrors, ShapeMismatchNamesOpAndShapes) {
  Tape t;
  try {
    add(t.constant(Tensor(Shape{2, 3})), t.constant(Tensor(Shape{3, 2})));
    FAIL() << "expected a shape error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShape);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3,2]"), std::string::npos) << msg;
  }
  EXPECT_THROW(matmul(t.constant(Tensor(Shape{2, 3})), t.constant(Tensor(Shape{2, 3}))), Error);
  EXPECT_THROW(dot(t.constant(Tensor(Shape{2})), t.constant(Tensor(Shape{3}))), Error);
}

TEST(TensorErrors, NormalizeNearZeroIsDomainError) {
  Tape t;
  try {
    l2_normalize(t.constant(Tensor::vector({0.0, 1e-14})));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDomain);
  }
  EXPECT_THROW(cosine_similarity(t.constant(Tensor::vector({0, 0})),
                                 t.constant(Tensor::vector({1, 0}))),
               Error);
}

TEST(TensorErrors, DataLengthMustMatchShape) {
  EXPECT_THROW(Tensor(Shape{2, 2}, {1, 2, 3}), Error);
  EXPECT_THROW(Tensor(Shape{0, 2}), Error);
}

TEST(Backward, SumOfSquares) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1, 2}));
  t.backward(sum(mul(x, x)));
  EXPECT_EQ(t.grad(x), Tensor::vector({2, 4}));
}

TEST(Backward, CosineWithItselfHasZeroGradient) {
  Rng rng(3);
  for (int k = 0; k < 20; ++k) {
    Tape t;
    Var x = t.leaf(random_tensor(rng, {7}, -2, 2));
    t.backward(cosine_similarity(x, x));
    EXPECT_LT(max_abs(t.grad(x)), 1e-12);
  }
}

TEST(Backward, MatmulAgainstFiniteDifferences) {
  Rng rng(11);
  const Tensor b = random_tensor(rng, {3, 3}, -1, 1);
  const Tensor a = random_tensor(rng, {3, 3}, -1, 1);
  ScalarFn f = [&](Tape& t, Var x) { return sum(matmul(x, t.constant(b))); };
  EXPECT_LT(finite_diff_check(f, a, 1e-5), 1e-6);
}

TEST(Backward, NonScalarRootIsRejected) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(t.backward(relu(x)), Error);
}

TEST(Backward, UnreachableLeafGetsZeroGradient) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1, 2}));
  Var unused = t.leaf(Tensor::vector({5, 6, 7}));
  t.backward(sum(x));
  EXPECT_EQ(t.grad(unused), Tensor(Shape{3}));
}

TEST(Backward, SharedSubexpressionAccumulates) {
  // y = x*x + 3x: dy/dx = 2x + 3
  Tape t;
  Var x = t.leaf(Tensor::vector({2.0}));
  t.backward(sum(add(mul(x, x), scale(x, 3.0))));
  EXPECT_EQ(t.grad(x)[0], 7.0);
}

TEST(Backward, RepeatedRunsAreBitwiseIdentical) {
  Rng rng(8);
  const Tensor x0 = random_tensor(rng, {4, 6}, -2, 2);
  const Tensor w = random_tensor(rng, {6, 3}, -1, 1);
  auto run = [&] {
    Tape t;
    Var x = t.leaf(x0);
    Var y = l2_normalize(sigmoid(matmul(x, t.constant(w))));
    t.backward(mean(y));
    return t.grad(x);
  };
  EXPECT_TRUE(test::bitwise_equal(run(), run()));
}

TEST(FiniteDiffCheck, Examples) {
  Rng rng(2);
  const Tensor x = random_tensor(rng, {8}, -2, 2);
  ScalarFn squares = [](Tape&, Var v) { return sum(mul(v, v)); };
  EXPECT_LT(finite_diff_check(squares, x, 1e-5), 1e-6);
  ScalarFn constant = [](Tape& t, Var) { return t.constant(Tensor::scalar(4.0)); };
  EXPECT_EQ(finite_diff_check(constant, x, 1e-5), 0.0);
}

class OpGradient : public ::testing::TestWithParam<test::GradCase> {};

TEST_P(OpGradient, HundredRandomTrials) {
  EXPECT_LT(test::worst_error(GetParam(), 100, 1234), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(test::op_cases()),
                         [](const auto& info) { return info.param.name; });
