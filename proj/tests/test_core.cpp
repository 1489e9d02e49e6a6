#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "robustbench/robustbench.hpp"

using namespace robustbench;

TEST(Tensor, RejectsDataOfWrongLength) {
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
  EXPECT_NO_THROW(Tensor<float>(Shape{0, 3}));
}

TEST(Tensor, RowsAndGather) {
  const Tensor<float> t(Shape{3, 2}, std::vector<float>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rows(1, 3).values(), (std::vector<float>{3, 4, 5, 6}));
  const std::vector<std::size_t> idx{2, 0};
  EXPECT_EQ(t.gather_rows(idx).values(), (std::vector<float>{5, 6, 1, 2}));
}

TEST(Primitives, ReluExample) {
  Graph<float> g;
  const auto y = ad::relu(g.constant(Tensor<float>(Shape{3}, std::vector<float>{-1, 0, 2})));
  EXPECT_EQ(y.value().values(), (std::vector<float>{0, 0, 2}));
}

TEST(Primitives, ConvSameStrideTwoHalvesMnist) {
  Graph<float> g;
  const auto x = g.constant(Tensor<float>(Shape{1, 28, 28, 1}, 0.5F));
  const auto k = g.constant(Tensor<float>(Shape{8, 8, 1, 4}, 0.1F));
  EXPECT_EQ(ad::conv2d(x, k, 2, Padding::same).shape(), (Shape{1, 14, 14, 4}));
  EXPECT_EQ(ad::conv2d(x, k, 1, Padding::valid).shape(), (Shape{1, 21, 21, 4}));
  EXPECT_EQ(ad::conv2d(x, k, 3, Padding::valid).shape(), (Shape{1, 7, 7, 4}));
  EXPECT_EQ(ad::conv2d(x, k, 3, Padding::same).shape(), (Shape{1, 10, 10, 4}));
}

TEST(Primitives, ConvMatchesDirectSum) {
  Rng rng(3);
  const auto xt = gradcheck::random_tensor(rng, {1, 5, 5, 2});
  const auto kt = gradcheck::random_tensor(rng, {3, 3, 2, 2});
  Graph<double> g;
  const auto y = ad::conv2d(g.constant(xt), g.constant(kt), 2, Padding::same).value();
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 2}));
  // SAME with stride 2 on 5: total padding 2, one row/column on each side.
  for (std::size_t oy = 0; oy < 3; ++oy) {
    for (std::size_t ox = 0; ox < 3; ++ox) {
      for (std::size_t o = 0; o < 2; ++o) {
        double want = 0;
        for (std::size_t ky = 0; ky < 3; ++ky) {
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const long iy = static_cast<long>(oy * 2 + ky) - 1, ix = static_cast<long>(ox * 2 + kx) - 1;
            if (iy < 0 || ix < 0 || iy >= 5 || ix >= 5) continue;
            for (std::size_t c = 0; c < 2; ++c) {
              want += xt[(static_cast<std::size_t>(iy) * 5 + static_cast<std::size_t>(ix)) * 2 + c] *
                      kt[((ky * 3 + kx) * 2 + c) * 2 + o];
            }
          }
        }
        EXPECT_NEAR(y[(oy * 3 + ox) * 2 + o], want, 1e-12);
      }
    }
  }
}

TEST(Primitives, SoftmaxUniformAndNormalized) {
  Graph<float> g;
  const auto y = ad::softmax(g.constant(Tensor<float>(Shape{1, 4})));
  for (float v : y.value().data()) EXPECT_FLOAT_EQ(v, 0.25F);
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = gradcheck::random_tensor(rng, {3, 7}, -30, 30);
    Graph<double> gd;
    const auto p = ad::softmax(gd.constant(x)).value();
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        const double v = p[r * 7 + c];
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Primitives, ClipIsIdempotent) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Graph<float> g;
    const auto x = g.constant(gradcheck::random_tensor(rng, {50}, -3, 3).cast<float>());
    const auto once = ad::clip(x, -1.0F, 1.0F);
    const auto twice = ad::clip(once, -1.0F, 1.0F);
    EXPECT_EQ(once.value(), twice.value());
  }
}

TEST(Primitives, ShapeMismatchNamesOpAndShapes) {
  Graph<float> g;
  const auto a = g.constant(Tensor<float>(Shape{2, 3}));
  const auto b = g.constant(Tensor<float>(Shape{4, 2}));
  try {
    ad::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,2]"), std::string::npos);
  }
  EXPECT_THROW(ad::add(a, b), ShapeError);
}

TEST(Primitives, StableCrossEntropyAtSaturatedLogits) {
  Graph<float> g;
  const auto z = g.constant(Tensor<float>(Shape{2, 1}, std::vector<float>{100.0F, -100.0F}));
  const auto l = ad::sigmoid_cross_entropy(z, Tensor<float>(Shape{2, 1}, std::vector<float>{0, 1}));
  EXPECT_NEAR(l.value()[0], 100.0F, 1e-4);
  EXPECT_NEAR(l.value()[1], 100.0F, 1e-4);
  const auto s = ad::softmax_cross_entropy(g.constant(Tensor<float>(Shape{1, 2}, std::vector<float>{1000, 0})),
                                           std::vector<int>{1});
  EXPECT_NEAR(s.value()[0], 1000.0F, 1e-2);
}

TEST(Backward, RejectsNonScalarLoss) {
  Graph<double> g;
  const auto x = g.input(Tensor<double>(Shape{3}));
  EXPECT_THROW(g.backward(ad::relu(x)), ShapeError);
}

TEST(Backward, SumGivesOnes) {
  Graph<double> g;
  const auto x = g.input(Tensor<double>(Shape{2, 3}, 0.7));
  g.backward(ad::reduce_sum(x));
  const auto grad = g.grad(x);
  for (double v : grad.data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, ReturnsNamedParameterGradients) {
  Graph<double> g;
  const auto w = g.parameter("layer.w", Tensor<double>(Shape{2}, 3.0));
  const auto c = g.parameter("layer.frozen", Tensor<double>(Shape{2}, 1.0), false);
  const auto grads = g.backward(ad::reduce_sum(ad::multiply(w, c)));
  ASSERT_EQ(grads.size(), 1U);
  EXPECT_EQ(grads.at("layer.w").values(), (std::vector<double>{1.0, 1.0}));
}

TEST(Backward, LogisticGradientClosedForm) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = gradcheck::random_tensor(rng, {1, 9}, 0, 1);
    const auto w = gradcheck::random_tensor(rng, {9, 1});
    const double y = trial % 2;
    Graph<double> g;
    const auto wv = g.parameter("w", w);
    const auto loss = ad::reduce_sum(
        ad::sigmoid_cross_entropy(ad::matmul(g.constant(x), wv), Tensor<double>(Shape{1, 1}, y)));
    const auto grads = g.backward(loss);
    double z = 0;
    for (std::size_t i = 0; i < 9; ++i) z += x[i] * w[i];
    const double s = 1.0 / (1.0 + std::exp(-z));
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(grads.at("w")[i], (s - y) * x[i], 1e-12);
  }
}

TEST(Backward, SignHasZeroGradient) {
  Graph<double> g;
  const auto x = g.input(Tensor<double>(Shape{3}, std::vector<double>{-1, 0.5, 2}));
  g.backward(ad::reduce_sum(ad::sign(x)));
  const auto grad = g.grad(x);
  for (double v : grad.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, BatchNormTrainUpdatesRunningStats) {
  Tensor<float> mean(Shape{1}), var(Shape{1}, 1.0F);
  Graph<float> g;
  const auto x = g.constant(Tensor<float>(Shape{4, 1}, std::vector<float>{1, 2, 3, 4}));
  const auto gamma = g.constant(Tensor<float>(Shape{1}, 1.0F));
  const auto beta = g.constant(Tensor<float>(Shape{1}));
  ad::batch_norm(x, gamma, beta, ad::BatchNormStats<float>{&mean, &var}, ad::NormMode::train);
  EXPECT_NEAR(mean[0], 0.1F * 2.5F, 1e-6);
  EXPECT_NEAR(var[0], 0.9F + 0.1F * 1.25F, 1e-6);
  ad::batch_norm(x, gamma, beta, ad::BatchNormStats<float>{&mean, &var}, ad::NormMode::train_frozen);
  EXPECT_NEAR(mean[0], 0.25F, 1e-6);
}

class GradientCheck : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
  const auto cases = gradcheck::primitive_cases();
  const auto& c = cases.at(GetParam());
  Rng rng(1000 + GetParam());
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = gradcheck::check(c.loss, c.make_inputs(rng));
    EXPECT_EQ(r.failures, 0U) << c.name << " trial " << trial << ": " << r.first_failure;
  }
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, GradientCheck,
                         ::testing::Range<std::size_t>(0, gradcheck::primitive_cases().size()),
                         [](const auto& info) { return gradcheck::primitive_cases().at(info.param).name; });
