#include <gtest/gtest.h>

#include <cmath>

#include "quant_laws.hpp"
#include "robustbench/robustbench.hpp"

using namespace robustbench;

namespace {

Tensor<float> vec(std::vector<float> v) {
  const std::size_t n = v.size();
  return Tensor<float>(Shape{n}, std::move(v));
}

std::string joined(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < std::min<std::size_t>(v.size(), 5); ++i) s += v[i] + "; ";
  return s;
}

}  // namespace

TEST(QuantizeWeights, OneBitScalesSignByMeanMagnitude) {
  const auto q = quantize_weights(vec({0.5F, -0.25F, 0.25F}), 1);
  EXPECT_FLOAT_EQ(q[0], 1.0F / 3);
  EXPECT_FLOAT_EQ(q[1], -1.0F / 3);
  EXPECT_FLOAT_EQ(q[2], 1.0F / 3);
}

TEST(QuantizeWeights, OneBitZeroTakesPositiveSign) {
  const auto q = quantize_weights(vec({0.0F, -2.0F}), 1);
  EXPECT_FLOAT_EQ(q[0], 1.0F);
  EXPECT_FLOAT_EQ(q[1], -1.0F);
}

TEST(QuantizeWeights, MultiBitLevelsSpanMaxMagnitude) {
  const auto q = quantize_weights(vec({-2.0F, -0.1F, 0.5F, 2.0F}), 2);
  // Four levels at -2, -2/3, 2/3, 2.
  EXPECT_FLOAT_EQ(q[0], -2.0F);
  EXPECT_NEAR(q[1], -2.0F / 3, 1e-6);
  EXPECT_NEAR(q[2], 2.0F / 3, 1e-6);
  EXPECT_FLOAT_EQ(q[3], 2.0F);
  EXPECT_EQ(quantize_weights(vec({0, 0, 0}), 4), vec({0, 0, 0}));
}

TEST(QuantizeWeights, RejectsBadBitWidths) {
  EXPECT_THROW(quantize_weights(vec({1}), 0), std::invalid_argument);
  EXPECT_THROW(quantize_weights(vec({1}), 33), std::invalid_argument);
  EXPECT_THROW(quantize_activations(vec({1}), 0), std::invalid_argument);
  Rng rng(1);
  EXPECT_THROW(quantize_gradients(vec({1}), 40, rng), std::invalid_argument);
}

TEST(QuantizeActivations, TwoBitExample) {
  const auto q = quantize_activations(vec({-0.1F, 0.4F, 0.9F, 1.7F}), 2);
  EXPECT_EQ(q[0], 0.0F);
  EXPECT_FLOAT_EQ(q[1], 1.0F / 3);
  EXPECT_EQ(q[2], 1.0F);
  EXPECT_EQ(q[3], 1.0F);
}

TEST(QuantizeActivations, TiesRoundUp) {
  EXPECT_EQ(quantize_activations(vec({0.5F}), 1)[0], 1.0F);
  EXPECT_EQ(quantize_activations(vec({0.49F}), 1)[0], 0.0F);
}

TEST(QuantizeActivations, FullPrecisionDoesNotClip) {
  const auto a = vec({-3.0F, 0.25F, 7.0F});
  EXPECT_EQ(quantize_activations(a, 32), a);
}

TEST(QuantizeGradients, ZeroGradientStaysZero) {
  Rng rng(3);
  for (int bits : {1, 2, 8}) EXPECT_EQ(quantize_gradients(vec({0, 0, 0}), bits, rng), vec({0, 0, 0}));
}

TEST(QuantizeGradients, UnbiasedInExpectation) {
  Rng rng(17);
  Tensor<float> g(Shape{24});
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(rng.uniform(-1, 1));
  constexpr int draws = 1000;
  std::vector<double> sum(g.size(), 0.0), sq(g.size(), 0.0);
  for (int d = 0; d < draws; ++d) {
    const auto q = quantize_gradients(g, 6, rng);
    for (std::size_t i = 0; i < g.size(); ++i) {
      sum[i] += q[i];
      sq[i] += double(q[i]) * q[i];
    }
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double mean = sum[i] / draws;
    const double sd = std::sqrt(std::max(sq[i] / draws - mean * mean, 0.0));
    EXPECT_LE(std::abs(mean - g[i]), 3 * sd / std::sqrt(double(draws)) + 1e-7) << "element " << i;
  }
}

TEST(QuantizeGradients, GraphNodeQuantizesOnlyBackward) {
  Rng rng(4);
  Graph<float> g;
  const auto x = g.input(vec({0.3F, -0.7F, 0.1F}));
  const auto y = ad::quantize_gradients(x, 2, &rng);
  EXPECT_EQ(y.value(), x.value());
  g.backward(ad::reduce_sum(ad::multiply(y, g.constant(vec({0.2F, -0.9F, 0.5F})))));
  const auto gx = g.grad(x);
  // Three gradient levels (+-0.9, +-0.3) at two bits with max |g| = 0.9.
  for (float v : gx.data()) {
    const float r = std::abs(v) / 0.3F;
    EXPECT_NEAR(r, std::round(r), 1e-5) << v;
  }
  Graph<float> h;
  const auto z = h.input(vec({1.0F}));
  EXPECT_EQ(ad::quantize_gradients(z, 2, nullptr).id(), z.id());
}

TEST(Prune, ZeroFractionIsIdentity) {
  const auto w = vec({3, -1, 0.5F, -4});
  EXPECT_EQ(prune(w, 0.0), w);
}

TEST(Prune, HalfRemovesSmallestMagnitudes) { EXPECT_EQ(prune(vec({3, -1, 0.5F, -4}), 0.5), vec({3, 0, 0, -4})); }

TEST(Prune, RejectsFractionOutsideRange) {
  EXPECT_THROW(prune(vec({1}), 1.0), std::invalid_argument);
  EXPECT_THROW(prune(vec({1}), -0.1), std::invalid_argument);
}

TEST(Laws, Idempotence) {
  const auto bad = quant_laws::idempotence();
  EXPECT_TRUE(bad.empty()) << bad.size() << " violations: " << joined(bad);
}

TEST(Laws, Monotonicity) {
  const auto bad = quant_laws::monotonicity();
  EXPECT_TRUE(bad.empty()) << joined(bad);
}

TEST(Laws, LevelCardinality) {
  const auto bad = quant_laws::level_cardinality();
  EXPECT_TRUE(bad.empty()) << joined(bad);
}

TEST(Laws, StraightThroughPassthrough) {
  const auto bad = quant_laws::ste_passthrough();
  EXPECT_TRUE(bad.empty()) << joined(bad);
}

TEST(Laws, FullPrecisionIsBitExact) {
  const auto bad = quant_laws::full_precision_exact();
  EXPECT_TRUE(bad.empty()) << joined(bad);
}
