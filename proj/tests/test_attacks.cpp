#include <gtest/gtest.h>

#include <cmath>

#include "robustbench/robustbench.hpp"

using namespace robustbench;

namespace {

struct LinearFixture {
  ModelConfig cfg = logistic_config({16});
  ParamSet<double> params;
  Tensor<double> x{Shape{8, 16}};
  std::vector<int> labels;

  explicit LinearFixture(std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> w(Shape{16, 1});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-0.5, 0.5);
    params.tensors["linear.w"] = w;
    params.tensors["linear.b"] = Tensor<double>(Shape{1}, rng.uniform(-0.2, 0.2));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform();
    for (std::size_t i = 0; i < 8; ++i) labels.push_back(static_cast<int>(i % 2));
  }

  std::vector<double> losses(const Tensor<double>& batch) const {
    Graph<double> g;
    auto& p = const_cast<ParamSet<double>&>(params);
    const auto l = per_example_loss(cfg, forward(cfg, p, g, g.constant(batch)), labels);
    return l.value().values();
  }
};

ModelConfig small_mlp() {
  ModelConfig cfg;
  cfg.kind = ModelKind::spheres_mlp;
  cfg.input_shape = {6};
  cfg.hidden_width = 12;
  return cfg;
}

double linf(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace

TEST(Fgsm, ZeroEpsilonIsIdentity) {
  LinearFixture f(1);
  EXPECT_EQ(fgsm(f.cfg, f.params, f.x, f.labels, 0.0, 0.0, 1.0), f.x);
}

TEST(Fgsm, LogisticClosedForm) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    LinearFixture f(seed);
    const double eps = 0.05 + 0.01 * static_cast<double>(seed);
    const auto adv = fgsm(f.cfg, f.params, f.x, f.labels, eps, 0.0, 1.0);
    const auto& w = f.params.at("linear.w");
    for (std::size_t e = 0; e < 8; ++e) {
      const double y = f.labels[e];
      for (std::size_t j = 0; j < 16; ++j) {
        const double s = w[j] > 0 ? 1.0 : (w[j] < 0 ? -1.0 : 0.0);
        const double want = std::clamp(f.x[e * 16 + j] - eps * (2 * y - 1) * s, 0.0, 1.0);
        // Equal up to the one-ulp pull that keeps the step inside the ball.
        EXPECT_NEAR(adv[e * 16 + j], want, 1e-15);
        EXPECT_LE(std::abs(adv[e * 16 + j] - f.x[e * 16 + j]), eps);
      }
    }
  }
}

TEST(Fgsm, RejectsTrainModeAndNegativeEpsilon) {
  LinearFixture f(2);
  EXPECT_THROW(fgsm(f.cfg, f.params, f.x, f.labels, 0.1, 0.0, 1.0, NormMode::train), std::invalid_argument);
  EXPECT_THROW(fgsm(f.cfg, f.params, f.x, f.labels, -0.1, 0.0, 1.0), std::invalid_argument);
}

TEST(Pgd, OneStepWithoutInitEqualsFgsm) {
  Rng rng(3);
  const auto cfg = small_mlp();
  for (int trial = 0; trial < 20; ++trial) {
    const auto params = init_params<float>(cfg, rng);
    Tensor<float> x(Shape{5, 6});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.uniform());
    const std::vector<int> y{0, 1, 1, 0, 1};
    AttackConfig a;
    a.kind = AttackKind::pgd;
    a.epsilon = rng.uniform(0.01, 0.5);
    a.step_size = a.epsilon;
    a.iterations = 1;
    a.random_init = false;
    EXPECT_EQ(pgd(cfg, params, x, y, a), fgsm(cfg, params, x, y, a.epsilon, 0.0, 1.0));
  }
}

TEST(Pgd, StaysInBallAndPixelRange) {
  Rng rng(4);
  const auto cfg = small_mlp();
  for (int trial = 0; trial < 200; ++trial) {
    const auto params = init_params<float>(cfg, rng);
    Tensor<float> x(Shape{3, 6});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.uniform());
    AttackConfig a;
    a.kind = AttackKind::pgd;
    a.epsilon = rng.uniform(0.0, 0.6);
    a.step_size = rng.uniform(0.001, 0.3);
    a.iterations = 1 + static_cast<int>(rng.below(10));
    a.random_init = rng.uniform() < 0.5;
    a.seed = rng.next();
    const std::vector<int> y{0, 1, 0};
    const auto adv = pgd(cfg, params, x, y, a);
    EXPECT_LE(linf(adv, x), a.epsilon + 1e-7);
    for (float v : adv.data()) {
      EXPECT_GE(v, 0.0F);
      EXPECT_LE(v, 1.0F);
    }
    EXPECT_EQ(pgd(cfg, params, x, y, a), adv);
  }
}

TEST(Pgd, DominatesFgsmOnLinearModel) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    LinearFixture f(100 + seed);
    AttackConfig a;
    a.kind = AttackKind::pgd;
    a.epsilon = 0.1;
    a.step_size = 0.01;
    a.iterations = 40;
    a.seed = seed;
    const auto pl = f.losses(pgd(f.cfg, f.params, f.x, f.labels, a));
    const auto fl = f.losses(fgsm(f.cfg, f.params, f.x, f.labels, 0.1, 0.0, 1.0));
    for (std::size_t i = 0; i < pl.size(); ++i) EXPECT_GE(pl[i], fl[i] - 1e-12);
  }
}

TEST(Pgd, UnderpoweredFlag) {
  AttackConfig a;
  a.kind = AttackKind::pgd;
  a.epsilon = 0.3;
  a.step_size = 0.01;
  a.iterations = 10;
  EXPECT_TRUE(a.underpowered());
  a.iterations = 40;
  EXPECT_FALSE(a.underpowered());
}

TEST(ConstantOffset, Examples) {
  const Tensor<float> x(Shape{4}, std::vector<float>{0.0F, 0.2F, 0.9F, 1.0F});
  EXPECT_EQ(constant_offset(x, 0.0, 0, 1), x);
  EXPECT_EQ(constant_offset(x, 0.5, 0, 1)[0], 0.5F);
  const auto high = constant_offset(x, 1.0, 0, 1);
  for (float v : high.data()) EXPECT_EQ(v, 1.0F);
  EXPECT_EQ(constant_offset(x, 3.0, 0, 1), constant_offset(x, 1.5, 0, 1));
  const auto low = constant_offset(x, -1.0, 0, 1);
  for (float v : low.data()) EXPECT_EQ(v, 0.0F);
}

TEST(NonExample, ZeroStepsReturnsClippedNoise) {
  ModelConfig cfg;
  cfg.kind = ModelKind::vanilla_cnn;
  cfg.class_count = 10;
  cfg.filters = 2;
  Rng rng(6);
  auto params = init_params<float>(cfg, rng);
  for (auto& [name, t] : params.tensors) t = Tensor<float>(t.shape());
  AttackConfig a;
  a.kind = AttackKind::nonexample_ascent;
  a.iterations = 0;
  a.seed = 42;
  const auto out = nonexample_ascent(cfg, params, {0, 3}, a);
  ASSERT_EQ(out.size(), 2U);
  EXPECT_DOUBLE_EQ(out[0].confidence, 0.1F);
  bool any_positive = false, any_zero = false;
  for (float v : out[1].image.data()) {
    any_positive |= v > 0;
    any_zero |= v == 0;
  }
  EXPECT_TRUE(any_positive && any_zero);
  Rng start = Rng::derived(42, 3);
  EXPECT_EQ(out[1].image[0], std::clamp(static_cast<float>(start.normal(0.0, 0.1)), 0.0F, 1.0F));
}

TEST(NonExample, RaisesTargetProbabilityAndStaysInRange) {
  ModelConfig cfg = small_mlp();
  cfg.class_count = 2;
  Rng rng(7);
  const auto params = init_params<float>(cfg, rng);
  AttackConfig a;
  a.kind = AttackKind::nonexample_ascent;
  a.seed = 5;
  a.iterations = 0;
  const auto before = nonexample_ascent(cfg, params, {0, 1}, a);
  a.iterations = 100;
  const auto after = nonexample_ascent(cfg, params, {0, 1}, a);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_GE(after[i].target_probability, before[i].target_probability);
    for (float v : after[i].image.data()) {
      EXPECT_GE(v, 0.0F);
      EXPECT_LE(v, 1.0F);
    }
  }
  EXPECT_THROW(nonexample_ascent(cfg, params, {2}, a), std::invalid_argument);
}

TEST(NormBound, Values) {
  EXPECT_NEAR(linf_to_l2_bound(784, 0.3), 8.4, 1e-12);
  EXPECT_EQ(linf_to_l2_bound(1, 0.25), 0.25);
  EXPECT_NEAR(linf_to_l2_bound(3072, 8.0 / 255), std::sqrt(3072.0) * 8 / 255, 1e-12);
  EXPECT_THROW(linf_to_l2_bound(0, 0.1), std::invalid_argument);
}
