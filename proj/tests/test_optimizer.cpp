#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "hysense/optimizer.hpp"
#include "hysense/rng.hpp"
#include "oracles.hpp"

using namespace hysense;

namespace {

void step_one(AdaBound<double>& opt, std::vector<double>& x, const std::vector<double>& g,
              std::string_view name = "x") {
  const std::vector<ParamView<double>> views{{name, x, g}};
  opt.step(std::span<const ParamView<double>>(views));
}

}  // namespace

TEST(BoundSchedule, FirstStepValues) {
  AdaBoundConfig c;
  c.lr2 = 0.01;
  c.beta2 = 0.999;
  const auto b = bound_schedule(1, c);
  // Oracle: direct evaluation, 0.01 (1 - 1/1.001) and 0.01 (1 + 1/0.001).
  EXPECT_NEAR(b.lower, 0.01 * (1 - 1 / 1.001), 1e-18);
  EXPECT_NEAR(b.lower, 9.990e-6, 1e-9);
  EXPECT_NEAR(b.upper, 10.01, 1e-12);
}

TEST(BoundSchedule, ConvergesToFinalRate) {
  AdaBoundConfig c;
  const auto b = bound_schedule(1'000'000'000'000ULL, c);
  EXPECT_NEAR(b.lower, c.lr2, 1e-10);
  EXPECT_NEAR(b.upper, c.lr2, 1e-10);
  EXPECT_THROW(bound_schedule(0, c), ConfigError);
}

TEST(BoundSchedule, MonotoneSweep) {
  AdaBoundConfig c;
  auto prev = bound_schedule(1, c);
  for (std::uint64_t t = 1; t <= 1'000'000; ++t) {
    const auto b = bound_schedule(t, c);
    ASSERT_LT(b.lower, b.upper) << t;
    ASSERT_GE(b.lower, prev.lower) << t;
    ASSERT_LE(b.upper, prev.upper) << t;
    ASSERT_LE(b.upper - b.lower, prev.upper - prev.lower) << t;
    prev = b;
  }
}

TEST(AdaBound, ZeroGradientAtZeroStateLeavesParameters) {
  AdaBound<double> opt(AdaBoundConfig{});
  std::vector<double> x{1.0, -2.0, 0.5};
  const std::vector<double> g(3, 0.0);
  step_one(opt, x, g);
  EXPECT_EQ(x, (std::vector<double>{1.0, -2.0, 0.5}));
  EXPECT_EQ(opt.step_count(), 1u);
}

TEST(AdaBound, ScalarAdamLimitStep) {
  AdaBoundConfig c;
  c.mode = BoundMode::adam_limit;
  AdaBound<double> opt(c);
  std::vector<double> x{1.0};
  step_one(opt, x, {0.5});
  // Oracle: m_hat = 0.5, v_hat = 0.25, step = 0.001 * 0.5 / (0.5 + 1e-8).
  const double expected = 1.0 - 0.001 * 0.5 / (std::sqrt(0.25) + 1e-8 / std::sqrt(1 - 0.999));
  EXPECT_NEAR(x[0], expected, 1e-15);
  EXPECT_NEAR(x[0], 1.0 - 0.000999, 1e-6);
}

TEST(AdaBound, AdamLimitMatchesReferenceAdam) {
  AdaBoundConfig c;
  c.mode = BoundMode::adam_limit;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    AdaBound<double> opt(c);
    oracle::ReferenceAdam ref{c.lr1, c.beta1, c.beta2, c.epsilon, {}, {}};
    std::vector<double> x(16), y;
    for (auto& v : x) v = rng.normal();
    y = x;
    for (int step = 0; step < 100; ++step) {
      std::vector<double> g(x.size());
      for (auto& v : g) v = rng.normal() * (step % 7 == 0 ? 10.0 : 0.1);
      step_one(opt, x, g);
      ref.step(y, g);
      for (std::size_t i = 0; i < x.size(); ++i) ASSERT_NEAR(x[i], y[i], 1e-12) << seed << " " << step;
    }
  }
}

TEST(AdaBound, SgdLimitStepsAreExactlyRateTimesMomentum) {
  AdaBoundConfig c;
  c.mode = BoundMode::sgd_limit;
  c.lr2 = 0.05;
  AdaBound<double> opt(c);
  Rng rng(3);
  std::vector<double> x(8), m(8, 0.0);
  for (auto& v : x) v = rng.normal();
  for (int step = 0; step < 50; ++step) {
    std::vector<double> g(8);
    for (auto& v : g) v = rng.normal();
    const auto before = x;
    step_one(opt, x, g);
    const auto& moments = *opt.moments("x");
    for (std::size_t i = 0; i < 8; ++i) {
      m[i] = c.beta1 * m[i] + (1 - c.beta1) * g[i];
      EXPECT_EQ(moments.m[i], m[i]);
      EXPECT_EQ(x[i], before[i] - c.lr2 * moments.m[i]);
    }
  }
}

TEST(AdaBound, NanGradientAbortsWithoutTouchingState) {
  AdaBound<double> opt(AdaBoundConfig{});
  std::vector<double> a{1.0, 2.0}, b{3.0};
  const std::vector<double> ga{0.1, 0.2}, gb{0.3};
  {
    const std::vector<ParamView<double>> views{{"a", a, ga}, {"b", b, gb}};
    opt.step(std::span<const ParamView<double>>(views));
  }
  const auto a0 = a, b0 = b;
  const auto ma = opt.moments("a")->m;
  const std::vector<double> bad{std::numeric_limits<double>::quiet_NaN()};
  const std::vector<ParamView<double>> views{{"a", a, ga}, {"b", b, bad}};
  EXPECT_THROW(opt.step(std::span<const ParamView<double>>(views)), NumericError);
  EXPECT_EQ(a, a0);
  EXPECT_EQ(b, b0);
  EXPECT_EQ(opt.moments("a")->m, ma);
  EXPECT_EQ(opt.step_count(), 1u);
}

TEST(AdaBound, SecondMomentStaysNonNegative) {
  AdaBound<double> opt(AdaBoundConfig{});
  Rng rng(4);
  std::vector<double> x(32, 0.0);
  for (int step = 0; step < 500; ++step) {
    std::vector<double> g(32);
    for (auto& v : g) v = rng.normal() * std::exp(rng.uniform(-20, 5));
    step_one(opt, x, g);
    for (double v : opt.moments("x")->v) ASSERT_GE(v, 0.0);
  }
}

TEST(AdaBound, OneStepDescendsOnConvexQuadratic) {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    Rng rng(seed);
    std::vector<double> a(10), x(10);
    for (auto& v : a) v = rng.uniform(0.5, 2.0);
    for (auto& v : x) v = rng.normal();
    auto f = [&] {
      double s = 0;
      for (std::size_t i = 0; i < x.size(); ++i) s += 0.5 * a[i] * x[i] * x[i];
      return s;
    };
    std::vector<double> g(10);
    for (std::size_t i = 0; i < 10; ++i) g[i] = a[i] * x[i];
    const double before = f();
    AdaBound<double> opt(AdaBoundConfig{});
    step_one(opt, x, g);
    EXPECT_LT(f(), before) << seed;
  }
}

TEST(AdaBound, FrozenModelParametersAreUntouched) {
  ModelConfig c = ModelConfig::desk();
  c.input_height = c.input_width = 32;
  c.blocks_per_module = 1;
  auto m = build_model<double>(ModelKind::proposed, c, 1);
  m.freeze({"stem"});
  Rng rng(5);
  Tensor<double> x({2, 3, 32, 32});
  for (auto& v : x.data()) v = rng.uniform();
  const auto frozen_before = *m.find("stem.1.conv.weight")->value;
  const auto free_before = *m.find("module1.0.conv1.conv.weight")->value;
  const auto logits = m.forward(x, Mode::training);
  const std::vector<int> labels{1, 2};
  m.backward(softmax_cross_entropy(logits, labels).grad_logits);
  AdaBound<double> opt(AdaBoundConfig{});
  opt.step(m);
  EXPECT_EQ(*m.find("stem.1.conv.weight")->value, frozen_before);
  EXPECT_NE(*m.find("module1.0.conv1.conv.weight")->value, free_before);
  EXPECT_EQ(opt.moments("stem.1.conv.weight"), nullptr);
}

TEST(AdaBoundConfig, RejectsInvalidValues) {
  AdaBoundConfig c;
  c.lr1 = 0;
  EXPECT_THROW(AdaBound<double>{c}, ConfigError);
  c = {};
  c.beta2 = 1.0;
  EXPECT_THROW(AdaBound<double>{c}, ConfigError);
  c = {};
  c.epsilon = -1;
  EXPECT_THROW(AdaBound<double>{c}, ConfigError);
}
