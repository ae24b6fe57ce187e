#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "genrec/autograd.hpp"
#include "genrec/optim.hpp"
#include "gradcheck.hpp"

using namespace genrec;
using namespace genrec::nn;

TEST(GradCheck, EveryOpFloat) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& r : gradcheck::check_all_ops<float>(seed, 1e-3)) {
      EXPECT_LE(r.max_error, 1e-2) << r.worst << " seed " << seed;
    }
  }
}

TEST(GradCheck, EveryOpDouble) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& r : gradcheck::check_all_ops<double>(seed, 1e-6)) {
      EXPECT_LE(r.max_error, 1e-4) << r.worst << " seed " << seed;
    }
  }
}

TEST(GradCheck, DetectsAWrongGradient) {
  // A deliberately broken backward must be caught by the checker.
  std::mt19937_64 rng(1);
  gradcheck::Build<double> broken = [](Tape<double>& tape, const std::vector<Var<double>>& v) {
    auto y = v[0].value();
    for (auto& x : y.data) x = x * x;
    return tape.record("square", y, true, [a = v[0].id](Tape<double>& t, std::size_t self) {
      const auto g = t.grad(self);
      for (std::size_t k = 0; k < g.size(); ++k) t.grad(a).data[k] += g.data[k] * t.value(a).data[k];  // missing 2x
    });
  };
  auto r = gradcheck::check_op<double>("broken", {gradcheck::random_tensor<double>({3, 3}, rng)}, broken, 1e-6, rng);
  EXPECT_GT(r.max_error, 0.4);
}

TEST(Softmax, Uniform) {
  Tape<float> tape;
  auto y = softmax(tape.constant(Tensor<float>({1, 4})));
  for (float v : y.value().data) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    Tape<float> tape;
    auto y = softmax(tape.constant(gradcheck::random_tensor<float>({3, 7}, rng, 3.0)));
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0;
      for (float v : y.value().row(i)) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, MaskedEntriesAreExactlyZero) {
  Tape<double> tape;
  auto allowed = std::make_shared<const std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 1, 0, 0, 0});
  auto y = masked_softmax(tape.constant(Tensor<double>({2, 3}, {1, 50, 1, 2, 3, 4})), allowed);
  EXPECT_EQ(y.value()(0, 0), 0.5);
  EXPECT_EQ(y.value()(0, 1), 0.0);
  EXPECT_EQ(y.value()(0, 2), 0.5);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y.value()(1, j), 0.0);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  for (std::size_t V : {2u, 7u, 50u}) {
    Tape<float> tape;
    auto loss = cross_entropy(tape.constant(Tensor<float>({3, V})), {0, std::int64_t(V - 1), 1});
    EXPECT_NEAR(loss.value().item(), std::log(double(V)), 1e-6);
  }
}

TEST(CrossEntropy, NonNegativeAndZeroOnlyWhenCertain) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 100; ++t) {
    Tape<double> tape;
    auto loss = cross_entropy(tape.constant(gradcheck::random_tensor<double>({2, 5}, rng, 3.0)), {1, 4});
    EXPECT_GT(loss.value().item(), 0.0);
  }
  Tape<double> tape;
  auto sure = cross_entropy(tape.constant(Tensor<double>({1, 3}, {0, 1000, 0})), {1});
  EXPECT_EQ(sure.value().item(), 0.0);
}

TEST(CrossEntropy, IgnoresPadPositions) {
  Tape<double> tape;
  Tensor<double> logits({2, 3}, {1, 2, 3, 10, -4, 7});
  auto both = cross_entropy(tape.constant(logits), {2, 0}, 0);
  auto first = cross_entropy(tape.constant(Tensor<double>({1, 3}, {1, 2, 3})), {2});
  EXPECT_DOUBLE_EQ(both.value().item(), first.value().item());
  EXPECT_THROW(cross_entropy(tape.constant(logits), {0, 0}, 0), Error);
}

TEST(LayerNorm, FourVectorByHand) {
  Tape<double> tape;
  auto y = layer_norm(tape.constant(Tensor<double>({1, 4}, {1, 2, 3, 4})), tape.constant(Tensor<double>({4}, 1.0)),
                      tape.constant(Tensor<double>({4})));
  // mean 2.5, variance 1.25
  const double s = std::sqrt(1.25 + 1e-5);
  const double expected[] = {-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s};
  double mean = 0, var = 0;
  for (int j = 0; j < 4; ++j) {
    EXPECT_NEAR(y.value().data[j], expected[j], 1e-12);
    mean += y.value().data[j] / 4;
  }
  for (int j = 0; j < 4; ++j) var += (y.value().data[j] - mean) * (y.value().data[j] - mean) / 4;
  EXPECT_NEAR(mean, 0.0, 1e-5);
  EXPECT_NEAR(var, 1.0, 1e-5);
}

TEST(Gelu, ExactErfForm) {
  Tape<double> tape;
  auto y = gelu(tape.constant(Tensor<double>({1, 3}, {-1, 0, 2})));
  EXPECT_NEAR(y.value().data[0], -1 * 0.5 * (1 + std::erf(-1 / std::sqrt(2.0))), 1e-15);
  EXPECT_EQ(y.value().data[1], 0.0);
  EXPECT_NEAR(y.value().data[2], 2 * 0.5 * (1 + std::erf(2 / std::sqrt(2.0))), 1e-15);
}

TEST(Backward, SumGivesOnes) {
  Parameter<float> w("w", {3, 4});
  w.value.data.assign(12, 0.7f);
  Tape<float> tape;
  tape.backward(sum(tape.param(w)));
  for (float g : tape.grad_of(w)->data) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, Errors) {
  Tape<float> tape, other;
  auto c = tape.constant(Tensor<float>::scalar(1));
  EXPECT_THROW(tape.backward(c), Error);
  auto v = tape.variable(Tensor<float>({2, 2}));
  EXPECT_THROW(tape.backward(v), ShapeError);
  EXPECT_THROW(other.backward(sum(v)), Error);
}

TEST(Backward, TwoLossesAccumulate) {
  std::mt19937_64 rng(2);
  Parameter<double> w("w", {2, 3});
  w.value = gradcheck::random_tensor<double>({2, 3}, rng);
  std::vector<Parameter<double>*> ps{&w};
  Tensor<double> a = gradcheck::random_tensor<double>({2, 3}, rng), b = gradcheck::random_tensor<double>({2, 3}, rng);
  auto grad_of = [&](const Tensor<double>& r) {
    Tape<double> tape;
    tape.backward(sum(mul(tape.param(w), tape.constant(r))));
    tape.accumulate_param_grads(ps);
  };
  w.zero_grad();
  grad_of(a);
  grad_of(b);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_DOUBLE_EQ(w.grad.data[k], a.data[k] + b.data[k]);
}

TEST(Ops, ShapeErrorsNameOpAndShapes) {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>({2, 3})), b = tape.constant(Tensor<float>({2, 3}));
  try {
    matmul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(a, tape.constant(Tensor<float>({3, 2}))), ShapeError);
  EXPECT_THROW(layer_norm(a, tape.constant(Tensor<float>({2})), tape.constant(Tensor<float>({3}))), ShapeError);
}

TEST(Ops, CheckedModeRejectsNonFinite) {
  Tape<float> checked(true), loose;
  Tensor<float> big({1, 1}, {1e30f});
  EXPECT_THROW(mul(checked.constant(big), checked.constant(big)), Error);
  EXPECT_NO_THROW(mul(loose.constant(big), loose.constant(big)));
}

TEST(AdamW, ZeroGradNoDecayLeavesParams) {
  Parameter<float> p("p", {4});
  p.value.data = {1, -2, 3, 0.5f};
  const auto before = p.value;
  AdamWOptions o;
  o.weight_decay = 0;
  AdamW<float> opt({&p}, o);
  for (int i = 0; i < 5; ++i) opt.step(1e-3);
  EXPECT_EQ(p.value, before);
}

TEST(AdamW, SingleScalarStepByHand) {
  Parameter<double> p("p", {1});
  p.value.data = {0.5};
  p.grad.data = {0.2};
  AdamWOptions o;
  o.weight_decay = 0.01;
  AdamW<double> opt({&p}, o);
  opt.step(0.1);
  // m = 0.02, v = 4e-5, m_hat = 0.2, v_hat = 0.04
  // p = 0.5 - 0.1 * (0.2 / (0.2 + 1e-8) + 0.01 * 0.5)
  EXPECT_NEAR(opt.first_moment(0).data[0], 0.02, 1e-15);
  EXPECT_NEAR(opt.second_moment(0).data[0], 4e-5, 1e-18);
  EXPECT_NEAR(p.value.data[0], 0.5 - 0.1 * (0.2 / (0.2 + 1e-8) + 0.005), 1e-15);
  EXPECT_NEAR(p.value.data[0], 0.399500005, 1e-10);
  EXPECT_EQ(opt.step_count(), 1u);
}

TEST(AdamW, DecayOnlyShrink) {
  Parameter<double> p("p", {3});
  p.value.data = {1.0, -4.0, 0.25};
  AdamWOptions o;
  o.weight_decay = 0.1;
  AdamW<double> opt({&p}, o);
  opt.step(1e-5);
  EXPECT_NEAR(p.value.data[0], 1.0 * (1 - 1e-6), 1e-15);
  EXPECT_NEAR(p.value.data[1], -4.0 * (1 - 1e-6), 1e-15);
  EXPECT_NEAR(p.value.data[2], 0.25 * (1 - 1e-6), 1e-15);
}

TEST(AdamW, NonFiniteGradNamesParameter) {
  Parameter<float> p("encoder.0.ffn.w1", {2});
  p.grad.data = {0, std::numeric_limits<float>::quiet_NaN()};
  AdamW<float> opt({&p});
  try {
    opt.step(1e-3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.0.ffn.w1"), std::string::npos);
  }
}

TEST(AdamW, BitDeterministic) {
  auto run = [] {
    std::mt19937_64 rng(5);
    Parameter<float> p("p", {8});
    p.value = gradcheck::random_tensor<float>({8}, rng);
    AdamW<float> opt({&p});
    for (int s = 0; s < 10; ++s) {
      p.grad = gradcheck::random_tensor<float>({8}, rng);
      opt.step(1e-2);
    }
    return p.value;
  };
  EXPECT_EQ(run(), run());
}

TEST(AdamW, ClipNormScalesGradient) {
  // With clipping the first step direction is unchanged (Adam normalizes),
  // but the moments see the clipped gradient.
  Parameter<double> p("p", {2});
  p.grad.data = {3, 4};
  AdamWOptions o;
  o.clip_norm = 1.0;
  o.weight_decay = 0;
  AdamW<double> opt({&p}, o);
  opt.step(0.1);
  EXPECT_NEAR(opt.first_moment(0).data[0], 0.1 * 0.6, 1e-15);
  EXPECT_NEAR(opt.first_moment(0).data[1], 0.1 * 0.8, 1e-15);
}

TEST(Schedule, Examples) {
  auto s = WarmupSchedule::with_fraction(1000, 2e-3);
  EXPECT_EQ(s.warmup_steps, 50u);
  EXPECT_EQ(s.lr_at(0), 0.0);
  EXPECT_DOUBLE_EQ(s.lr_at(25), 0.5 * 2e-3);
  EXPECT_EQ(s.lr_at(50), 2e-3);
  EXPECT_EQ(s.lr_at(51), 2e-3);
  EXPECT_EQ(s.lr_at(1000), 2e-3);
  EXPECT_EQ(WarmupSchedule::with_fraction(10, 1.0).warmup_steps, 1u);
  EXPECT_EQ(WarmupSchedule::with_fraction(21, 1.0).warmup_steps, 2u);
  EXPECT_EQ(WarmupSchedule::with_fraction(0, 1.0).warmup_steps, 0u);
  for (std::size_t total : {1u, 7u, 100u, 12345u}) {
    auto w = WarmupSchedule::with_fraction(total, 1.0);
    EXPECT_LE(w.warmup_steps, total);
    EXPECT_EQ(w.warmup_steps, std::size_t(std::ceil(0.05 * double(total) - 1e-9)));
  }
}
