#include <gtest/gtest.h>

#include <cmath>

#include "cbllm/adam.hpp"
#include "cbllm/errors.hpp"
#include "cbllm/tape.hpp"
#include "op_cases.hpp"

namespace cbllm {
namespace {

TEST(Tape, SquareForwardAndBackward) {
  Param x("x", Tensor::scalar(3.0f));
  Tape t;
  Var xv = t.param(x);
  Var y = t.mul(xv, xv);
  EXPECT_FLOAT_EQ(t.value(y)[0], 9.0f);
  t.backward(y);
  EXPECT_FLOAT_EQ(x.grad[0], 6.0f);
}

TEST(Tape, SoftmaxOfEqualLogitsIsUniform) {
  Tape t(false);
  Var y = t.softmax(t.constant(Tensor::from_rows({{2.0f, 2.0f, 2.0f, 2.0f}})));
  for (float p : t.value(y).span()) EXPECT_FLOAT_EQ(p, 0.25f);
}

TEST(Tape, LayerNormOfConstantRowIsZero) {
  Tape t(false);
  Var y = t.layer_norm(t.constant(Tensor::from_rows({{5.0f, 5.0f, 5.0f}})));
  for (float v : t.value(y).span()) EXPECT_EQ(v, 0.0f);
}

TEST(Tape, ReluSubgradientAtZeroIsZero) {
  Param x("x", Tensor::from_rows({{0.0f, 1.0f, -1.0f}}));
  Tape t;
  t.backward(t.sum(t.relu(t.param(x))));
  EXPECT_EQ(x.grad[0], 0.0f);
  EXPECT_EQ(x.grad[1], 1.0f);
  EXPECT_EQ(x.grad[2], 0.0f);
}

TEST(Tape, BackwardBeforeForwardIsUsageError) {
  Tape t;
  EXPECT_THROW(t.backward(Var{}), UsageError);
  Var y = t.constant(Tensor::scalar(1.0f));
  (void)y;
  EXPECT_THROW(t.backward(Var{}), UsageError);
}

TEST(Tape, SecondBackwardIsRejected) {
  Param x("x", Tensor::scalar(2.0f));
  Tape t;
  Var y = t.mul(t.param(x), t.param(x));
  t.backward(y);
  EXPECT_THROW(t.backward(y), UsageError);
  EXPECT_FLOAT_EQ(x.grad[0], 4.0f);
}

TEST(Tape, ShapeMismatchNamesOpAndShapes) {
  Tape t(false);
  Var a = t.constant(Tensor::matrix(2, 3));
  Var b = t.constant(Tensor::matrix(2, 3));
  try {
    t.matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
  }
}

TEST(Tape, NonFiniteOutputIsNumericFault) {
  Tape t(false);
  Var a = t.constant(Tensor::from_rows({{0.0f, 1.0f}}));
  EXPECT_THROW(t.log(a), NumericFault);
}

TEST(Tape, OpsDoNotMutateInputs) {
  std::mt19937_64 rng(11);
  for (const auto& c : testing::op_cases()) {
    auto [inputs, build, ref] = c.make(rng);
    auto before = inputs;
    Tape t;
    std::vector<Param> params;
    for (std::size_t i = 0; i < inputs.size(); ++i) params.emplace_back("x", inputs[i]);
    std::vector<Var> leaves;
    for (auto& p : params) leaves.push_back(t.param(p));
    Var y = build(t, leaves);
    for (std::size_t i = 0; i < leaves.size(); ++i) EXPECT_EQ(t.value(leaves[i]), before[i]) << c.name;
    Tensor seed(t.value(y).shape(), 1.0f);
    t.backward(y, seed);
    for (std::size_t i = 0; i < params.size(); ++i) EXPECT_EQ(params[i].value, before[i]) << c.name;
  }
}

TEST(Tape, ForwardIsDeterministic) {
  std::mt19937_64 a(5), b(5);
  for (const auto& c : testing::op_cases()) {
    auto [xa, fa, ra] = c.make(a);
    auto [xb, fb, rb] = c.make(b);
    Tape ta(false), tb(false);
    std::vector<Var> la, lb;
    for (auto& x : xa) la.push_back(ta.constant(x));
    for (auto& x : xb) lb.push_back(tb.constant(x));
    EXPECT_EQ(ta.value(fa(ta, la)), tb.value(fb(tb, lb))) << c.name;
  }
}

// Property: every op's analytic gradient matches central differences (h=1e-3)
// to relative error 1e-4 over 100 random draws.
TEST(Tape, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(2024);
  for (const auto& c : testing::op_cases()) {
    double worst = 0.0, worst_fwd = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      auto d = c.make(rng);
      auto res = testing::grad_check(d.inputs, d.build, d.ref, rng);
      worst = std::max(worst, res.rel_error);
      worst_fwd = std::max(worst_fwd, res.forward_error);
    }
    EXPECT_LE(worst, 1e-4) << c.name;
    EXPECT_LE(worst_fwd, 1e-4) << c.name;
  }
}

TEST(Tape, CausalAttentionIgnoresFuturePositions) {
  std::mt19937_64 rng(3);
  Tensor q = testing::random_tensor(4, 4, rng), k = testing::random_tensor(4, 4, rng),
         v = testing::random_tensor(4, 4, rng);
  std::vector<std::size_t> off4 = {0, 4}, off3 = {0, 3};
  Tape t(false);
  Var full = t.causal_attention(t.constant(q), t.constant(k), t.constant(v), off4, 2);
  auto first3 = [](const Tensor& x) { return Tensor({3, 4}, std::vector<float>(x.data(), x.data() + 12)); };
  Var part = t.causal_attention(t.constant(first3(q)), t.constant(first3(k)), t.constant(first3(v)), off3, 2);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_FLOAT_EQ(t.value(full)[i], t.value(part)[i]);
}

TEST(Adam, FirstStepWithUnitGradient) {
  Param p("p", Tensor::scalar(0.0f));
  p.grad = Tensor::scalar(1.0f);
  ParamList ps = {&p};
  AdamState st(ps, AdamConfig{});
  adam_step(ps, st);
  EXPECT_EQ(st.step, 1);
  // m_hat = v_hat = 1, so the step is -lr / (1 + eps).
  double expected = -1e-3 / (1.0 + 1e-8);
  EXPECT_NEAR(p.value[0], expected, 1e-10);
  EXPECT_NEAR(p.value[0], -9.99999995e-4, 1e-10);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  Param p("p", Tensor::from_rows({{1.5f, -2.0f}}));
  p.zero_grad();
  ParamList ps = {&p};
  AdamState st(ps, AdamConfig{});
  adam_step(ps, st);
  EXPECT_EQ(p.value[0], 1.5f);
  EXPECT_EQ(p.value[1], -2.0f);
}

TEST(Adam, TwoStepsFollowGeometricMoments) {
  Param p("p", Tensor::scalar(0.0f));
  ParamList ps = {&p};
  AdamConfig cfg;
  AdamState st(ps, cfg);
  const double g = 0.5;
  double w = 0.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    p.grad = Tensor::scalar(static_cast<float>(g));
    adam_step(ps, st);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    w -= 1e-3 * mh / (std::sqrt(vh) + 1e-8);
  }
  EXPECT_EQ(st.step, 2);
  // Closed form after two identical gradients: m = (1 - b1^2) g, v = (1 - b2^2) g^2.
  EXPECT_NEAR(st.m[0][0], (1 - 0.81) * g, 1e-7);
  EXPECT_NEAR(st.v[0][0], (1 - 0.998001) * g * g, 1e-8);  // float32 moments
  EXPECT_NEAR(p.value[0], w, 1e-8);
}

TEST(Adam, ShapeMismatchIsStructuredError) {
  Param p("p", Tensor::matrix(2, 2));
  p.grad = Tensor::matrix(1, 2);
  ParamList ps = {&p};
  AdamState st(ps, AdamConfig{});
  EXPECT_THROW(adam_step(ps, st), ShapeError);
}

}  // namespace
}  // namespace cbllm
