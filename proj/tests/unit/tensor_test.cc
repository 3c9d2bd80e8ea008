/**
 * Copyright 2026 The ExitPipe Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "exitpipe/error.h"
#include "exitpipe/tensor/grad_check.h"
#include "exitpipe/tensor/ops.h"
#include "exitpipe/tensor/tape.h"

namespace exitpipe {
namespace {

ErrorKind KindOf(const std::function<void()> &fn) {
  try {
    fn();
  } catch (const Error &e) {
    return e.kind();
  }
  return ErrorKind::kInternal;
}

TEST(TensorTest, RejectsBadShapesAndNonFinite) {
  EXPECT_EQ(KindOf([] { Tensor({2, 2}, {1, 2, 3}); }), ErrorKind::kShapeMismatch);
  EXPECT_EQ(KindOf([] { Tensor({0}, {}); }), ErrorKind::kShapeMismatch);
  EXPECT_EQ(KindOf([] { Tensor({1}, {NAN}); }), ErrorKind::kNonFinite);
  EXPECT_EQ(KindOf([] { Tensor({1}, {INFINITY}); }), ErrorKind::kNonFinite);
}

TEST(OpsTest, MatmulByIdentity) {
  Tape tape;
  const Var a = tape.Constant(Tensor::FromRows({{1, 2}, {3, 4}}));
  const Var b = tape.Constant(Tensor::FromRows({{1, 0}, {0, 1}}));
  const Tensor &c = tape.value(ops::Matmul(tape, a, b));
  EXPECT_EQ(c, Tensor::FromRows({{1, 2}, {3, 4}}));
}

TEST(OpsTest, MatmulShapeMismatch) {
  Tape tape;
  const Var a = tape.Constant(Tensor::Zeros({2, 3}));
  const Var b = tape.Constant(Tensor::Zeros({2, 3}));
  EXPECT_EQ(KindOf([&] { ops::Matmul(tape, a, b); }), ErrorKind::kShapeMismatch);
  EXPECT_NO_THROW(ops::Matmul(tape, a, b, /*transpose_b=*/true));
}

TEST(OpsTest, SoftmaxOfZerosIsUniform) {
  Tape tape;
  const Tensor &y = tape.value(ops::Softmax(tape, tape.Constant(Tensor::Zeros({4}))));
  for (double v : y.data()) {
    EXPECT_DOUBLE_EQ(v, 0.25);
  }
}

TEST(OpsTest, CrossEntropyOfTwoEqualLogits) {
  Tape tape;
  const std::vector<int> target{0};
  const Var loss = ops::CrossEntropy(tape, tape.Constant(Tensor({1, 2}, {0, 0})), target);
  EXPECT_NEAR(tape.value(loss).item(), std::log(2.0), 1e-15);
}

TEST(OpsTest, InvalidTokenIds) {
  Tape tape;
  const Var logits = tape.Constant(Tensor::Zeros({1, 3}));
  const std::vector<int> bad{3};
  EXPECT_EQ(KindOf([&] { ops::CrossEntropy(tape, logits, bad); }), ErrorKind::kInvalidToken);
  const std::vector<int> neg{-1};
  EXPECT_EQ(KindOf([&] { ops::Embedding(tape, logits, neg, {1}); }), ErrorKind::kInvalidToken);
}

TEST(OpsTest, NonFiniteOutputIsAnError) {
  Tape tape;
  const Var x = tape.Constant(Tensor::Full({2}, 1e300));
  EXPECT_EQ(KindOf([&] { ops::Mul(tape, x, x); }), ErrorKind::kNonFinite);
}

TEST(BackwardTest, SumOfSquares) {
  Tape tape;
  const Var x = tape.Leaf("x", Tensor({3}, {1, 2, 3}));
  const Var loss = ops::Sum(tape, ops::Mul(tape, x, x));
  const auto grads = tape.Backward(loss);
  EXPECT_EQ(grads.at("x"), (std::vector<double>{2, 4, 6}));
}

TEST(BackwardTest, LinearFormGradientIsExactlyG) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> dist;
  std::vector<double> g(12), x(12);
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = dist(rng);
    x[i] = dist(rng);
  }
  Tape tape;
  const Var xv = tape.Leaf("x", Tensor({3, 4}, x));
  const Var loss = ops::Dot(tape, xv, tape.Constant(Tensor({3, 4}, g)));
  EXPECT_EQ(tape.Backward(loss).at("x"), g);
}

TEST(BackwardTest, TwoBranchAccumulation) {
  // loss = sum(3x) + sum(x * x): each branch alone gives 3 and 2x; used together they add.
  Tape tape;
  const Var x = tape.Leaf("x", Tensor({3}, {1, -2, 0.5}));
  const Var loss = ops::Add(tape, ops::Sum(tape, ops::Scale(tape, x, 3.0)), ops::Sum(tape, ops::Mul(tape, x, x)));
  const auto grads = tape.Backward(loss);
  EXPECT_EQ(grads.at("x"), (std::vector<double>{5, -1, 4}));
}

TEST(BackwardTest, SameLeafNameSharesGradient) {
  Tape tape;
  const Var a = tape.Leaf("w", Tensor({2}, {1, 2}));
  const Var b = tape.Leaf("w", Tensor({2}, {1, 2}));
  EXPECT_EQ(a, b);
  const auto grads = tape.Backward(ops::Add(tape, ops::Sum(tape, a), ops::Sum(tape, b)));
  EXPECT_EQ(grads.at("w"), (std::vector<double>{2, 2}));
}

TEST(BackwardTest, UnreachableLeafGetsZeros) {
  Tape tape;
  const Var x = tape.Leaf("x", Tensor({2}, {1, 2}));
  tape.Leaf("unused", Tensor({3}, {1, 2, 3}));
  const auto grads = tape.Backward(ops::Sum(tape, x));
  EXPECT_EQ(grads.at("unused"), (std::vector<double>{0, 0, 0}));
}

TEST(BackwardTest, ConsumedAndNonScalar) {
  Tape tape;
  const Var x = tape.Leaf("x", Tensor({2}, {1, 2}));
  EXPECT_EQ(KindOf([&] { tape.Backward(x); }), ErrorKind::kShapeMismatch);
  const Var loss = ops::Sum(tape, x);
  tape.Backward(loss);
  EXPECT_EQ(KindOf([&] { tape.Backward(loss); }), ErrorKind::kTapeConsumed);
  EXPECT_EQ(KindOf([&] { ops::Sum(tape, x); }), ErrorKind::kTapeConsumed);
}

TEST(BackwardTest, NodesOnlyForDifferentiableInputs) {
  Tape tape;
  const Var c = tape.Constant(Tensor({2}, {1, 2}));
  ops::Scale(tape, c, 2.0);
  EXPECT_EQ(tape.num_nodes(), 0u);
  const Var x = tape.Leaf("x", Tensor({2}, {1, 2}));
  ops::Add(tape, c, x);
  EXPECT_EQ(tape.num_nodes(), 1u);
}

TEST(GradCheckTest, SumOfSquares) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> dist;
  std::vector<double> x(10);
  for (double &v : x) {
    v = dist(rng);
  }
  const double err = FiniteDifferenceCheck(
      [](Tape &t, Var v) { return ops::Sum(t, ops::Mul(t, v, v)); }, Tensor({10}, x), 1e-5);
  EXPECT_LT(err, 1e-7);
}

TEST(GradCheckTest, ConstantFunction) {
  const double err = FiniteDifferenceCheck(
      [](Tape &t, Var) { return t.Constant(Tensor::Scalar(3.0)); }, Tensor({4}, {1, 2, 3, 4}), 1e-5);
  EXPECT_EQ(err, 0.0);
}

TEST(GradCheckTest, DetachedFactorIsDetected) {
  // x * stop_gradient(x): the tape sees d/dx = x while the true derivative is 2x.
  const double err = FiniteDifferenceCheck(
      [](Tape &t, Var v) { return ops::Sum(t, ops::Mul(t, v, t.Constant(t.value(v)))); },
      Tensor({3}, {0.5, -1.0, 2.0}), 1e-5);
  EXPECT_GT(err, 0.1);
}

TEST(GradCheckTest, VanishingDerivativeCoordinate) {
  // GELU is stationary near x = -0.7518, so one coordinate has a derivative close to zero.
  const double err = FiniteDifferenceCheck([](Tape &t, Var v) { return ops::Sum(t, ops::Gelu(t, v)); },
                                           Tensor({3}, {-0.751791524693564, 0.4, 1.3}), 1e-5);
  EXPECT_LT(err, 1e-8);
}

TEST(GradCheckTest, RmsNormThenSum) {
  const Tensor x({2, 4}, {0.3, -1.2, 0.8, 2.0, -0.5, 0.1, 1.7, -0.9});
  const Tensor gain({4}, {1.0, 0.5, 1.5, 2.0});
  const double err = FiniteDifferenceCheck(
      [&](Tape &t, Var v) { return ops::Sum(t, ops::RmsNorm(t, v, t.Constant(gain))); }, x, 1e-5);
  EXPECT_LT(err, 1e-6);
}

TEST(GradCheckTest, CompositeNetwork) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> dist(0.0, 0.5);
  auto rand = [&](Shape s) {
    std::vector<double> d(NumElements(s));
    for (double &v : d) {
      v = dist(rng);
    }
    return Tensor(std::move(s), std::move(d));
  };
  const Tensor w_qkv = rand({4, 12}), w_up = rand({4, 8}), w_down = rand({8, 4}), gain = rand({4}), x = rand({1, 3, 4});
  const std::vector<int> targets{1, 3, 0};
  const double err = FiniteDifferenceCheck(
      [&](Tape &t, Var h) {
        const Var a = ops::CausalAttention(t, ops::Matmul(t, ops::RmsNorm(t, h, t.Constant(gain)), t.Constant(w_qkv)), 2);
        const Var r = ops::Add(t, h, a);
        const Var m = ops::Matmul(t, ops::Gelu(t, ops::Matmul(t, r, t.Constant(w_up))), t.Constant(w_down));
        return ops::CrossEntropy(t, ops::Add(t, r, m), targets);
      },
      x, 1e-5);
  EXPECT_LT(err, 1e-6);
}

class PerOpGradientTest : public ::testing::TestWithParam<OpKind> {};

TEST_P(PerOpGradientTest, HundredRandomTrials) {
  std::mt19937_64 rng(1234 + static_cast<int>(GetParam()));
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    worst = std::max(worst, RandomOpGradientError(GetParam(), rng));
  }
  EXPECT_LT(worst, 1e-6) << OpKindName(GetParam());
}

INSTANTIATE_TEST_SUITE_P(AllOps, PerOpGradientTest, ::testing::ValuesIn(kAllOpKinds),
                         [](const auto &info) {
                           std::string name = OpKindName(info.param);
                           std::erase(name, '-');
                           return name;
                         });

}  // namespace
}  // namespace exitpipe
