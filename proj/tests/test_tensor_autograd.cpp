#include <gtest/gtest.h>

#include <cmath>

#include "multiad/adam.hpp"
#include "multiad/gradcheck.hpp"
#include "multiad/ops.hpp"

using namespace multiad;

TEST(Tensor, ShapeAndDataAgree) {
  const Tensor<float> t({2, 3, 4});
  EXPECT_EQ(t.size(), 24);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_FALSE(t.has_grad());
  EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}, VectorX<float>::Zero(3)), ShapeError);
  EXPECT_THROW(t.reshaped({5, 5}), ShapeError);
  EXPECT_EQ(t.reshaped({24}).shape(), (Shape{24}));
}

TEST(Tensor, GradMatchesShape) {
  Tensor<double> t({3, 2});
  t.set_requires_grad(true);
  EXPECT_EQ(t.grad().size(), t.size());
  t.set_requires_grad(false);
  EXPECT_FALSE(t.has_grad());
}

TEST(Tensor, RowMajorIndexing) {
  Tensor<int> t({1, 2, 2, 3});
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<int>(i);
  EXPECT_EQ(t.at(0, 1, 0, 2), 8);
  EXPECT_EQ(t.at(0, 0, 1, 0), 3);
}

TEST(Backward, SumOfSquares) {
  Tensor<double> x({2}, {1, 2});
  Tape<double> tape;
  const auto v = tape.param(x);
  const auto sq = tape.record(Tensor<double>({2}, {1, 4}), {v}, [v](Tape<double>& t, const VectorX<double>& g) {
    t.accumulate(v, (2.0 * g.array() * t.value(v).data().array()).matrix());
  });
  tape.backward(affine(mean(sq), 2.0, 0.0));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, DisconnectedParameterGetsZeroGradient) {
  Tensor<double> used({1}, {3}), unused({1}, {5});
  unused.grad().setZero();
  Tape<double> tape;
  tape.param(unused);
  tape.backward(affine(tape.param(used), 2.0, 1.0));
  EXPECT_EQ(used.grad()[0], 2.0);
  EXPECT_EQ(unused.grad()[0], 0.0);
}

TEST(Backward, MultipleUsesAccumulate) {
  Tensor<double> x({1}, {1.5});
  Tape<double> tape;
  const auto v = tape.param(x);
  tape.backward(add(add(v, v), affine(v, 3.0, 0.0)));
  EXPECT_EQ(x.grad()[0], 5.0);
}

TEST(Backward, NonScalarLossThrows) {
  Tensor<double> x({2});
  Tape<double> tape;
  EXPECT_THROW(tape.backward(tape.param(x)), ShapeError);
}

TEST(Backward, TapeCannotBeReused) {
  Tensor<double> x({1}, {1});
  Tape<double> tape;
  const auto loss = affine(tape.param(x), 1.0, 0.0);
  tape.backward(loss);
  EXPECT_TRUE(tape.consumed());
  EXPECT_THROW(tape.backward(loss), StateError);
  EXPECT_THROW(tape.constant(Tensor<double>({1})), StateError);
}

TEST(Backward, ForeignVariableRejected) {
  Tape<double> a, b;
  const auto v = a.constant(Tensor<double>({1}));
  EXPECT_THROW(b.value(v), StateError);
}

TEST(Backward, NonFiniteOpResultThrows) {
  Tape<double> tape;
  const auto x = tape.constant(Tensor<double>({1}, {1.0}));
  EXPECT_THROW(affine(x, std::numeric_limits<double>::infinity(), 0.0), NumericError);
}

TEST(Backward, TapeIsTopologicallyOrdered) {
  Tensor<double> x({1, 2}, {0.5, -1});
  Tape<double> tape;
  const auto v = tape.param(x);
  const auto h = relu(v);
  const auto s = sigmoid(h);
  EXPECT_LT(v.id, h.id);
  EXPECT_LT(h.id, s.id);
}

TEST(Adam, ZeroGradientLeavesParameterAndAdvancesStep) {
  Tensor<float> p({3}, {1, -2, 3});
  p.grad().setZero();
  AdamState<float> state;
  std::vector<Tensor<float>*> params{&p};
  adam_step<float>(params, state);
  EXPECT_EQ(state.step, 1);
  EXPECT_EQ(p.data(), (VectorX<float>(3) << 1, -2, 3).finished());
}

TEST(Adam, FirstStepHasClosedForm) {
  Tensor<double> p({3}, {0, 0, 0});
  p.grad() << 0.5, -2.0, 1e-9;
  AdamState<double> state;
  state.options.lr = 0.01;
  std::vector<Tensor<double>*> params{&p};
  adam_step<double>(params, state);
  for (Index i = 0; i < 3; ++i) {
    const double g = p.grad()[i];
    EXPECT_NEAR(p[i], -0.01 * g / (std::abs(g) + 1e-8), 1e-12);
  }
}

TEST(Adam, ZeroLearningRateStillUpdatesMoments) {
  Tensor<double> p({2}, {1, 2});
  p.grad() << 3, -4;
  AdamState<double> state;
  state.options.lr = 0.0;
  std::vector<Tensor<double>*> params{&p};
  adam_step<double>(params, state);
  EXPECT_EQ(p[0], 1);
  EXPECT_EQ(p[1], 2);
  EXPECT_NEAR(state.first_moment[0][0], 0.3, 1e-15);
  EXPECT_NEAR(state.second_moment[0][1], 0.016, 1e-15);
}

TEST(Adam, SecondMomentNonNegativeAndStepMonotone) {
  Rng rng(1);
  Tensor<double> p({5});
  AdamState<double> state;
  std::vector<Tensor<double>*> params{&p};
  for (int k = 1; k <= 20; ++k) {
    for (Index i = 0; i < 5; ++i) p.grad()[i] = rng.uniform(-3, 3);
    adam_step<double>(params, state);
    EXPECT_EQ(state.step, k);
    EXPECT_GE(state.second_moment[0].minCoeff(), 0.0);
  }
}

TEST(Adam, NonFiniteGradientAbortsWithoutChanges) {
  Tensor<double> p({2}, {1, 2});
  p.grad() << std::nan(""), 1;
  AdamState<double> state;
  std::vector<Tensor<double>*> params{&p};
  EXPECT_THROW(adam_step<double>(params, state), NumericError);
  EXPECT_EQ(state.step, 0);
  EXPECT_EQ(p[0], 1);
}

TEST(Adam, NegativeLearningRateRejected) {
  Tensor<double> p({1});
  AdamState<double> state;
  state.options.lr = -1;
  std::vector<Tensor<double>*> params{&p};
  EXPECT_THROW(adam_step<double>(params, state), ValueError);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  Rng c(7);
  c.uniform();
  Rng d(0);
  d.set_state(c.state());
  EXPECT_TRUE(c == d);
  EXPECT_EQ(c.normal(), d.normal());
  EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
}

// A few instances of every composite per test run; the acceptance runner does
// the full 100-per-op sweep.
TEST(Gradcheck, EveryOperationPassesQuickly) {
  for (const std::string& op : gradcheck_ops()) {
    const GradcheckSummary s = run_gradcheck(op, 5, 99);
    EXPECT_EQ(s.failures, 0u) << op << " max rel error " << s.max_rel_error;
  }
}

TEST(Gradcheck, DetectsWrongGradient) {
  auto x = std::make_shared<Tensor<double>>(Shape{3}, VectorX<double>::Constant(3, 0.7));
  GradcheckCase c;
  c.wrt = {x.get()};
  c.loss = [x](Tape<double>& tape) {
    const auto v = tape.param(*x);
    // Value is sum(x^2) but the recorded gradient is x, off by a factor 2.
    Tensor<double> y({1}, {x->data().squaredNorm()});
    return tape.record(std::move(y), {v}, [v](Tape<double>& t, const VectorX<double>& g) {
      t.accumulate(v, (g[0] * t.value(v).data()).eval());
    });
  };
  Rng rng(0);
  EXPECT_GT(check_case(c, rng).rel_error, 0.1);
}
