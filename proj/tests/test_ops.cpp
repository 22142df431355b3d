#include <gtest/gtest.h>

#include <cmath>

#include "multiad/ops.hpp"
#include "oracles.hpp"

using namespace multiad;

namespace {

Tensor<double> map4(Index h, Index w, std::initializer_list<double> v) { return Tensor<double>({1, 1, h, w}, v); }

Tensor<double> integer_tensor(Shape shape, Rng& rng, int lo, int hi) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  return t;
}

Tensor<double> run_conv(const Tensor<double>& x, const Tensor<double>& w, Conv2dOptions o) {
  Tape<double> tape;
  return conv2d(tape.constant(x), tape.constant(w), o).value();
}

}  // namespace

TEST(Conv2d, TwoByTwoDiagonalKernel) {
  const auto y = run_conv(map4(3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9}), map4(2, 2, {1, 0, 0, 1}), {});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(y[0], 6);
  EXPECT_EQ(y[1], 8);
  EXPECT_EQ(y[2], 12);
  EXPECT_EQ(y[3], 14);
}

TEST(Conv2d, DilatedOnesKernel) {
  const auto y = run_conv(Tensor<double>::filled({1, 1, 5, 5}, 1.0), Tensor<double>::filled({1, 1, 2, 2}, 1.0),
                          {1, 0, 2});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (Index i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], 4);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  Rng rng(1);
  const auto x = integer_tensor({2, 1, 6, 5}, rng, -9, 9);
  for (Index r : {1, 2, 4, 8}) {
    const auto y = run_conv(x, Tensor<double>::filled({1, 1, 1, 1}, 1.0), {1, 0, r});
    EXPECT_EQ(y.data(), x.data());
  }
}

TEST(Conv2d, OutputExtentFormula) {
  EXPECT_EQ(conv_output_extent(64, 7, 2, 3, 1), 32);
  EXPECT_EQ(conv_output_extent(16, 3, 1, 8, 8), 16);
  EXPECT_EQ(conv_output_extent(5, 2, 1, 0, 2), 3);
}

TEST(Conv2d, MatchesDirectSummationOnRandomShapes) {
  Rng rng(2);
  for (int k = 0; k < 50; ++k) {
    const Index ci = 1 + rng.below(3), co = 1 + rng.below(3), ks = 1 + rng.below(3);
    const Index r = 1 + rng.below(3), stride = 1 + rng.below(2), pad = rng.below(3);
    const Index h = (ks - 1) * r + 1 + rng.below(5), w = (ks - 1) * r + 1 + rng.below(5);
    const auto x = integer_tensor({1 + static_cast<Index>(rng.below(2)), ci, h, w}, rng, -5, 5);
    const auto wt = integer_tensor({co, ci, ks, ks}, rng, -5, 5);
    EXPECT_EQ(run_conv(x, wt, {stride, pad, r}).data(), oracle::conv2d(x, wt, stride, pad, r).data());
  }
}

TEST(Conv2d, ChannelMismatchThrows) {
  EXPECT_THROW(run_conv(Tensor<double>({1, 2, 4, 4}), Tensor<double>({1, 3, 3, 3}), {}), ShapeError);
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
  EXPECT_THROW(run_conv(Tensor<double>({1, 1, 4, 4}), Tensor<double>({1, 1, 3, 3}), {1, 0, 4}), ShapeError);
}

TEST(Conv2d, ZeroDilationRejected) {
  EXPECT_THROW(run_conv(Tensor<double>({1, 1, 4, 4}), Tensor<double>({1, 1, 1, 1}), {1, 0, 0}), ValueError);
}

namespace {

Tensor<double> run_bn(const Tensor<double>& x, double gamma, double beta, NormMode mode, double eps,
                      Tensor<double>* mean_out = nullptr, Tensor<double>* var_out = nullptr) {
  const Index c = x.dim(1);
  Tensor<double> rm({c}), rv = Tensor<double>::filled({c}, 1.0);
  Tape<double> tape;
  const auto y = batch_norm(tape.constant(x), tape.constant(Tensor<double>::filled({c}, gamma)),
                            tape.constant(Tensor<double>::filled({c}, beta)), rm, rv, {mode, 0.1, eps, true})
                     .value();
  if (mean_out) *mean_out = rm;
  if (var_out) *var_out = rv;
  return y;
}

}  // namespace

TEST(BatchNorm, TwoValuesNormalizeToPlusMinusOne) {
  const auto y = run_bn(Tensor<double>({2, 1}, {2, 4}), 1, 0, NormMode::kTrain, 0.0);
  EXPECT_DOUBLE_EQ(y[0], -1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
}

TEST(BatchNorm, AlreadyNormalizedInputIsNearlyUnchanged) {
  const Tensor<double> x({4, 1}, {-1.5, -0.5, 0.5, 1.5});
  // Batch variance of these values is 1.25; rescale to unit variance.
  Tensor<double> u = x;
  u.data() /= std::sqrt(1.25);
  const auto y = run_bn(u, 1, 0, NormMode::kTrain, 1e-5);
  for (Index i = 0; i < 4; ++i) EXPECT_NEAR(y[i], u[i], 1e-5);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  Rng rng(3);
  const auto x = integer_tensor({3, 2, 2, 2}, rng, -4, 4);
  const auto y = run_bn(x, 0, 0.75, NormMode::kTrain, 1e-5);
  for (Index i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], 0.75);
}

TEST(BatchNorm, RunningStatsUseMomentumAndUnbiasedVariance) {
  Tensor<double> m, v;
  run_bn(Tensor<double>({2, 1}, {2, 4}), 1, 0, NormMode::kTrain, 1e-5, &m, &v);
  EXPECT_DOUBLE_EQ(m[0], 0.1 * 3.0);
  EXPECT_DOUBLE_EQ(v[0], 0.9 * 1.0 + 0.1 * 2.0);
}

TEST(BatchNorm, EvalModeUsesRunningStats) {
  const auto y = run_bn(Tensor<double>({2, 1}, {2, 4}), 1, 0, NormMode::kEval, 0.0);
  EXPECT_DOUBLE_EQ(y[0], 2.0);
  EXPECT_DOUBLE_EQ(y[1], 4.0);
}

TEST(BatchNorm, SingleElementTrainBatchThrows) {
  EXPECT_THROW(run_bn(Tensor<double>({1, 3, 1, 1}), 1, 0, NormMode::kTrain, 1e-5), ValueError);
}

TEST(Activation, Examples) {
  Tape<double> tape;
  EXPECT_EQ(sigmoid(tape.constant(Tensor<double>({1}, {0.0}))).value()[0], 0.5);
  const auto r = relu(tape.constant(Tensor<double>({2}, {-1, 2}))).value();
  EXPECT_EQ(r[0], 0);
  EXPECT_EQ(r[1], 2);
  EXPECT_DOUBLE_EQ(leaky_relu(tape.constant(Tensor<double>({1}, {-10.0})), 0.2).value()[0], -2.0);
}

TEST(Activation, SigmoidStrictlyInsideUnitIntervalAndReluNonNegative) {
  Rng rng(4);
  Tensor<float> x({4000});
  for (Index i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.uniform(-200, 200));
  x[0] = 1e6f;
  x[1] = -1e6f;
  Tape<float> tape;
  const auto s = sigmoid(tape.constant(x)).value();
  const auto r = relu(tape.constant(x)).value();
  EXPECT_GT(s.data().minCoeff(), 0.0f);
  EXPECT_LT(s.data().maxCoeff(), 1.0f);
  EXPECT_GE(r.data().minCoeff(), 0.0f);
}

TEST(Activation, LeakySlopeMustBeInOpenUnitInterval) {
  Tape<double> tape;
  EXPECT_THROW(leaky_relu(tape.constant(Tensor<double>({1})), 1.0), ValueError);
  EXPECT_THROW(leaky_relu(tape.constant(Tensor<double>({1})), 0.0), ValueError);
}

TEST(MaxPool, Examples) {
  Tape<double> tape;
  const auto c = max_pool2d(tape.constant(Tensor<double>::filled({1, 1, 4, 4}, 7.0)), 2, 2).value();
  for (Index i = 0; i < c.size(); ++i) EXPECT_EQ(c[i], 7.0);
  const auto one = max_pool2d(tape.constant(map4(2, 2, {1, 2, 3, 4})), 2, 2).value();
  ASSERT_EQ(one.size(), 1);
  EXPECT_EQ(one[0], 4);
}

TEST(MaxPool, BlockwiseMaximaMatchScan) {
  Rng rng(5);
  Tensor<double> x({1, 1, 4, 4});
  std::vector<double> values(16);
  for (int i = 0; i < 16; ++i) values[i] = i;
  for (int i = 15; i > 0; --i) std::swap(values[i], values[rng.below(i + 1)]);
  for (int i = 0; i < 16; ++i) x[i] = values[i];
  Tape<double> tape;
  const auto y = max_pool2d(tape.constant(x), 2, 2).value();
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 2; ++j) {
      double m = -1;
      for (Index a = 0; a < 2; ++a)
        for (Index b = 0; b < 2; ++b) m = std::max(m, x.at(0, 0, 2 * i + a, 2 * j + b));
      EXPECT_EQ(y.at(0, 0, i, j), m);
    }
}

TEST(MaxPool, TieRoutesGradientToFirstCell) {
  Tape<double> tape;
  const auto x = tape.input(Tensor<double>::filled({1, 1, 2, 2}, 3.0));
  tape.backward(mean(max_pool2d(x, 2, 2)));
  const auto& g = *tape.grad(x);
  EXPECT_EQ(g[0], 1.0);
  EXPECT_EQ(g[1] + g[2] + g[3], 0.0);
}

TEST(MaxPool, WindowLargerThanInputThrows) {
  Tape<double> tape;
  EXPECT_THROW(max_pool2d(tape.constant(Tensor<double>({1, 1, 2, 2})), 3, 1), ShapeError);
}

TEST(GlobalAvgPool, Examples) {
  Tape<double> tape;
  EXPECT_EQ(global_avg_pool(tape.constant(map4(2, 2, {2, 4, 6, 8}))).value()[0], 5.0);
  EXPECT_EQ(global_avg_pool(tape.constant(Tensor<double>::filled({1, 1, 3, 5}, 2.5))).value()[0], 2.5);
  EXPECT_EQ(global_avg_pool(tape.constant(map4(1, 1, {-1.25}))).value()[0], -1.25);
}

TEST(Linear, Examples) {
  Tape<double> tape;
  const auto y = linear(tape.constant(Tensor<double>({1, 2}, {1, 2})), tape.constant(Tensor<double>({1, 2}, {3, 4})),
                        std::optional<Var<double>>(tape.constant(Tensor<double>({1}, {1}))))
                     .value();
  EXPECT_EQ(y[0], 12);
  const Tensor<double> x({2, 3}, {1, -2, 3, 4, 5, -6});
  const auto id = linear(tape.constant(x), tape.constant(Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1})),
                         std::optional<Var<double>>(tape.constant(Tensor<double>({3}))))
                      .value();
  EXPECT_EQ(id.data(), x.data());
  const auto b = linear(tape.constant(Tensor<double>({2, 3})), tape.constant(Tensor<double>::filled({2, 3}, 9.0)),
                        std::optional<Var<double>>(tape.constant(Tensor<double>({2}, {0.5, -1}))))
                     .value();
  EXPECT_EQ(b.data(), (VectorX<double>(4) << 0.5, -1, 0.5, -1).finished());
}

TEST(Linear, DimensionMismatchThrows) {
  Tape<double> tape;
  EXPECT_THROW(linear(tape.constant(Tensor<double>({1, 2})), tape.constant(Tensor<double>({1, 3}))), ShapeError);
}

TEST(L2Normalize, Examples) {
  Tape<double> tape;
  const auto y = l2_normalize(tape.constant(Tensor<double>({1, 2, 1, 1}, {3, 4}))).value();
  EXPECT_DOUBLE_EQ(y[0], 0.6);
  EXPECT_DOUBLE_EQ(y[1], 0.8);
  const auto u = l2_normalize(tape.constant(Tensor<double>({1, 2}, {0, 1}))).value();
  EXPECT_EQ(u[0], 0);
  EXPECT_EQ(u[1], 1);
  const auto z = l2_normalize(tape.constant(Tensor<double>({1, 3, 2, 2}))).value();
  EXPECT_TRUE(z.all_finite());
  EXPECT_EQ(z.data().cwiseAbs().maxCoeff(), 0.0);
}

TEST(L2Normalize, UnitNormAboveThreshold) {
  Rng rng(6);
  for (int k = 0; k < 200; ++k) {
    Tensor<double> x({1, 5, 1, 1});
    const double scale = std::pow(10.0, rng.uniform(-10.9, 3));
    for (Index i = 0; i < 5; ++i) x[i] = rng.uniform(-1, 1) * scale;
    if (x.data().norm() < 10 * kNormEps) continue;
    Tape<double> tape;
    EXPECT_NEAR(l2_normalize(tape.constant(x)).value().data().norm(), 1.0, 1e-6);
  }
}

TEST(BilinearUpsample, ConstantAndIdentity) {
  Tape<double> tape;
  const auto c = bilinear_upsample(tape.constant(Tensor<double>::filled({1, 2, 3, 2}, 1.5)), 7, 9).value();
  for (Index i = 0; i < c.size(); ++i) EXPECT_DOUBLE_EQ(c[i], 1.5);
  Rng rng(7);
  const auto x = integer_tensor({2, 1, 3, 4}, rng, -3, 3);
  EXPECT_EQ(bilinear_upsample(tape.constant(x), 3, 4).value().data(), x.data());
}

TEST(BilinearUpsample, TwoByTwoToFourByFourMatchesCoordinateFormula) {
  Tape<double> tape;
  const auto x = map4(2, 2, {0, 1, 0, 1});
  const auto y = bilinear_upsample(tape.constant(x), 4, 4).value();
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) {
      Index y0, y1, x0, x1;
      double ty, tx;
      oracle::bilinear_source(i, 2, 4, y0, y1, ty);
      oracle::bilinear_source(j, 2, 4, x0, x1, tx);
      const double top = (1 - tx) * x.at(0, 0, y0, x0) + tx * x.at(0, 0, y0, x1);
      const double bot = (1 - tx) * x.at(0, 0, y1, x0) + tx * x.at(0, 0, y1, x1);
      EXPECT_NEAR(y.at(0, 0, i, j), (1 - ty) * top + ty * bot, 1e-15);
    }
  // Each row reads 0, 0.25, 0.75, 1.
  EXPECT_DOUBLE_EQ(y.at(0, 0, 2, 1), 0.25);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 3, 2), 0.75);
}

TEST(BilinearUpsample, StaysWithinInputBounds) {
  Rng rng(8);
  for (int k = 0; k < 100; ++k) {
    const Index h = 1 + rng.below(5), w = 1 + rng.below(5);
    Tensor<double> x({1, 1, h, w});
    for (Index i = 0; i < x.size(); ++i) x[i] = rng.uniform(-3, 3);
    Tape<double> tape;
    const auto y = bilinear_upsample(tape.constant(x), h + rng.below(9), w + rng.below(9)).value();
    EXPECT_GE(y.data().minCoeff(), x.data().minCoeff());
    EXPECT_LE(y.data().maxCoeff(), x.data().maxCoeff());
  }
}

TEST(BilinearUpsample, ZeroSizeOrShrinkingThrows) {
  Tape<double> tape;
  const auto x = tape.constant(Tensor<double>({1, 1, 2, 2}));
  EXPECT_THROW(bilinear_upsample(x, 0, 4), ShapeError);
  EXPECT_THROW(bilinear_upsample(x, 1, 4), ShapeError);
}

TEST(Dropout, EvalAndZeroRateAreIdentity) {
  Rng rng(9), data(10);
  Tensor<double> x({3, 7});
  for (Index i = 0; i < x.size(); ++i) x[i] = data.uniform(-1, 1);
  Tape<double> tape;
  EXPECT_EQ(dropout(tape.constant(x), 0.5, rng, false).value().data(), x.data());
  EXPECT_EQ(dropout(tape.constant(x), 0.0, rng, true).value().data(), x.data());
}

TEST(Dropout, SeededMaskIsReproducibleAndInverted) {
  const Tensor<double> x = Tensor<double>::filled({1000}, 1.0);
  Rng a(11), b(11);
  Tape<double> tape;
  const auto ya = dropout(tape.constant(x), 0.5, a, true).value();
  const auto yb = dropout(tape.constant(x), 0.5, b, true).value();
  EXPECT_EQ(ya.data(), yb.data());
  Index kept = 0;
  for (Index i = 0; i < ya.size(); ++i) {
    EXPECT_TRUE(ya[i] == 0.0 || ya[i] == 2.0);
    kept += ya[i] != 0.0;
  }
  EXPECT_GT(kept, 400);
  EXPECT_LT(kept, 600);
}

TEST(Dropout, RateOutsideRangeThrows) {
  Rng rng(12);
  Tape<double> tape;
  EXPECT_THROW(dropout(tape.constant(Tensor<double>({2})), 1.0, rng, true), ValueError);
}

TEST(CosineDissimilarity, ZeroVectorsAgree) {
  Tape<double> tape;
  const auto z = tape.constant(Tensor<double>({1, 3, 2, 2}));
  const auto d = cosine_dissimilarity(z, z).value();
  EXPECT_EQ(d.data().cwiseAbs().maxCoeff(), 0.0);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogK) {
  Tape<double> tape;
  const std::vector<int> labels{0, 3};
  EXPECT_NEAR(softmax_cross_entropy(tape.constant(Tensor<double>({2, 4})), std::span<const int>(labels)).value()[0],
              std::log(4.0), 1e-15);
}

TEST(ResizeBilinear, DownsampleOfConstantIsConstant) {
  const auto y = resize_bilinear(Tensor<float>::filled({1, 1, 8, 8}, 0.25f), 3, 5);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 5}));
  for (Index i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], 0.25f);
}
