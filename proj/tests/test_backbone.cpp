#include <gtest/gtest.h>

#include "multiad/backbone.hpp"

using namespace multiad;

namespace {

template <class S>
Tensor<S> random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<S> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = S(rng.uniform(lo, hi));
  return t;
}

BackboneConfig toy_config() {
  BackboneConfig c;
  c.stem_filters = 4;
  c.widths = {4, 8};
  c.dilations = {1, 2};
  c.blocks_per_stage = 1;
  return c;
}

template <class S>
ResBlockParams<S> make_block(Index in, Index out, Index dilation, Rng& rng) {
  ResBlockParams<S> b;
  b.dilation = dilation;
  b.conv1 = random_tensor<S>({out, in, 3, 3}, rng);
  b.bn1 = BatchNormParams<S>::make(out);
  b.conv2 = random_tensor<S>({out, out, 3, 3}, rng);
  b.bn2 = BatchNormParams<S>::make(out);
  if (in != out) b.projection = random_tensor<S>({out, in, 1, 1}, rng);
  return b;
}

}  // namespace

TEST(Stem, QuartersTheSpatialExtent) {
  Rng rng(1);
  BackboneConfig c;
  auto p = BackboneParams<float>::init(c, rng);
  Tape<float> tape;
  EXPECT_EQ(stem(tape.constant(random_tensor<float>({2, 1, 64, 64}, rng)), p, kInference).shape(),
            (Shape{2, 16, 16, 16}));
  EXPECT_EQ(stem(tape.constant(random_tensor<float>({1, 1, 256, 256}, rng)), p, kInference).shape(),
            (Shape{1, 16, 64, 64}));
}

TEST(Stem, ZeroImageGivesZeroFeatures) {
  Rng rng(2);
  auto p = BackboneParams<float>::init(BackboneConfig{}, rng);
  Tape<float> tape;
  const auto y = stem(tape.constant(Tensor<float>({1, 1, 32, 32})), p, kInference).value();
  EXPECT_EQ(y.data().cwiseAbs().maxCoeff(), 0.0f);
}

TEST(Stem, ExtentNotDivisibleByFourThrows) {
  Rng rng(3);
  auto p = BackboneParams<float>::init(BackboneConfig{}, rng);
  Tape<float> tape;
  EXPECT_THROW(stem(tape.constant(Tensor<float>({1, 1, 30, 32})), p, kInference), ShapeError);
}

TEST(SEBlock, ZeroWeightsHalveTheInput) {
  Rng rng(4);
  SEParams<double> se{Tensor<double>({2, 8}), Tensor<double>({8, 2})};
  const auto x = random_tensor<double>({2, 8, 3, 3}, rng);
  Tape<double> tape;
  const auto y = se_block(tape.constant(x), se, kInference).value();
  for (Index i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i] / 2);
}

TEST(SEBlock, ZeroInputGivesZero) {
  Rng rng(5);
  SEParams<double> se{random_tensor<double>({2, 8}, rng), random_tensor<double>({8, 2}, rng)};
  Tape<double> tape;
  const auto y = se_block(tape.constant(Tensor<double>({1, 8, 4, 4})), se, kInference).value();
  EXPECT_EQ(y.data().cwiseAbs().maxCoeff(), 0.0);
}

TEST(SEBlock, ChannelsScaledByExcitation) {
  Rng rng(6);
  const Index c = 8, r = 4;
  SEParams<double> se{random_tensor<double>({c / r, c}, rng), random_tensor<double>({c, c / r}, rng)};
  const auto x = random_tensor<double>({2, c, 3, 5}, rng);
  Tape<double> tape;
  const auto y = se_block(tape.constant(x), se, kInference).value();
  for (Index n = 0; n < 2; ++n) {
    VectorX<double> z(c);
    for (Index ch = 0; ch < c; ++ch) {
      double acc = 0;
      for (Index i = 0; i < 15; ++i) acc += x[(n * c + ch) * 15 + i];
      z[ch] = acc / 15;
    }
    const Eigen::Map<const MatrixX<double>> t1(se.reduce.data().data(), c / r, c);
    const Eigen::Map<const MatrixX<double>> t2(se.expand.data().data(), c, c / r);
    const VectorX<double> h = (t1 * z).cwiseMax(0.0);
    const VectorX<double> s = ((-(t2 * h).array()).exp() + 1.0).inverse().matrix();
    for (Index ch = 0; ch < c; ++ch)
      for (Index i = 0; i < 15; ++i) {
        const Index k = (n * c + ch) * 15 + i;
        EXPECT_NEAR(y[k], s[ch] * x[k], 1e-14);
      }
  }
}

TEST(ResBlock, DeadResidualBranchGivesReluOfInput) {
  Rng rng(7);
  auto b = make_block<double>(4, 4, 2, rng);
  b.conv1.data().setZero();
  b.conv2.data().setZero();
  b.bn2.gamma.data().setZero();
  const auto x = random_tensor<double>({2, 4, 6, 6}, rng);
  Tape<double> tape;
  const auto y = res_block(tape.constant(x), b, kInference).value();
  for (Index i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], std::max(0.0, x[i]));
}

TEST(ResBlock, PreservesExtentForEveryDilation) {
  Rng rng(8);
  for (Index r : {1, 2, 4, 8}) {
    auto b = make_block<float>(4, 6, r, rng);
    Tape<float> tape;
    EXPECT_EQ(res_block(tape.constant(random_tensor<float>({1, 4, 16, 16}, rng)), b, kInference).shape(),
              (Shape{1, 6, 16, 16}));
  }
}

TEST(ResBlock, ShortcutCarriesGradientWithZeroConvolutions) {
  Rng rng(9);
  auto b = make_block<double>(3, 3, 1, rng);
  b.conv1.data().setZero();
  b.conv2.data().setZero();
  Tape<double> tape;
  const auto x = tape.input(random_tensor<double>({1, 3, 4, 4}, rng, 0.1, 1.0));
  tape.backward(mean(res_block(x, b, kInference)));
  EXPECT_GT(tape.grad(x)->cwiseAbs().minCoeff(), 0.0);
}

TEST(FuseFeatures, ZeroKernelGivesZero) {
  Rng rng(10);
  Tensor<double> conv({3, 6, 1, 1});
  auto bn = BatchNormParams<double>::make(3);
  Tape<double> tape;
  const auto y = fuse_features(tape.constant(random_tensor<double>({1, 2, 4, 4}, rng)),
                               tape.constant(random_tensor<double>({1, 4, 4, 4}, rng)), conv, bn, kInference)
                     .value();
  EXPECT_EQ(y.shape(), (Shape{1, 3, 4, 4}));
  EXPECT_EQ(y.data().cwiseAbs().maxCoeff(), 0.0);
}

TEST(FuseFeatures, SelectorKernelReproducesChosenChannels) {
  Rng rng(11);
  const auto low = random_tensor<double>({2, 2, 3, 3}, rng, 0, 1);
  const auto up = random_tensor<double>({2, 4, 3, 3}, rng, 0, 1);
  const std::vector<Index> pick{5, 0, 3};  // channels of the concatenation [low, up]
  Tensor<double> conv({3, 6, 1, 1});
  for (Index o = 0; o < 3; ++o) conv[o * 6 + pick[o]] = 1.0;
  auto bn = BatchNormParams<double>::make(3);
  bn.running_var.data().setConstant(1.0 - 1e-5);
  Tape<double> tape;
  const auto y = fuse_features(tape.constant(low), tape.constant(up), conv, bn, kInference).value();
  for (Index n = 0; n < 2; ++n)
    for (Index o = 0; o < 3; ++o)
      for (Index i = 0; i < 3; ++i)
        for (Index j = 0; j < 3; ++j) {
          const double expect = pick[o] < 2 ? low.at(n, pick[o], i, j) : up.at(n, pick[o] - 2, i, j);
          EXPECT_NEAR(y.at(n, o, i, j), expect, 1e-12);
        }
}

TEST(FuseFeatures, SpatialMismatchThrows) {
  Tensor<double> conv({1, 2, 1, 1});
  auto bn = BatchNormParams<double>::make(1);
  Tape<double> tape;
  EXPECT_THROW(fuse_features(tape.constant(Tensor<double>({1, 1, 4, 4})), tape.constant(Tensor<double>({1, 1, 2, 2})),
                             conv, bn, kInference),
               ShapeError);
}

TEST(ForwardPyramid, DeskConfigShapes) {
  Rng rng(12);
  auto p = BackboneParams<float>::init(BackboneConfig{}, rng);
  Tape<float> tape;
  const auto pyr = forward_pyramid(tape.constant(random_tensor<float>({2, 1, 64, 64}, rng, 0, 1)), p, kInference);
  ASSERT_EQ(pyr.levels.size(), 5u);
  const std::vector<Index> widths{16, 32, 64, 128, 64};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(pyr.levels[i].shape(), (Shape{2, widths[i], 16, 16}));
}

TEST(ForwardPyramid, FusionOffGivesOneLevelPerStage) {
  Rng rng(13);
  BackboneConfig c = toy_config();
  c.fusion_enabled = false;
  auto p = BackboneParams<float>::init(c, rng);
  Tape<float> tape;
  EXPECT_EQ(forward_pyramid(tape.constant(random_tensor<float>({1, 1, 16, 16}, rng)), p, kInference).levels.size(),
            2u);
  EXPECT_EQ(c.level_count(), 2u);
}

TEST(ForwardPyramid, EvalModeIsDeterministicAndPure) {
  Rng rng(14);
  auto p = BackboneParams<float>::init(toy_config(), rng);
  const auto x = random_tensor<float>({2, 1, 16, 16}, rng, 0, 1);
  const auto before = p.parameters("b");
  std::vector<VectorX<float>> snapshot;
  for (const auto& t : before) snapshot.push_back(t.tensor->data());
  Tape<float> a, b;
  const auto pa = forward_pyramid(a.constant(x), p, kInference);
  const auto pb = forward_pyramid(b.constant(x), p, kInference);
  for (std::size_t i = 0; i < pa.levels.size(); ++i) EXPECT_EQ(pa.levels[i].value().data(), pb.levels[i].value().data());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].tensor->data(), snapshot[i]);
}

TEST(ForwardPyramid, SEToggleChangesOutputs) {
  Rng rng(15);
  auto on = BackboneParams<float>::init(toy_config(), rng);
  auto off = on;
  off.config.se_enabled = false;
  const auto x = random_tensor<float>({1, 1, 16, 16}, rng, 0, 1);
  Tape<float> tape;
  const auto a = forward_pyramid(tape.constant(x), on, kInference);
  const auto b = forward_pyramid(tape.constant(x), off, kInference);
  EXPECT_NE(a.levels[0].value().data(), b.levels[0].value().data());
}

TEST(ForwardPyramid, ZeroSEWeightsHalveSingleStage) {
  Rng rng(16);
  BackboneConfig c;
  c.stem_filters = 4;
  c.widths = {8};
  c.dilations = {2};
  c.fusion_enabled = false;
  auto on = BackboneParams<double>::init(c, rng);
  on.stages[0].se.reduce.data().setZero();
  on.stages[0].se.expand.data().setZero();
  auto off = on;
  off.config.se_enabled = false;
  const auto x = random_tensor<double>({2, 1, 16, 16}, rng, 0, 1);
  Tape<double> tape;
  const auto a = forward_pyramid(tape.constant(x), on, kInference).levels[0].value();
  const auto b = forward_pyramid(tape.constant(x), off, kInference).levels[0].value();
  for (Index i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], 0.5 * b[i]);
}

TEST(BackboneConfig, ValidationRejectsBadSchedules) {
  BackboneConfig c;
  c.dilations = {1, 2, 0, 8};
  EXPECT_THROW(c.validate(), ConfigError);
  c = BackboneConfig{};
  c.se_reduction = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = BackboneConfig{};
  c.widths = {16, 32, 64};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(BackboneParams, SameSeedSameInitialization) {
  Rng a(17), b(17);
  auto pa = BackboneParams<float>::init(BackboneConfig{}, a);
  auto pb = BackboneParams<float>::init(BackboneConfig{}, b);
  const auto la = pa.parameters("x"), lb = pb.parameters("x");
  ASSERT_EQ(la.size(), lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_EQ(la[i].name, lb[i].name);
    EXPECT_EQ(la[i].tensor->data(), lb[i].tensor->data());
  }
}
