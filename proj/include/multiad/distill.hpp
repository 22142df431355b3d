#pragma once

#include <array>
#include <span>
#include <vector>

#include "multiad/backbone.hpp"

namespace multiad {

/// L2-normalized channel vectors at every site of every level.
template <class S>
struct NormalizedPyramid {
  std::vector<Var<S>> levels;
};

template <class S>
NormalizedPyramid<S> normalize_pyramid(const FeaturePyramid<S>& pyramid);

/// Mean over levels of the per-level mean cosine distance between teacher
/// and student activation vectors. Gradients reach only tracked inputs, so
/// pass the teacher as constants.
template <class S>
Var<S> loss_generator(const NormalizedPyramid<S>& teacher, const NormalizedPyramid<S>& student);

inline constexpr std::array<Index, 4> kDiscriminatorWidths{128, 256, 512, 1024};

struct DiscriminatorConfig {
  double width_factor = 1.0;
  double dropout = 0.3;
  double leaky_slope = 0.2;

  /// Filter counts after applying `width_factor` (at least 1 each).
  std::array<Index, 4> widths() const;
  void validate() const;
};

template <class S>
struct DiscriminatorParams {
  DiscriminatorConfig config;
  Index in_channels = 0, height = 0, width = 0;
  std::array<Tensor<S>, 4> convs;
  std::array<BatchNormParams<S>, 4> bns;
  Tensor<S> fc_weight;  // [1, widths[3] * h * w]
  Tensor<S> fc_bias;    // [1]

  static DiscriminatorParams init(const DiscriminatorConfig& config, Index in_channels, Index height, Index width,
                                  Rng& rng);
  ParamList<S> parameters(const std::string& prefix);
};

/// Four conv3x3(stride 1, pad 1) -> BN -> LeakyReLU stages, dropout, flatten,
/// FC to one logit, sigmoid. Returns probabilities of shape [b].
template <class S>
Var<S> discriminator_forward(Var<S> features, DiscriminatorParams<S>& params, Rng& rng, const ForwardMode& mode,
                             bool train_dropout);

inline constexpr double kLogEps = 1e-7;

/// -(1/m) sum [log d_real + log(1 - d_fake)] with probabilities clamped to
/// [eps, 1 - eps].
template <class S>
Var<S> loss_discriminator(Var<S> d_real, Var<S> d_fake, double eps = kLogEps);

/// -(1/m) sum log d_fake.
template <class S>
Var<S> loss_adversarial(Var<S> d_fake, double eps = kLogEps);

/// L_G + lambda * L_adv.
template <class S>
Var<S> loss_student(Var<S> loss_g, Var<S> loss_adv, double lambda);

struct LossReport {
  double loss_g = 0;
  double loss_d = 0;
  double loss_adv = 0;
  double loss_s = 0;
  double lambda = 0;
  bool adversarial = false;
};

}  // namespace multiad
