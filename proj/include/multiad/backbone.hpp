#pragma once

#include <optional>
#include <vector>

#include "multiad/module.hpp"

namespace multiad {

struct BackboneConfig {
  Index in_channels = 1;
  Index stem_filters = 16;
  std::vector<Index> widths{16, 32, 64, 128};
  Index blocks_per_stage = 2;
  std::vector<Index> dilations{1, 2, 4, 8};
  bool se_enabled = true;
  bool fusion_enabled = true;
  Index se_reduction = 4;

  /// Width of the fused level: half the deepest stage width.
  Index fused_width() const { return widths.back() / 2; }
  std::size_t level_count() const { return widths.size() + (fusion_enabled ? 1 : 0); }
  /// Channel count of every pyramid level in order.
  std::vector<Index> level_widths() const;

  void validate() const;
};

template <class S>
struct SEParams {
  Tensor<S> reduce;  // [c/r, c]
  Tensor<S> expand;  // [c, c/r]
};

template <class S>
struct ResBlockParams {
  Tensor<S> conv1;
  BatchNormParams<S> bn1;
  Tensor<S> conv2;
  BatchNormParams<S> bn2;
  std::optional<Tensor<S>> projection;  // 1x1, present when widths differ
  Index dilation = 1;
};

template <class S>
struct StageParams {
  std::vector<ResBlockParams<S>> blocks;
  SEParams<S> se;
};

template <class S>
struct BackboneParams {
  BackboneConfig config;
  Tensor<S> stem_conv;
  BatchNormParams<S> stem_bn;
  std::vector<StageParams<S>> stages;
  Tensor<S> fuse_conv;
  BatchNormParams<S> fuse_bn;

  static BackboneParams init(const BackboneConfig& config, Rng& rng);

  /// Every tensor under stable hierarchical names, in a fixed order.
  ParamList<S> parameters(const std::string& prefix);
};

template <class S>
struct FeaturePyramid {
  std::vector<Var<S>> levels;
};

/// conv7x7/2 -> BN -> ReLU -> maxpool3x3/2; input extents must be divisible by 4.
template <class S>
Var<S> stem(Var<S> image, BackboneParams<S>& params, const ForwardMode& mode);

/// Squeeze (channel means), excitation (sigmoid(expand * relu(reduce * z))),
/// then per-channel rescaling of `x`.
template <class S>
Var<S> se_block(Var<S> x, SEParams<S>& se, const ForwardMode& mode);

/// ReLU(BN(conv3x3_r(ReLU(BN(conv3x3_r(x))))) + shortcut(x)), stride 1,
/// padding = dilation so the spatial extent is preserved.
template <class S>
Var<S> res_block(Var<S> x, ResBlockParams<S>& block, const ForwardMode& mode);

/// ReLU(BN(conv1x1([low, up]))) along the channel axis.
template <class S>
Var<S> fuse_features(Var<S> low, Var<S> up, Tensor<S>& conv, BatchNormParams<S>& bn, const ForwardMode& mode);

template <class S>
FeaturePyramid<S> forward_pyramid(Var<S> image, BackboneParams<S>& params, const ForwardMode& mode);

}  // namespace multiad
