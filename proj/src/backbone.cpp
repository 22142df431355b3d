#include "multiad/backbone.hpp"

#include <array>

namespace multiad {

std::vector<Index> BackboneConfig::level_widths() const {
  std::vector<Index> out = widths;
  if (fusion_enabled) out.push_back(fused_width());
  return out;
}

void BackboneConfig::validate() const {
  if (in_channels < 1) throw ConfigError("backbone: in_channels must be >= 1");
  if (stem_filters < 1) throw ConfigError("backbone: stem_filters must be >= 1");
  if (widths.empty()) throw ConfigError("backbone: at least one stage is required");
  if (widths.size() != dilations.size()) throw ConfigError("backbone: widths and dilations differ in length");
  if (blocks_per_stage < 1) throw ConfigError("backbone: blocks_per_stage must be >= 1");
  if (se_reduction < 1) throw ConfigError("backbone: se_reduction must be >= 1");
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] < 1) throw ConfigError("backbone: stage widths must be positive");
    if (dilations[i] < 1) throw ConfigError("backbone: dilation rates must be >= 1");
    if (widths[i] % se_reduction != 0) {
      throw ConfigError("backbone: se_reduction " + std::to_string(se_reduction) + " does not divide width " +
                        std::to_string(widths[i]));
    }
  }
  if (fusion_enabled && fused_width() < 1) throw ConfigError("backbone: fused width would be zero");
}

template <class S>
BackboneParams<S> BackboneParams<S>::init(const BackboneConfig& config, Rng& rng) {
  config.validate();
  BackboneParams<S> p;
  p.config = config;
  p.stem_conv = he_normal<S>({config.stem_filters, config.in_channels, 7, 7}, config.in_channels * 49, rng);
  p.stem_bn = BatchNormParams<S>::make(config.stem_filters);
  Index in = config.stem_filters;
  for (std::size_t s = 0; s < config.widths.size(); ++s) {
    const Index width = config.widths[s];
    StageParams<S> stage;
    for (Index b = 0; b < config.blocks_per_stage; ++b) {
      ResBlockParams<S> block;
      block.dilation = config.dilations[s];
      block.conv1 = he_normal<S>({width, in, 3, 3}, in * 9, rng);
      block.bn1 = BatchNormParams<S>::make(width);
      block.conv2 = he_normal<S>({width, width, 3, 3}, width * 9, rng);
      block.bn2 = BatchNormParams<S>::make(width);
      if (in != width) block.projection = he_normal<S>({width, in, 1, 1}, in, rng);
      stage.blocks.push_back(std::move(block));
      in = width;
    }
    const Index hidden = width / config.se_reduction;
    stage.se.reduce = he_normal<S>({hidden, width}, width, rng);
    stage.se.expand = he_normal<S>({width, hidden}, hidden, rng);
    p.stages.push_back(std::move(stage));
  }
  if (config.fusion_enabled) {
    const Index cat = config.widths.front() + config.widths.back();
    p.fuse_conv = he_normal<S>({config.fused_width(), cat, 1, 1}, cat, rng);
    p.fuse_bn = BatchNormParams<S>::make(config.fused_width());
  }
  return p;
}

template <class S>
ParamList<S> BackboneParams<S>::parameters(const std::string& prefix) {
  ParamList<S> out;
  out.push_back({prefix + ".stem.conv", &stem_conv, true});
  stem_bn.collect(prefix + ".stem.bn", out);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string sp = prefix + ".stage" + std::to_string(s + 1);
    for (std::size_t b = 0; b < stages[s].blocks.size(); ++b) {
      auto& block = stages[s].blocks[b];
      const std::string bp = sp + ".block" + std::to_string(b + 1);
      out.push_back({bp + ".conv1", &block.conv1, true});
      block.bn1.collect(bp + ".bn1", out);
      out.push_back({bp + ".conv2", &block.conv2, true});
      block.bn2.collect(bp + ".bn2", out);
      if (block.projection) out.push_back({bp + ".projection", &*block.projection, true});
    }
    out.push_back({sp + ".se.reduce", &stages[s].se.reduce, true});
    out.push_back({sp + ".se.expand", &stages[s].se.expand, true});
  }
  if (config.fusion_enabled) {
    out.push_back({prefix + ".fuse.conv", &fuse_conv, true});
    fuse_bn.collect(prefix + ".fuse.bn", out);
  }
  return out;
}

template <class S>
Var<S> stem(Var<S> image, BackboneParams<S>& params, const ForwardMode& mode) {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[2] % 4 != 0 || s[3] % 4 != 0) {
    throw ShapeError("stem: input extents must be divisible by 4, got " + shape_string(s));
  }
  Tape<S>& tape = *image.tape;
  Var<S> y = conv2d(image, bind(tape, params.stem_conv, mode), {2, 3, 1});
  y = relu(params.stem_bn.apply(y, mode));
  return max_pool2d(y, 3, 2, 1);
}

template <class S>
Var<S> se_block(Var<S> x, SEParams<S>& se, const ForwardMode& mode) {
  Tape<S>& tape = *x.tape;
  Var<S> z = global_avg_pool(x);
  Var<S> h = relu(linear(z, bind(tape, se.reduce, mode)));
  Var<S> s = sigmoid(linear(h, bind(tape, se.expand, mode)));
  return scale_channels(x, s);
}

template <class S>
Var<S> res_block(Var<S> x, ResBlockParams<S>& block, const ForwardMode& mode) {
  if (block.dilation < 1) throw ValueError("res_block: dilation must be >= 1");
  Tape<S>& tape = *x.tape;
  const Conv2dOptions same{1, block.dilation, block.dilation};
  Var<S> h = relu(block.bn1.apply(conv2d(x, bind(tape, block.conv1, mode), same), mode));
  h = block.bn2.apply(conv2d(h, bind(tape, block.conv2, mode), same), mode);
  Var<S> shortcut = block.projection ? conv2d(x, bind(tape, *block.projection, mode)) : x;
  return relu(add(h, shortcut));
}

template <class S>
Var<S> fuse_features(Var<S> low, Var<S> up, Tensor<S>& conv, BatchNormParams<S>& bn, const ForwardMode& mode) {
  const Shape& a = low.shape();
  const Shape& b = up.shape();
  if (a.size() != 4 || b.size() != 4 || a[0] != b[0] || a[2] != b[2] || a[3] != b[3]) {
    throw ShapeError("fuse_features: spatial mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
  const std::array<Var<S>, 2> parts{low, up};
  Var<S> cat = concat_channels<S>(parts);
  return relu(bn.apply(conv2d(cat, bind(*low.tape, conv, mode)), mode));
}

template <class S>
FeaturePyramid<S> forward_pyramid(Var<S> image, BackboneParams<S>& params, const ForwardMode& mode) {
  if (image.shape().size() != 4 || image.dim(1) != params.config.in_channels) {
    throw ShapeError("forward_pyramid: expected [b," + std::to_string(params.config.in_channels) + ",h,w], got " +
                     shape_string(image.shape()));
  }
  FeaturePyramid<S> pyramid;
  Var<S> x = stem(image, params, mode);
  for (auto& stage : params.stages) {
    for (auto& block : stage.blocks) x = res_block(x, block, mode);
    if (params.config.se_enabled) x = se_block(x, stage.se, mode);
    pyramid.levels.push_back(x);
  }
  if (params.config.fusion_enabled) {
    pyramid.levels.push_back(
        fuse_features(pyramid.levels.front(), pyramid.levels.back(), params.fuse_conv, params.fuse_bn, mode));
  }
  return pyramid;
}

template struct BackboneParams<float>;
template struct BackboneParams<double>;

#define MULTIAD_INSTANTIATE_BACKBONE(S)                                                                   \
  template Var<S> stem(Var<S>, BackboneParams<S>&, const ForwardMode&);                                   \
  template Var<S> se_block(Var<S>, SEParams<S>&, const ForwardMode&);                                     \
  template Var<S> res_block(Var<S>, ResBlockParams<S>&, const ForwardMode&);                              \
  template Var<S> fuse_features(Var<S>, Var<S>, Tensor<S>&, BatchNormParams<S>&, const ForwardMode&);     \
  template FeaturePyramid<S> forward_pyramid(Var<S>, BackboneParams<S>&, const ForwardMode&);

MULTIAD_INSTANTIATE_BACKBONE(float)
MULTIAD_INSTANTIATE_BACKBONE(double)

}  // namespace multiad
