#include "multiad/distill.hpp"

#include <algorithm>
#include <cmath>

namespace multiad {

template <class S>
NormalizedPyramid<S> normalize_pyramid(const FeaturePyramid<S>& pyramid) {
  NormalizedPyramid<S> out;
  out.levels.reserve(pyramid.levels.size());
  for (const Var<S>& level : pyramid.levels) out.levels.push_back(l2_normalize(level));
  return out;
}

template <class S>
Var<S> loss_generator(const NormalizedPyramid<S>& teacher, const NormalizedPyramid<S>& student) {
  if (teacher.levels.empty() || teacher.levels.size() != student.levels.size()) {
    throw ShapeError("loss_generator: pyramids have " + std::to_string(teacher.levels.size()) + " and " +
                     std::to_string(student.levels.size()) + " levels");
  }
  const double layers = static_cast<double>(teacher.levels.size());
  Var<S> total;
  for (std::size_t i = 0; i < teacher.levels.size(); ++i) {
    if (teacher.levels[i].shape() != student.levels[i].shape()) {
      throw ShapeError("loss_generator: level " + std::to_string(i) + " shape mismatch");
    }
    Var<S> level = mean(cosine_dissimilarity(teacher.levels[i], student.levels[i]));
    total = total.valid() ? add(total, level) : level;
  }
  return affine(total, 1.0 / layers, 0.0);
}

std::array<Index, 4> DiscriminatorConfig::widths() const {
  std::array<Index, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = std::max<Index>(1, static_cast<Index>(std::lround(kDiscriminatorWidths[i] * width_factor)));
  }
  return out;
}

void DiscriminatorConfig::validate() const {
  if (!(width_factor > 0.0)) throw ConfigError("discriminator: width_factor must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("discriminator: dropout must lie in [0,1)");
  if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("discriminator: leaky_slope must lie in (0,1)");
}

template <class S>
DiscriminatorParams<S> DiscriminatorParams<S>::init(const DiscriminatorConfig& config, Index in_channels,
                                                    Index height, Index width, Rng& rng) {
  config.validate();
  if (in_channels < 1 || height < 1 || width < 1) throw ShapeError("discriminator: empty input geometry");
  DiscriminatorParams<S> p;
  p.config = config;
  p.in_channels = in_channels;
  p.height = height;
  p.width = width;
  const auto widths = config.widths();
  Index in = in_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    p.convs[i] = he_normal<S>({widths[i], in, 3, 3}, in * 9, rng);
    p.bns[i] = BatchNormParams<S>::make(widths[i]);
    in = widths[i];
  }
  const Index flat = widths[3] * height * width;
  // Sigmoid head: plain fan-in scaling keeps initial logits O(1).
  Tensor<S> fc({1, flat});
  const double sigma = 1.0 / std::sqrt(static_cast<double>(flat));
  for (Index i = 0; i < fc.size(); ++i) fc[i] = S(rng.normal() * sigma);
  p.fc_weight = std::move(fc);
  p.fc_bias = Tensor<S>({1});
  return p;
}

template <class S>
ParamList<S> DiscriminatorParams<S>::parameters(const std::string& prefix) {
  ParamList<S> out;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string lp = prefix + ".layer" + std::to_string(i + 1);
    out.push_back({lp + ".conv", &convs[i], true});
    bns[i].collect(lp + ".bn", out);
  }
  out.push_back({prefix + ".fc.weight", &fc_weight, true});
  out.push_back({prefix + ".fc.bias", &fc_bias, true});
  return out;
}

template <class S>
Var<S> discriminator_forward(Var<S> features, DiscriminatorParams<S>& params, Rng& rng, const ForwardMode& mode,
                             bool train_dropout) {
  const Shape& s = features.shape();
  if (s.size() != 4 || s[1] != params.in_channels || s[2] != params.height || s[3] != params.width) {
    throw ShapeError("discriminator: expected [b," + std::to_string(params.in_channels) + "," +
                     std::to_string(params.height) + "," + std::to_string(params.width) + "], got " + shape_string(s));
  }
  Tape<S>& tape = *features.tape;
  Var<S> x = features;
  for (std::size_t i = 0; i < 4; ++i) {
    x = conv2d(x, bind(tape, params.convs[i], mode), {1, 1, 1});
    x = leaky_relu(params.bns[i].apply(x, mode), params.config.leaky_slope);
  }
  x = dropout(x, params.config.dropout, rng, train_dropout);
  const Index batch = s[0];
  x = reshape(x, {batch, x.value().size() / batch});
  x = linear(x, bind(tape, params.fc_weight, mode), std::optional<Var<S>>(bind(tape, params.fc_bias, mode)));
  return reshape(sigmoid(x), {batch});
}

namespace {

template <class S>
void check_probs(const Var<S>& p, const char* op) {
  if (p.value().size() < 1) throw ValueError(std::string(op) + ": empty batch");
}

}  // namespace

template <class S>
Var<S> loss_discriminator(Var<S> d_real, Var<S> d_fake, double eps) {
  check_probs(d_real, "loss_discriminator");
  check_probs(d_fake, "loss_discriminator");
  if (d_real.value().size() != d_fake.value().size()) {
    throw ShapeError("loss_discriminator: real and fake batches differ in size");
  }
  Var<S> real_term = mean(log_clamped(d_real, eps));
  Var<S> fake_term = mean(log_clamped(affine(d_fake, -1.0, 1.0), eps));
  return affine(add(real_term, fake_term), -1.0, 0.0);
}

template <class S>
Var<S> loss_adversarial(Var<S> d_fake, double eps) {
  check_probs(d_fake, "loss_adversarial");
  return affine(mean(log_clamped(d_fake, eps)), -1.0, 0.0);
}

template <class S>
Var<S> loss_student(Var<S> loss_g, Var<S> loss_adv, double lambda) {
  if (!(lambda >= 0.0)) throw ValueError("loss_student: lambda must be non-negative");
  return add(loss_g, affine(loss_adv, lambda, 0.0));
}

template struct DiscriminatorParams<float>;
template struct DiscriminatorParams<double>;

#define MULTIAD_INSTANTIATE_DISTILL(S)                                                                    \
  template NormalizedPyramid<S> normalize_pyramid(const FeaturePyramid<S>&);                              \
  template Var<S> loss_generator(const NormalizedPyramid<S>&, const NormalizedPyramid<S>&);               \
  template Var<S> discriminator_forward(Var<S>, DiscriminatorParams<S>&, Rng&, const ForwardMode&, bool); \
  template Var<S> loss_discriminator(Var<S>, Var<S>, double);                                             \
  template Var<S> loss_adversarial(Var<S>, double);                                                       \
  template Var<S> loss_student(Var<S>, Var<S>, double);

MULTIAD_INSTANTIATE_DISTILL(float)
MULTIAD_INSTANTIATE_DISTILL(double)

}  // namespace multiad
