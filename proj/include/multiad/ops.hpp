#pragma once

#include <optional>
#include <span>
#include <vector>

#include "multiad/autograd.hpp"
#include "multiad/rng.hpp"

namespace multiad {

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
  Index dilation = 1;
};

/// Output extent of a convolution or pooling window along one axis.
Index conv_output_extent(Index in, Index kernel, Index stride, Index padding, Index dilation);

/// y[i,j] = sum_m sum_n x[i*stride - pad + r*m, j*stride - pad + r*n] * w[m,n],
/// summed over input channels. NCHW input, OIHW kernel.
template <class S>
Var<S> conv2d(Var<S> x, Var<S> kernel, const Conv2dOptions& opts = {});

enum class NormMode { kTrain, kEval };

struct BatchNormOptions {
  NormMode mode = NormMode::kTrain;
  double momentum = 0.1;
  double eps = 1e-5;
  // Only consulted in train mode.
  bool update_running_stats = true;
};

/// Per-channel batch normalization over [b,c] or [b,c,h,w]. Train mode uses
/// biased batch variance for normalization and the unbiased estimate for the
/// running variance.
template <class S>
Var<S> batch_norm(Var<S> x, Var<S> gamma, Var<S> beta, Tensor<S>& running_mean, Tensor<S>& running_var,
                  const BatchNormOptions& opts);

template <class S>
Var<S> relu(Var<S> x);

template <class S>
Var<S> leaky_relu(Var<S> x, double slope);

template <class S>
Var<S> sigmoid(Var<S> x);

/// Max over square windows; padded cells never win. Gradient goes to the
/// first maximal cell in row-major window order.
template <class S>
Var<S> max_pool2d(Var<S> x, Index window, Index stride, Index padding = 0);

/// [b,c,h,w] -> [b,c] channel means.
template <class S>
Var<S> global_avg_pool(Var<S> x);

/// x[b,n] * weight[m,n]^T (+ bias[m]).
template <class S>
Var<S> linear(Var<S> x, Var<S> weight, std::optional<Var<S>> bias = std::nullopt);

inline constexpr double kNormEps = 1e-12;

/// Divides each channel vector (axis 1) by max(||v||_2, eps).
template <class S>
Var<S> l2_normalize(Var<S> x, double eps = kNormEps);

/// Align-corners-false bilinear resize to a larger or equal extent.
template <class S>
Var<S> bilinear_upsample(Var<S> x, Index out_h, Index out_w);

/// Inverted dropout: survivors are scaled by 1/(1-p); identity when !train.
template <class S>
Var<S> dropout(Var<S> x, double p, Rng& rng, bool train);

template <class S>
Var<S> add(Var<S> a, Var<S> b);

/// a * x + b elementwise.
template <class S>
Var<S> affine(Var<S> x, double a, double b);

/// x[b,c,h,w] * s[b,c] broadcast over the spatial axes.
template <class S>
Var<S> scale_channels(Var<S> x, Var<S> s);

template <class S>
Var<S> concat_channels(std::span<const Var<S>> parts);

template <class S>
Var<S> concat_batch(std::span<const Var<S>> parts);

template <class S>
Var<S> slice_batch(Var<S> x, Index begin, Index count);

template <class S>
Var<S> reshape(Var<S> x, Shape shape);

/// Mean over all elements, as a [1] tensor.
template <class S>
Var<S> mean(Var<S> x);

/// log(clamp(x, eps, 1 - eps)); zero gradient where the clamp is active.
template <class S>
Var<S> log_clamped(Var<S> x, double eps);

/// Per-site cosine dissimilarity along the channel axis:
/// 1 - <a,b> / (max(|a|,eps) * max(|b|,eps)), output [b,1,h,w].
/// Sites where both vectors are below eps count as agreeing (value 0).
template <class S>
Var<S> cosine_dissimilarity(Var<S> a, Var<S> b, double eps = kNormEps);

/// Mean softmax cross-entropy of logits [b,k] against integer labels.
template <class S>
Var<S> softmax_cross_entropy(Var<S> logits, std::span<const int> labels);

/// Copies the value of `x` onto `tape` as an untracked constant.
template <class S>
Var<S> detach(Tape<S>& tape, Var<S> x) {
  return tape.constant(x.value());
}

/// Plain (non-differentiable) bilinear resize with the same coordinate
/// convention, usable for both up- and down-sampling.
template <class S>
Tensor<S> resize_bilinear(const Tensor<S>& x, Index out_h, Index out_w);

}  // namespace multiad
