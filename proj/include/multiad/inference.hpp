#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "multiad/ops.hpp"

namespace multiad {

/// Row-major single-channel map.
template <class S>
using Map2 = MatrixX<S>;

/// Per-site cosine dissimilarity of two [b,c,h,w] feature maps -> [b,1,h,w].
template <class S>
Tensor<S> anomaly_map_layer(const Tensor<S>& teacher, const Tensor<S>& student);

/// Scalar affine + eval-mode batch norm + ReLU applied to one level's map.
struct RefinementLevel {
  double scale = 1.0;
  double bias = 0.0;
  double mean = 0.0;
  double var = 1.0;
};

struct RefinementParams {
  std::vector<RefinementLevel> levels;
  bool calibrated = false;
  double eps = 1e-5;
};

inline constexpr double kCalibrationVarFloor = 1e-8;

/// ReLU(BN_eval(scale * M + bias)) for level `level`. Throws before calibration.
template <class S>
Tensor<S> refine_map(const Tensor<S>& map, const RefinementParams& params, std::size_t level);

/// Sum of bilinear upsamplings of [b,1,h_n,w_n] maps to [b,1,out_h,out_w].
template <class S>
Tensor<S> fuse_maps(std::span<const Tensor<S>> maps, Index out_h, Index out_w);

/// Normalized Gaussian taps for offsets 0..radius, radius = ceil(4 sigma).
std::vector<double> gaussian_kernel(double sigma);

/// Separable Gaussian filter with half-sample-symmetric (reflect) borders.
template <class S>
Map2<S> gaussian_smooth(const Map2<S>& map, double sigma);

/// max(G_sigma(map)).
template <class S>
double score_image(const Map2<S>& map, double sigma);

/// Mann-Whitney AUROC with midrank tie handling, O(n log n).
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// AUROC over the concatenation of all pixels of all maps (dataset order,
/// row-major pixels). Masks are binary.
template <class S>
double pixel_auroc(std::span<const Map2<S>> maps, std::span<const Map2<std::uint8_t>> masks);

/// Per-level mean/variance over every pixel of every calibration map.
/// `maps[i][n]` is the raw level-n map of image i, shape [1,1,h,w].
template <class S>
RefinementParams calibrate_refinement(std::span<const std::vector<Tensor<S>>> maps);

struct AnomalyResult {
  std::vector<Map2<float>> layer_maps;
  Map2<float> fused;
  double score = 0.0;
};

struct InferenceOptions {
  bool mff_enabled = true;
  double smoothing_sigma = 4.0;
};

/// Full localization path for a batch: per-level maps from normalized
/// teacher/student features, optional refinement, fusion to the input
/// extent, smoothing and max scoring. Level tensors are [b,c,h,w].
std::vector<AnomalyResult> compute_anomaly(std::span<const Tensor<float>> teacher_levels,
                                           std::span<const Tensor<float>> student_levels,
                                           const RefinementParams& refinement, const InferenceOptions& options,
                                           Index out_h, Index out_w);

}  // namespace multiad
