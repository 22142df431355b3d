#include "multiad/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace multiad {

template <class S>
Tensor<S> anomaly_map_layer(const Tensor<S>& teacher, const Tensor<S>& student) {
  Tape<S> tape;
  return cosine_dissimilarity(tape.frozen(teacher), tape.frozen(student)).value();
}

template <class S>
Tensor<S> refine_map(const Tensor<S>& map, const RefinementParams& params, std::size_t level) {
  if (!params.calibrated) throw StateError("refine_map: refinement used before calibration");
  if (level >= params.levels.size()) throw ValueError("refine_map: no refinement for level " + std::to_string(level));
  const RefinementLevel& r = params.levels[level];
  const double inv = 1.0 / std::sqrt(r.var + params.eps);
  Tensor<S> out(map.shape());
  for (Index i = 0; i < map.size(); ++i) {
    const double v = ((r.scale * static_cast<double>(map[i]) + r.bias) - r.mean) * inv;
    out[i] = S(v > 0.0 ? v : 0.0);
  }
  return out;
}

template <class S>
Tensor<S> fuse_maps(std::span<const Tensor<S>> maps, Index out_h, Index out_w) {
  if (maps.empty()) throw ValueError("fuse_maps: no maps to fuse");
  const Index batch = maps[0].dim(0);
  Tensor<S> fused({batch, 1, out_h, out_w});
  for (const Tensor<S>& m : maps) {
    if (m.rank() != 4 || m.dim(0) != batch || m.dim(1) != 1) {
      throw ShapeError("fuse_maps: expected [" + std::to_string(batch) + ",1,h,w], got " + shape_string(m.shape()));
    }
    if (m.dim(2) > out_h || m.dim(3) > out_w) throw ShapeError("fuse_maps: map larger than the target extent");
    fused.data() += resize_bilinear(m, out_h, out_w).data();
  }
  return fused;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ValueError("gaussian_kernel: sigma must be positive");
  const auto radius = static_cast<Index>(std::ceil(4.0 * sigma));
  std::vector<double> taps(static_cast<std::size_t>(radius + 1));
  double total = 0.0;
  for (Index k = 0; k <= radius; ++k) {
    taps[static_cast<std::size_t>(k)] = std::exp(-0.5 * static_cast<double>(k * k) / (sigma * sigma));
    total += (k == 0 ? 1.0 : 2.0) * taps[static_cast<std::size_t>(k)];
  }
  for (double& t : taps) t /= total;
  return taps;
}

namespace {

// Half-sample symmetric reflection: (d c b a | a b c d | d c b a).
Index reflect_index(Index i, Index n) {
  const Index period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

template <class S>
Map2<S> filter_rows(const Map2<S>& in, const std::vector<double>& taps) {
  const Index h = in.rows(), w = in.cols();
  const auto radius = static_cast<Index>(taps.size()) - 1;
  Map2<S> out(h, w);
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) {
      double acc = taps[0] * static_cast<double>(in(r, c));
      for (Index k = 1; k <= radius; ++k) {
        acc += taps[static_cast<std::size_t>(k)] *
               (static_cast<double>(in(r, reflect_index(c - k, w))) + static_cast<double>(in(r, reflect_index(c + k, w))));
      }
      out(r, c) = S(acc);
    }
  }
  return out;
}

}  // namespace

template <class S>
Map2<S> gaussian_smooth(const Map2<S>& map, double sigma) {
  const auto taps = gaussian_kernel(sigma);
  Map2<S> rows = filter_rows<S>(map, taps);
  Map2<S> t = rows.transpose();
  Map2<S> cols = filter_rows<S>(t, taps);
  return cols.transpose();
}

template <class S>
double score_image(const Map2<S>& map, double sigma) {
  if (map.size() == 0) throw ShapeError("score_image: empty map");
  return static_cast<double>(gaussian_smooth(map, sigma).maxCoeff());
}

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auroc: scores and labels differ in length");
  std::size_t positives = 0;
  for (std::uint8_t l : labels) {
    if (l > 1) throw ValueError("auroc: labels must be 0 or 1");
    positives += l;
  }
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) throw ValueError("auroc: both classes must be present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum of midranks (1-based) of the positives.
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]]) rank_sum += midrank;
    }
    i = j + 1;
  }
  const double p = static_cast<double>(positives);
  const double n = static_cast<double>(negatives);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

template <class S>
double pixel_auroc(std::span<const Map2<S>> maps, std::span<const Map2<std::uint8_t>> masks) {
  if (maps.size() != masks.size()) throw ShapeError("pixel_auroc: map and mask counts differ");
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].rows() != masks[i].rows() || maps[i].cols() != masks[i].cols()) {
      throw ShapeError("pixel_auroc: extent mismatch at image " + std::to_string(i));
    }
    for (Index k = 0; k < maps[i].size(); ++k) {
      scores.push_back(static_cast<double>(maps[i].data()[k]));
      labels.push_back(masks[i].data()[k] ? 1 : 0);
    }
  }
  return auroc(scores, labels);
}

template <class S>
RefinementParams calibrate_refinement(std::span<const std::vector<Tensor<S>>> maps) {
  if (maps.size() < 2) throw ValueError("calibrate_refinement: at least 2 calibration images are required");
  const std::size_t levels = maps[0].size();
  RefinementParams params;
  params.levels.resize(levels);
  for (std::size_t n = 0; n < levels; ++n) {
    double sum = 0.0;
    double count = 0.0;
    for (const auto& image : maps) {
      if (image.size() != levels) throw ShapeError("calibrate_refinement: inconsistent level count");
      sum += image[n].data().template cast<double>().sum();
      count += static_cast<double>(image[n].size());
    }
    const double mu = sum / count;
    double sq = 0.0;
    for (const auto& image : maps) sq += (image[n].data().template cast<double>().array() - mu).square().sum();
    params.levels[n].mean = mu;
    params.levels[n].var = std::max(sq / count, kCalibrationVarFloor);
  }
  params.calibrated = true;
  return params;
}

std::vector<AnomalyResult> compute_anomaly(std::span<const Tensor<float>> teacher_levels,
                                           std::span<const Tensor<float>> student_levels,
                                           const RefinementParams& refinement, const InferenceOptions& options,
                                           Index out_h, Index out_w) {
  if (teacher_levels.size() != student_levels.size() || teacher_levels.empty()) {
    throw ShapeError("compute_anomaly: teacher and student level counts differ");
  }
  std::vector<Tensor<float>> raw, refined;
  for (std::size_t n = 0; n < teacher_levels.size(); ++n) {
    Tape<float> tape;
    Var<float> t = l2_normalize(tape.frozen(teacher_levels[n]));
    Var<float> s = l2_normalize(tape.frozen(student_levels[n]));
    raw.push_back(cosine_dissimilarity(t, s).value());
    refined.push_back(options.mff_enabled ? refine_map(raw.back(), refinement, n) : raw.back());
  }
  const Tensor<float> fused = fuse_maps<float>(refined, out_h, out_w);
  const Index batch = fused.dim(0);
  std::vector<AnomalyResult> results(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    AnomalyResult& r = results[static_cast<std::size_t>(b)];
    for (const Tensor<float>& m : raw) {
      const Index h = m.dim(2), w = m.dim(3);
      r.layer_maps.push_back(Eigen::Map<const Map2<float>>(m.data().data() + b * h * w, h, w));
    }
    r.fused = Eigen::Map<const Map2<float>>(fused.data().data() + b * out_h * out_w, out_h, out_w);
    r.score = score_image(r.fused, options.smoothing_sigma);
  }
  return results;
}

#define MULTIAD_INSTANTIATE_INFERENCE(S)                                                        \
  template Tensor<S> anomaly_map_layer(const Tensor<S>&, const Tensor<S>&);                     \
  template Tensor<S> refine_map(const Tensor<S>&, const RefinementParams&, std::size_t);        \
  template Tensor<S> fuse_maps(std::span<const Tensor<S>>, Index, Index);                       \
  template Map2<S> gaussian_smooth(const Map2<S>&, double);                                     \
  template double score_image(const Map2<S>&, double);                                          \
  template double pixel_auroc(std::span<const Map2<S>>, std::span<const Map2<std::uint8_t>>);   \
  template RefinementParams calibrate_refinement(std::span<const std::vector<Tensor<S>>>);

MULTIAD_INSTANTIATE_INFERENCE(float)
MULTIAD_INSTANTIATE_INFERENCE(double)

}  // namespace multiad
