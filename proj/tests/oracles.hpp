#pragma once

// Independent reference implementations used as test oracles. They favor
// directness over speed and share no code with the library kernels.

#include <cmath>
#include <cstdint>
#include <vector>

#include "multiad/tensor.hpp"

namespace oracle {

using multiad::Index;
using multiad::Tensor;

// Direct summation of the dilated convolution definition, NCHW / OIHW.
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, Index stride, Index pad, Index dil) {
  const Index b = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index co = w.dim(0), k = w.dim(2);
  const Index oh = (h + 2 * pad - ((k - 1) * dil + 1)) / stride + 1;
  const Index ow = (wd + 2 * pad - ((k - 1) * dil + 1)) / stride + 1;
  Tensor<S> y({b, co, oh, ow});
  for (Index n = 0; n < b; ++n)
    for (Index o = 0; o < co; ++o)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) {
          S acc = 0;
          for (Index c = 0; c < ci; ++c)
            for (Index m = 0; m < k; ++m)
              for (Index q = 0; q < k; ++q) {
                const Index yy = i * stride - pad + dil * m, xx = j * stride - pad + dil * q;
                if (yy < 0 || yy >= h || xx < 0 || xx >= wd) continue;
                acc += x.at(n, c, yy, xx) * w.at(o, c, m, q);
              }
          y.at(n, o, i, j) = acc;
        }
  return y;
}

// Kernel with (r - 1) zeros inserted between taps: size (k - 1) r + 1.
template <class S>
Tensor<S> interleave_kernel(const Tensor<S>& w, Index r) {
  const Index k = w.dim(2), kk = (k - 1) * r + 1;
  Tensor<S> out({w.dim(0), w.dim(1), kk, kk});
  for (Index o = 0; o < w.dim(0); ++o)
    for (Index c = 0; c < w.dim(1); ++c)
      for (Index m = 0; m < k; ++m)
        for (Index q = 0; q < k; ++q) out.at(o, c, m * r, q * r) = w.at(o, c, m, q);
  return out;
}

// P(score_pos > score_neg) + 0.5 P(tie) over all pairs.
inline double pairwise_auroc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

// Explicit 2-D truncated Gaussian, normalized over the full square.
inline std::vector<std::vector<double>> gaussian_2d(double sigma) {
  const auto r = static_cast<Index>(std::ceil(4.0 * sigma));
  std::vector<std::vector<double>> k(2 * r + 1, std::vector<double>(2 * r + 1));
  double total = 0.0;
  for (Index y = -r; y <= r; ++y)
    for (Index x = -r; x <= r; ++x) {
      const double v = std::exp(-static_cast<double>(x * x + y * y) / (2.0 * sigma * sigma));
      k[y + r][x + r] = v;
      total += v;
    }
  for (auto& row : k)
    for (double& v : row) v /= total;
  return k;
}

// Align-corners-false source coordinate with edge clamping, one axis.
inline void bilinear_source(Index dst, Index in, Index out, Index& i0, Index& i1, double& t) {
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
  if (src < 0.0) src = 0.0;
  i0 = static_cast<Index>(std::floor(src));
  if (i0 > in - 1) i0 = in - 1;
  i1 = i0 + 1 < in ? i0 + 1 : in - 1;
  t = src - static_cast<double>(i0);
}

}  // namespace oracle
