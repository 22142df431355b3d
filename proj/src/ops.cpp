#include "multiad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace multiad {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index conv_output_extent(Index in, Index kernel, Index stride, Index padding, Index dilation) {
  const Index effective = (kernel - 1) * dilation + 1;
  const Index padded = in + 2 * padding;
  if (effective > padded) {
    throw ShapeError("effective kernel extent " + std::to_string(effective) + " exceeds padded input extent " +
                     std::to_string(padded));
  }
  return (padded - effective) / stride + 1;
}

namespace {

template <class S>
using RowMatrixMap = Eigen::Map<MatrixX<S>>;
template <class S>
using ConstRowMatrixMap = Eigen::Map<const MatrixX<S>>;

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
  }
}

struct ConvGeometry {
  Index cin, h, w, kh, kw, ho, wo;
  Conv2dOptions opts;
};

// cols[(c*kh + m)*kw + n, oh*wo + ow] = x[c, oh*s - p + r*m, ow*s - p + r*n]
template <class S>
void im2col(const S* x, const ConvGeometry& g, S* cols) {
  const Index plane = g.ho * g.wo;
  for (Index c = 0; c < g.cin; ++c) {
    const S* xc = x + c * g.h * g.w;
    for (Index m = 0; m < g.kh; ++m) {
      for (Index n = 0; n < g.kw; ++n) {
        S* row = cols + ((c * g.kh + m) * g.kw + n) * plane;
        for (Index oh = 0; oh < g.ho; ++oh) {
          const Index ih = oh * g.opts.stride - g.opts.padding + m * g.opts.dilation;
          S* out = row + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(out, out + g.wo, S(0));
            continue;
          }
          const S* xr = xc + ih * g.w;
          for (Index ow = 0; ow < g.wo; ++ow) {
            const Index iw = ow * g.opts.stride - g.opts.padding + n * g.opts.dilation;
            out[ow] = (iw >= 0 && iw < g.w) ? xr[iw] : S(0);
          }
        }
      }
    }
  }
}

template <class S>
void col2im(const S* cols, const ConvGeometry& g, S* dx) {
  const Index plane = g.ho * g.wo;
  for (Index c = 0; c < g.cin; ++c) {
    S* xc = dx + c * g.h * g.w;
    for (Index m = 0; m < g.kh; ++m) {
      for (Index n = 0; n < g.kw; ++n) {
        const S* row = cols + ((c * g.kh + m) * g.kw + n) * plane;
        for (Index oh = 0; oh < g.ho; ++oh) {
          const Index ih = oh * g.opts.stride - g.opts.padding + m * g.opts.dilation;
          if (ih < 0 || ih >= g.h) continue;
          const S* in = row + oh * g.wo;
          S* xr = xc + ih * g.w;
          for (Index ow = 0; ow < g.wo; ++ow) {
            const Index iw = ow * g.opts.stride - g.opts.padding + n * g.opts.dilation;
            if (iw >= 0 && iw < g.w) xr[iw] += in[ow];
          }
        }
      }
    }
  }
}

template <class S>
Tensor<S> unary_map(const Tensor<S>& x, auto fn) {
  Tensor<S> y(x.shape());
  for (Index i = 0; i < x.size(); ++i) y[i] = fn(x[i]);
  return y;
}

// Spatial plane size for rank-2 ([b,c]) or rank-4 ([b,c,h,w]) inputs.
Index plane_of(const Shape& s, const char* op) {
  if (s.size() == 2) return 1;
  if (s.size() == 4) return s[2] * s[3];
  throw ShapeError(std::string(op) + ": expected rank 2 or 4, got " + shape_string(s));
}

}  // namespace

template <class S>
Var<S> conv2d(Var<S> x, Var<S> kernel, const Conv2dOptions& opts) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  require_rank(xs, 4, "conv2d input");
  require_rank(ks, 4, "conv2d kernel");
  if (opts.dilation < 1) throw ValueError("conv2d: dilation must be >= 1");
  if (opts.stride < 1) throw ValueError("conv2d: stride must be >= 1");
  if (opts.padding < 0) throw ValueError("conv2d: padding must be >= 0");
  if (ks[1] != xs[1]) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(ks[1]) + " input channels, input has " +
                     std::to_string(xs[1]));
  }
  ConvGeometry g{xs[1], xs[2], xs[3], ks[2], ks[3], 0, 0, opts};
  g.ho = conv_output_extent(g.h, g.kh, opts.stride, opts.padding, opts.dilation);
  g.wo = conv_output_extent(g.w, g.kw, opts.stride, opts.padding, opts.dilation);
  const Index batch = xs[0];
  const Index cout = ks[0];
  const Index depth = g.cin * g.kh * g.kw;
  const Index plane = g.ho * g.wo;

  Tensor<S> y({batch, cout, g.ho, g.wo});
  MatrixX<S> cols(depth, plane);
  ConstRowMatrixMap<S> wm(kernel.value().data().data(), cout, depth);
  for (Index b = 0; b < batch; ++b) {
    im2col(x.value().data().data() + b * g.cin * g.h * g.w, g, cols.data());
    RowMatrixMap<S> yb(y.data().data() + b * cout * plane, cout, plane);
    yb.noalias() = wm * cols;
  }

  return x.tape->record(std::move(y), {x, kernel}, [x, kernel, g, batch, cout, depth, plane](Tape<S>& t, const VectorX<S>& gy) {
    const bool need_x = t.requires_grad(x);
    const bool need_w = t.requires_grad(kernel);
    MatrixX<S> cols(depth, plane);
    MatrixX<S> dw = MatrixX<S>::Zero(cout, depth);
    ConstRowMatrixMap<S> wm(kernel.value().data().data(), cout, depth);
    VectorX<S>* dx = need_x ? &t.grad_buffer(x) : nullptr;
    for (Index b = 0; b < batch; ++b) {
      ConstRowMatrixMap<S> gyb(gy.data() + b * cout * plane, cout, plane);
      if (need_w) {
        im2col(x.value().data().data() + b * g.cin * g.h * g.w, g, cols.data());
        dw.noalias() += gyb * cols.transpose();
      }
      if (need_x) {
        cols.noalias() = wm.transpose() * gyb;
        col2im(cols.data(), g, dx->data() + b * g.cin * g.h * g.w);
      }
    }
    if (need_w) t.accumulate(kernel, Eigen::Map<const VectorX<S>>(dw.data(), dw.size()));
  });
}

template <class S>
Var<S> batch_norm(Var<S> x, Var<S> gamma, Var<S> beta, Tensor<S>& running_mean, Tensor<S>& running_var,
                  const BatchNormOptions& opts) {
  const Shape& xs = x.shape();
  const Index plane = plane_of(xs, "batch_norm");
  const Index batch = xs[0];
  const Index channels = xs[1];
  if (gamma.value().size() != channels || beta.value().size() != channels ||
      running_mean.size() != channels || running_var.size() != channels) {
    throw ShapeError("batch_norm: parameter length does not match " + std::to_string(channels) + " channels");
  }
  const Index count = batch * plane;
  const bool train = opts.mode == NormMode::kTrain;
  if (train && count < 2) {
    throw ValueError("batch_norm: train mode needs at least 2 values per channel, got " + std::to_string(count));
  }
  const auto& xv = x.value().data();
  const auto& gv = gamma.value().data();
  const auto& bv = beta.value().data();

  VectorX<S> mean_c(channels), invstd(channels);
  for (Index c = 0; c < channels; ++c) {
    if (train) {
      S sum = 0;
      for (Index b = 0; b < batch; ++b) {
        const S* p = xv.data() + (b * channels + c) * plane;
        for (Index i = 0; i < plane; ++i) sum += p[i];
      }
      const S mu = sum / S(count);
      S sq = 0;
      for (Index b = 0; b < batch; ++b) {
        const S* p = xv.data() + (b * channels + c) * plane;
        for (Index i = 0; i < plane; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const S var = sq / S(count);
      mean_c[c] = mu;
      invstd[c] = S(1) / std::sqrt(var + S(opts.eps));
      if (opts.update_running_stats) {
        const S m = S(opts.momentum);
        running_mean[c] = (S(1) - m) * running_mean[c] + m * mu;
        running_var[c] = (S(1) - m) * running_var[c] + m * (sq / S(count - 1));
      }
    } else {
      mean_c[c] = running_mean[c];
      invstd[c] = S(1) / std::sqrt(running_var[c] + S(opts.eps));
    }
  }

  Tensor<S> xhat(xs);
  Tensor<S> y(xs);
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < channels; ++c) {
      const Index off = (b * channels + c) * plane;
      for (Index i = 0; i < plane; ++i) {
        const S h = (xv[off + i] - mean_c[c]) * invstd[c];
        xhat[off + i] = h;
        y[off + i] = gv[c] * h + bv[c];
      }
    }
  }

  return x.tape->record(std::move(y), {x, gamma, beta},
                        [x, gamma, beta, xhat = std::move(xhat), invstd, train, batch, channels, plane,
                         count](Tape<S>& t, const VectorX<S>& gy) {
    VectorX<S> sum_dy = VectorX<S>::Zero(channels);
    VectorX<S> sum_dy_xhat = VectorX<S>::Zero(channels);
    for (Index b = 0; b < batch; ++b) {
      for (Index c = 0; c < channels; ++c) {
        const Index off = (b * channels + c) * plane;
        for (Index i = 0; i < plane; ++i) {
          sum_dy[c] += gy[off + i];
          sum_dy_xhat[c] += gy[off + i] * xhat[off + i];
        }
      }
    }
    t.accumulate(gamma, sum_dy_xhat);
    t.accumulate(beta, sum_dy);
    if (!t.requires_grad(x)) return;
    const auto& gv = gamma.value().data();
    VectorX<S>& dx = t.grad_buffer(x);
    for (Index b = 0; b < batch; ++b) {
      for (Index c = 0; c < channels; ++c) {
        const Index off = (b * channels + c) * plane;
        const S k = gv[c] * invstd[c];
        if (train) {
          const S n = S(count);
          for (Index i = 0; i < plane; ++i) {
            dx[off + i] += k / n * (n * gy[off + i] - sum_dy[c] - xhat[off + i] * sum_dy_xhat[c]);
          }
        } else {
          for (Index i = 0; i < plane; ++i) dx[off + i] += k * gy[off + i];
        }
      }
    }
  });
}

template <class S>
Var<S> relu(Var<S> x) {
  Tensor<S> y = unary_map(x.value(), [](S v) { return v > S(0) ? v : S(0); });
  return x.tape->record(std::move(y), {x}, [x](Tape<S>& t, const VectorX<S>& gy) {
    const auto& xv = x.value().data();
    t.accumulate(x, (xv.array() > S(0)).select(gy, VectorX<S>::Zero(gy.size())));
  });
}

template <class S>
Var<S> leaky_relu(Var<S> x, double slope) {
  if (!(slope > 0.0 && slope < 1.0)) throw ValueError("leaky_relu: slope must lie in (0,1)");
  const S k = S(slope);
  Tensor<S> y = unary_map(x.value(), [k](S v) { return v > S(0) ? v : k * v; });
  return x.tape->record(std::move(y), {x}, [x, k](Tape<S>& t, const VectorX<S>& gy) {
    const auto& xv = x.value().data();
    t.accumulate(x, (xv.array() > S(0)).select(gy, k * gy));
  });
}

template <class S>
Var<S> sigmoid(Var<S> x) {
  // Clamped away from {0,1} so outputs stay strictly inside the open interval.
  const S lo = std::numeric_limits<S>::epsilon();
  Tensor<S> y = unary_map(x.value(), [lo](S v) {
    const S s = v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
    return std::clamp(s, lo, S(1) - lo);
  });
  VectorX<S> yv = y.data();
  return x.tape->record(std::move(y), {x}, [x, yv = std::move(yv)](Tape<S>& t, const VectorX<S>& gy) {
    t.accumulate(x, (gy.array() * yv.array() * (S(1) - yv.array())).matrix());
  });
}

template <class S>
Var<S> max_pool2d(Var<S> x, Index window, Index stride, Index padding) {
  const Shape& xs = x.shape();
  require_rank(xs, 4, "max_pool2d");
  if (window < 1 || stride < 1 || padding < 0) throw ValueError("max_pool2d: invalid window/stride/padding");
  if (window > xs[2] + 2 * padding || window > xs[3] + 2 * padding) {
    throw ShapeError("max_pool2d: window " + std::to_string(window) + " exceeds input " + shape_string(xs));
  }
  if (2 * padding > window) throw ValueError("max_pool2d: padding must be at most half the window");
  const Index ho = conv_output_extent(xs[2], window, stride, padding, 1);
  const Index wo = conv_output_extent(xs[3], window, stride, padding, 1);
  const Index planes = xs[0] * xs[1];
  const Index h = xs[2], w = xs[3];
  Tensor<S> y({xs[0], xs[1], ho, wo});
  std::vector<Index> argmax(static_cast<std::size_t>(y.size()));
  const auto& xv = x.value().data();
  for (Index p = 0; p < planes; ++p) {
    for (Index oh = 0; oh < ho; ++oh) {
      for (Index ow = 0; ow < wo; ++ow) {
        S best = -std::numeric_limits<S>::infinity();
        Index best_idx = -1;
        for (Index m = 0; m < window; ++m) {
          const Index ih = oh * stride - padding + m;
          if (ih < 0 || ih >= h) continue;
          for (Index n = 0; n < window; ++n) {
            const Index iw = ow * stride - padding + n;
            if (iw < 0 || iw >= w) continue;
            const Index idx = p * h * w + ih * w + iw;
            if (best_idx < 0 || xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
            }
          }
        }
        const Index o = (p * ho + oh) * wo + ow;
        y[o] = best;
        argmax[static_cast<std::size_t>(o)] = best_idx;
      }
    }
  }
  return x.tape->record(std::move(y), {x}, [x, argmax = std::move(argmax)](Tape<S>& t, const VectorX<S>& gy) {
    VectorX<S>& dx = t.grad_buffer(x);
    for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += gy[static_cast<Index>(o)];
  });
}

template <class S>
Var<S> global_avg_pool(Var<S> x) {
  const Shape& xs = x.shape();
  require_rank(xs, 4, "global_avg_pool");
  const Index planes = xs[0] * xs[1];
  const Index area = xs[2] * xs[3];
  ConstRowMatrixMap<S> xm(x.value().data().data(), planes, area);
  Tensor<S> y({xs[0], xs[1]}, xm.rowwise().mean());
  return x.tape->record(std::move(y), {x}, [x, planes, area](Tape<S>& t, const VectorX<S>& gy) {
    VectorX<S>& dx = t.grad_buffer(x);
    RowMatrixMap<S> dm(dx.data(), planes, area);
    dm.colwise() += gy / S(area);
  });
}

template <class S>
Var<S> linear(Var<S> x, Var<S> weight, std::optional<Var<S>> bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  require_rank(xs, 2, "linear input");
  require_rank(ws, 2, "linear weight");
  if (xs[1] != ws[1]) {
    throw ShapeError("linear: input width " + std::to_string(xs[1]) + " does not match weight " + shape_string(ws));
  }
  if (bias && bias->value().size() != ws[0]) throw ShapeError("linear: bias length mismatch");
  const Index b = xs[0], n = xs[1], m = ws[0];
  ConstRowMatrixMap<S> xm(x.value().data().data(), b, n);
  ConstRowMatrixMap<S> wm(weight.value().data().data(), m, n);
  Tensor<S> y({b, m});
  RowMatrixMap<S> ym(y.data().data(), b, m);
  ym.noalias() = xm * wm.transpose();
  if (bias) ym.rowwise() += bias->value().data().transpose();

  auto backward = [x, weight, bias, b, n, m](Tape<S>& t, const VectorX<S>& gy) {
    ConstRowMatrixMap<S> gm(gy.data(), b, m);
    if (t.requires_grad(x)) {
      ConstRowMatrixMap<S> wm(weight.value().data().data(), m, n);
      MatrixX<S> dx = gm * wm;
      t.accumulate(x, Eigen::Map<const VectorX<S>>(dx.data(), dx.size()));
    }
    if (t.requires_grad(weight)) {
      ConstRowMatrixMap<S> xm(x.value().data().data(), b, n);
      MatrixX<S> dw = gm.transpose() * xm;
      t.accumulate(weight, Eigen::Map<const VectorX<S>>(dw.data(), dw.size()));
    }
    if (bias) t.accumulate(*bias, gm.colwise().sum().transpose());
  };
  if (bias) return x.tape->record(std::move(y), {x, weight, *bias}, std::move(backward));
  return x.tape->record(std::move(y), {x, weight}, std::move(backward));
}

template <class S>
Var<S> l2_normalize(Var<S> x, double eps) {
  const Shape& xs = x.shape();
  const Index plane = plane_of(xs, "l2_normalize");
  const Index batch = xs[0], channels = xs[1];
  const auto& xv = x.value().data();
  Tensor<S> y(xs);
  VectorX<S> norms(batch * plane);
  for (Index b = 0; b < batch; ++b) {
    for (Index i = 0; i < plane; ++i) {
      S sq = 0;
      for (Index c = 0; c < channels; ++c) {
        const S v = xv[(b * channels + c) * plane + i];
        sq += v * v;
      }
      const S norm = std::max(std::sqrt(sq), S(eps));
      norms[b * plane + i] = norm;
      for (Index c = 0; c < channels; ++c) {
        const Index idx = (b * channels + c) * plane + i;
        y[idx] = xv[idx] / norm;
      }
    }
  }
  VectorX<S> yv = y.data();
  return x.tape->record(std::move(y), {x}, [x, yv = std::move(yv), norms, eps, batch, channels, plane](
                                               Tape<S>& t, const VectorX<S>& gy) {
    VectorX<S>& dx = t.grad_buffer(x);
    for (Index b = 0; b < batch; ++b) {
      for (Index i = 0; i < plane; ++i) {
        const S norm = norms[b * plane + i];
        // Inside the eps floor the map is linear: y = x / eps.
        const bool floored = norm <= S(eps);
        S dot = 0;
        if (!floored) {
          for (Index c = 0; c < channels; ++c) {
            const Index idx = (b * channels + c) * plane + i;
            dot += yv[idx] * gy[idx];
          }
        }
        for (Index c = 0; c < channels; ++c) {
          const Index idx = (b * channels + c) * plane + i;
          dx[idx] += (gy[idx] - yv[idx] * dot) / norm;
        }
      }
    }
  });
}

namespace {

struct LinearTap {
  Index i0, i1;
  double frac;
};

std::vector<LinearTap> bilinear_taps(Index in, Index out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Index d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    Index i0 = static_cast<Index>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const Index i1 = std::min(i0 + 1, in - 1);
    double frac = src - static_cast<double>(i0);
    if (i1 == i0) frac = 0.0;
    taps[static_cast<std::size_t>(d)] = {i0, i1, frac};
  }
  return taps;
}

template <class S>
void resize_planes(const S* x, Index planes, Index h, Index w, Index oh, Index ow, S* y) {
  const auto th = bilinear_taps(h, oh);
  const auto tw = bilinear_taps(w, ow);
  for (Index p = 0; p < planes; ++p) {
    const S* xp = x + p * h * w;
    S* yp = y + p * oh * ow;
    for (Index i = 0; i < oh; ++i) {
      const auto& a = th[static_cast<std::size_t>(i)];
      const S fy = S(a.frac);
      for (Index j = 0; j < ow; ++j) {
        const auto& b = tw[static_cast<std::size_t>(j)];
        const S fx = S(b.frac);
        const S top = xp[a.i0 * w + b.i0] * (S(1) - fx) + xp[a.i0 * w + b.i1] * fx;
        const S bot = xp[a.i1 * w + b.i0] * (S(1) - fx) + xp[a.i1 * w + b.i1] * fx;
        yp[i * ow + j] = top * (S(1) - fy) + bot * fy;
      }
    }
  }
}

}  // namespace

template <class S>
Tensor<S> resize_bilinear(const Tensor<S>& x, Index out_h, Index out_w) {
  require_rank(x.shape(), 4, "resize_bilinear");
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: zero-size output");
  const Shape& xs = x.shape();
  Tensor<S> y({xs[0], xs[1], out_h, out_w});
  resize_planes(x.data().data(), xs[0] * xs[1], xs[2], xs[3], out_h, out_w, y.data().data());
  return y;
}

template <class S>
Var<S> bilinear_upsample(Var<S> x, Index out_h, Index out_w) {
  const Shape& xs = x.shape();
  require_rank(xs, 4, "bilinear_upsample");
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_upsample: zero-size output");
  if (out_h < xs[2] || out_w < xs[3]) {
    throw ShapeError("bilinear_upsample: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " smaller than input " + shape_string(xs));
  }
  Tensor<S> y = resize_bilinear(x.value(), out_h, out_w);
  const Index planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  return x.tape->record(std::move(y), {x}, [x, planes, h, w, out_h, out_w](Tape<S>& t, const VectorX<S>& gy) {
    const auto th = bilinear_taps(h, out_h);
    const auto tw = bilinear_taps(w, out_w);
    VectorX<S>& dx = t.grad_buffer(x);
    for (Index p = 0; p < planes; ++p) {
      S* dp = dx.data() + p * h * w;
      const S* gp = gy.data() + p * out_h * out_w;
      for (Index i = 0; i < out_h; ++i) {
        const auto& a = th[static_cast<std::size_t>(i)];
        const S fy = S(a.frac);
        for (Index j = 0; j < out_w; ++j) {
          const auto& b = tw[static_cast<std::size_t>(j)];
          const S fx = S(b.frac);
          const S g = gp[i * out_w + j];
          dp[a.i0 * w + b.i0] += g * (S(1) - fy) * (S(1) - fx);
          dp[a.i0 * w + b.i1] += g * (S(1) - fy) * fx;
          dp[a.i1 * w + b.i0] += g * fy * (S(1) - fx);
          dp[a.i1 * w + b.i1] += g * fy * fx;
        }
      }
    }
  });
}

template <class S>
Var<S> dropout(Var<S> x, double p, Rng& rng, bool train) {
  if (!(p >= 0.0 && p < 1.0)) throw ValueError("dropout: p must lie in [0,1)");
  if (!train || p == 0.0) {
    Tensor<S> y = x.value();
    return x.tape->record(std::move(y), {x}, [x](Tape<S>& t, const VectorX<S>& gy) { t.accumulate(x, gy); });
  }
  const S keep_scale = S(1.0 / (1.0 - p));
  VectorX<S> mask(x.value().size());
  for (Index i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < p ? S(0) : keep_scale;
  Tensor<S> y(x.shape(), (x.value().data().array() * mask.array()).matrix());
  return x.tape->record(std::move(y), {x}, [x, mask = std::move(mask)](Tape<S>& t, const VectorX<S>& gy) {
    t.accumulate(x, (gy.array() * mask.array()).matrix());
  });
}

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor<S> y(a.shape(), a.value().data() + b.value().data());
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape<S>& t, const VectorX<S>& gy) {
    t.accumulate(a, gy);
    t.accumulate(b, gy);
  });
}

template <class S>
Var<S> affine(Var<S> x, double a, double b) {
  const S sa = S(a), sb = S(b);
  Tensor<S> y(x.shape(), (x.value().data().array() * sa + sb).matrix());
  return x.tape->record(std::move(y), {x}, [x, sa](Tape<S>& t, const VectorX<S>& gy) { t.accumulate(x, gy * sa); });
}

template <class S>
Var<S> scale_channels(Var<S> x, Var<S> s) {
  const Shape& xs = x.shape();
  require_rank(xs, 4, "scale_channels input");
  if (s.shape() != Shape{xs[0], xs[1]}) {
    throw ShapeError("scale_channels: scale " + shape_string(s.shape()) + " does not match " + shape_string(xs));
  }
  const Index planes = xs[0] * xs[1], area = xs[2] * xs[3];
  Tensor<S> y(xs);
  RowMatrixMap<S>(y.data().data(), planes, area) =
      ConstRowMatrixMap<S>(x.value().data().data(), planes, area).array().colwise() * s.value().data().array();
  return x.tape->record(std::move(y), {x, s}, [x, s, planes, area](Tape<S>& t, const VectorX<S>& gy) {
    ConstRowMatrixMap<S> gm(gy.data(), planes, area);
    if (t.requires_grad(x)) {
      VectorX<S>& dx = t.grad_buffer(x);
      RowMatrixMap<S>(dx.data(), planes, area).array() += gm.array().colwise() * s.value().data().array();
    }
    if (t.requires_grad(s)) {
      ConstRowMatrixMap<S> xm(x.value().data().data(), planes, area);
      t.accumulate(s, (gm.array() * xm.array()).rowwise().sum().matrix());
    }
  });
}

namespace {

// Generic concatenation along axis 0 or 1 of equal-rank tensors.
template <class S>
Var<S> concat_axis(std::span<const Var<S>> parts, std::size_t axis, const char* op) {
  if (parts.empty()) throw ValueError(std::string(op) + ": nothing to concatenate");
  const Shape& first = parts[0].shape();
  Shape out = first;
  out[axis] = 0;
  for (const Var<S>& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError(std::string(op) + ": rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        throw ShapeError(std::string(op) + ": extent mismatch " + shape_string(s) + " vs " + shape_string(first));
      }
    }
    out[axis] += s[axis];
  }
  // outer = product of dims before axis; inner = product from axis on for each part.
  Index outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  auto inner_of = [&](const Shape& s) {
    Index n = 1;
    for (std::size_t d = axis; d < s.size(); ++d) n *= s[d];
    return n;
  };
  const Index out_inner = inner_of(out);
  Tensor<S> y(out);
  Index offset = 0;
  for (const Var<S>& p : parts) {
    const Index in_inner = inner_of(p.shape());
    const auto& v = p.value().data();
    for (Index o = 0; o < outer; ++o) {
      std::copy_n(v.data() + o * in_inner, in_inner, y.data().data() + o * out_inner + offset);
    }
    offset += in_inner;
  }
  std::vector<Var<S>> inputs(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(y), parts, [inputs, outer, out_inner, inner_of](Tape<S>& t,
                                                                                        const VectorX<S>& gy) {
    Index offset = 0;
    for (const Var<S>& p : inputs) {
      const Index in_inner = inner_of(p.shape());
      if (t.requires_grad(p)) {
        VectorX<S>& dp = t.grad_buffer(p);
        for (Index o = 0; o < outer; ++o) {
          dp.segment(o * in_inner, in_inner) += gy.segment(o * out_inner + offset, in_inner);
        }
      }
      offset += in_inner;
    }
  });
}

}  // namespace

template <class S>
Var<S> concat_channels(std::span<const Var<S>> parts) {
  return concat_axis(parts, 1, "concat_channels");
}

template <class S>
Var<S> concat_batch(std::span<const Var<S>> parts) {
  return concat_axis(parts, 0, "concat_batch");
}

template <class S>
Var<S> slice_batch(Var<S> x, Index begin, Index count) {
  const Shape& xs = x.shape();
  if (begin < 0 || count < 1 || begin + count > xs[0]) throw ShapeError("slice_batch: range out of bounds");
  const Index inner = x.value().size() / xs[0];
  Shape out = xs;
  out[0] = count;
  Tensor<S> y(out, x.value().data().segment(begin * inner, count * inner));
  return x.tape->record(std::move(y), {x}, [x, begin, count, inner](Tape<S>& t, const VectorX<S>& gy) {
    t.grad_buffer(x).segment(begin * inner, count * inner) += gy;
  });
}

template <class S>
Var<S> reshape(Var<S> x, Shape shape) {
  Tensor<S> y = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(y), {x}, [x](Tape<S>& t, const VectorX<S>& gy) { t.accumulate(x, gy); });
}

template <class S>
Var<S> mean(Var<S> x) {
  const Index n = x.value().size();
  Tensor<S> y({1}, {x.value().data().sum() / S(n)});
  return x.tape->record(std::move(y), {x}, [x, n](Tape<S>& t, const VectorX<S>& gy) {
    t.accumulate(x, VectorX<S>::Constant(n, gy[0] / S(n)));
  });
}

template <class S>
Var<S> log_clamped(Var<S> x, double eps) {
  const S lo = S(eps), hi = S(1.0 - eps);
  Tensor<S> y = unary_map(x.value(), [lo, hi](S v) { return std::log(std::clamp(v, lo, hi)); });
  return x.tape->record(std::move(y), {x}, [x, lo, hi](Tape<S>& t, const VectorX<S>& gy) {
    const auto& xv = x.value().data();
    VectorX<S> g(gy.size());
    for (Index i = 0; i < g.size(); ++i) g[i] = (xv[i] > lo && xv[i] < hi) ? gy[i] / xv[i] : S(0);
    t.accumulate(x, g);
  });
}

template <class S>
Var<S> cosine_dissimilarity(Var<S> a, Var<S> b, double eps) {
  const Shape& as = a.shape();
  if (as != b.shape()) {
    throw ShapeError("cosine_dissimilarity: shape mismatch " + shape_string(as) + " vs " + shape_string(b.shape()));
  }
  require_rank(as, 4, "cosine_dissimilarity");
  const Index batch = as[0], channels = as[1], plane = as[2] * as[3];
  const auto& av = a.value().data();
  const auto& bv = b.value().data();
  Tensor<S> y({batch, 1, as[2], as[3]});
  // Per site: dot, |a|, |b| (unfloored), and whether the site is degenerate.
  VectorX<S> dots(batch * plane), na(batch * plane), nb(batch * plane);
  for (Index n = 0; n < batch; ++n) {
    for (Index i = 0; i < plane; ++i) {
      S dot = 0, sa = 0, sb = 0;
      for (Index c = 0; c < channels; ++c) {
        const Index idx = (n * channels + c) * plane + i;
        dot += av[idx] * bv[idx];
        sa += av[idx] * av[idx];
        sb += bv[idx] * bv[idx];
      }
      const Index s = n * plane + i;
      dots[s] = dot;
      na[s] = std::sqrt(sa);
      nb[s] = std::sqrt(sb);
      if (na[s] < S(eps) && nb[s] < S(eps)) {
        y[s] = S(0);
      } else {
        // sqrt(|a|^2 |b|^2) makes identical or positively scaled vectors
        // give exactly 0; the floored product covers tiny norms.
        const S prod = sa * sb;
        const bool exact = na[s] >= S(eps) && nb[s] >= S(eps) && prod >= std::numeric_limits<S>::min();
        const S denom = exact ? std::sqrt(prod) : std::max(na[s], S(eps)) * std::max(nb[s], S(eps));
        y[s] = S(1) - dot / denom;
      }
    }
  }
  return a.tape->record(std::move(y), {a, b}, [a, b, dots, na, nb, eps, batch, channels, plane](
                                                  Tape<S>& t, const VectorX<S>& gy) {
    const auto& av = a.value().data();
    const auto& bv = b.value().data();
    const bool need_a = t.requires_grad(a), need_b = t.requires_grad(b);
    VectorX<S>* da = need_a ? &t.grad_buffer(a) : nullptr;
    VectorX<S>* db = need_b ? &t.grad_buffer(b) : nullptr;
    for (Index n = 0; n < batch; ++n) {
      for (Index i = 0; i < plane; ++i) {
        const Index s = n * plane + i;
        if (na[s] < S(eps) && nb[s] < S(eps)) continue;
        const S fa = std::max(na[s], S(eps)), fb = std::max(nb[s], S(eps));
        const S inv = S(1) / (fa * fb);
        const S cosv = dots[s] * inv;
        const S g = -gy[s];
        // d(dot/(fa*fb))/da = b/(fa*fb) - dot/(fa*fb) * a/|a|^2 when |a| > eps.
        const bool a_free = na[s] >= S(eps), b_free = nb[s] >= S(eps);
        for (Index c = 0; c < channels; ++c) {
          const Index idx = (n * channels + c) * plane + i;
          if (da) (*da)[idx] += g * (bv[idx] * inv - (a_free ? cosv * av[idx] / (fa * fa) : S(0)));
          if (db) (*db)[idx] += g * (av[idx] * inv - (b_free ? cosv * bv[idx] / (fb * fb) : S(0)));
        }
      }
    }
  });
}

template <class S>
Var<S> softmax_cross_entropy(Var<S> logits, std::span<const int> labels) {
  const Shape& ls = logits.shape();
  require_rank(ls, 2, "softmax_cross_entropy");
  const Index b = ls[0], k = ls[1];
  if (static_cast<Index>(labels.size()) != b) throw ShapeError("softmax_cross_entropy: label count mismatch");
  ConstRowMatrixMap<S> lm(logits.value().data().data(), b, k);
  MatrixX<S> probs(b, k);
  S loss = 0;
  for (Index r = 0; r < b; ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= k) throw ValueError("softmax_cross_entropy: label out of range");
    const S mx = lm.row(r).maxCoeff();
    const auto e = (lm.row(r).array() - mx).exp();
    const S z = e.sum();
    probs.row(r) = e / z;
    loss -= (lm(r, label) - mx) - std::log(z);
  }
  loss /= S(b);
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape->record(Tensor<S>({1}, {loss}), {logits}, [logits, probs, lab, b, k](Tape<S>& t,
                                                                                          const VectorX<S>& gy) {
    MatrixX<S> d = probs;
    for (Index r = 0; r < b; ++r) d(r, lab[static_cast<std::size_t>(r)]) -= S(1);
    d *= gy[0] / S(b);
    t.accumulate(logits, Eigen::Map<const VectorX<S>>(d.data(), d.size()));
  });
}

#define MULTIAD_INSTANTIATE_OPS(S)                                                                          \
  template Var<S> conv2d(Var<S>, Var<S>, const Conv2dOptions&);                                            \
  template Var<S> batch_norm(Var<S>, Var<S>, Var<S>, Tensor<S>&, Tensor<S>&, const BatchNormOptions&);     \
  template Var<S> relu(Var<S>);                                                                             \
  template Var<S> leaky_relu(Var<S>, double);                                                               \
  template Var<S> sigmoid(Var<S>);                                                                          \
  template Var<S> max_pool2d(Var<S>, Index, Index, Index);                                                  \
  template Var<S> global_avg_pool(Var<S>);                                                                  \
  template Var<S> linear(Var<S>, Var<S>, std::optional<Var<S>>);                                            \
  template Var<S> l2_normalize(Var<S>, double);                                                             \
  template Var<S> bilinear_upsample(Var<S>, Index, Index);                                                  \
  template Var<S> dropout(Var<S>, double, Rng&, bool);                                                      \
  template Var<S> add(Var<S>, Var<S>);                                                                      \
  template Var<S> affine(Var<S>, double, double);                                                           \
  template Var<S> scale_channels(Var<S>, Var<S>);                                                           \
  template Var<S> concat_channels(std::span<const Var<S>>);                                                 \
  template Var<S> concat_batch(std::span<const Var<S>>);                                                    \
  template Var<S> slice_batch(Var<S>, Index, Index);                                                        \
  template Var<S> reshape(Var<S>, Shape);                                                                   \
  template Var<S> mean(Var<S>);                                                                             \
  template Var<S> log_clamped(Var<S>, double);                                                              \
  template Var<S> cosine_dissimilarity(Var<S>, Var<S>, double);                                             \
  template Var<S> softmax_cross_entropy(Var<S>, std::span<const int>);                                      \
  template Tensor<S> resize_bilinear(const Tensor<S>&, Index, Index);

MULTIAD_INSTANTIATE_OPS(float)
MULTIAD_INSTANTIATE_OPS(double)

}  // namespace multiad
