#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "multiad/tensor.hpp"

namespace multiad {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class S>
struct AdamState {
  AdamOptions options;
  std::int64_t step = 0;
  std::vector<VectorX<S>> first_moment;
  std::vector<VectorX<S>> second_moment;
};

/// One bias-corrected Adam update over `params`, reading `p->grad()` (a
/// parameter that never received a gradient counts as zero). Moments are
/// created on the first call. Nothing is modified if any gradient is
/// non-finite.
template <class S>
void adam_step(std::span<Tensor<S>* const> params, AdamState<S>& state) {
  if (!(state.options.lr >= 0.0)) throw ValueError("adam: learning rate must be non-negative");
  if (state.first_moment.empty()) {
    for (Tensor<S>* p : params) {
      state.first_moment.push_back(VectorX<S>::Zero(p->size()));
      state.second_moment.push_back(VectorX<S>::Zero(p->size()));
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("adam: parameter count changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i]->size()) throw ShapeError("adam: parameter shape changed");
    if (params[i]->has_grad() && !params[i]->grad().allFinite()) {
      throw NumericError("adam: non-finite gradient in parameter " + std::to_string(i));
    }
  }

  state.step += 1;
  const AdamOptions& o = state.options;
  const double t = static_cast<double>(state.step);
  const S b1 = S(o.beta1), b2 = S(o.beta2);
  const S correction1 = S(1.0 - std::pow(o.beta1, t));
  const S correction2 = S(1.0 - std::pow(o.beta2, t));
  const S lr = S(o.lr), eps = S(o.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<S>& p = *params[i];
    VectorX<S>& m = state.first_moment[i];
    VectorX<S>& v = state.second_moment[i];
    if (p.has_grad()) {
      const VectorX<S>& g = p.grad();
      m = b1 * m + (S(1) - b1) * g;
      v = b2 * v + (S(1) - b2) * g.cwiseAbs2();
    } else {
      m *= b1;
      v *= b2;
    }
    const auto m_hat = m.array() / correction1;
    const auto v_hat = v.array() / correction2;
    p.data().array() -= lr * m_hat / (v_hat.sqrt() + eps);
  }
}

}  // namespace multiad
