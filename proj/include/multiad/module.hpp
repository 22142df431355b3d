#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "multiad/autograd.hpp"
#include "multiad/ops.hpp"

namespace multiad {

/// A named tensor owned by some parameter struct. Buffers (running
/// statistics) are listed with `trainable == false`.
template <class S>
struct NamedTensor {
  std::string name;
  Tensor<S>* tensor;
  bool trainable;
};

template <class S>
using ParamList = std::vector<NamedTensor<S>>;

/// How a network forward treats its parameters and normalization layers.
struct ForwardMode {
  NormMode norm = NormMode::kEval;
  bool update_stats = false;
  // Trainable parameters become tape leaves; otherwise they are read frozen.
  bool track_params = false;
  double bn_momentum = 0.1;
};

inline constexpr ForwardMode kInference{NormMode::kEval, false, false};

template <class S>
Var<S> bind(Tape<S>& tape, Tensor<S>& p, const ForwardMode& mode) {
  return mode.track_params ? tape.param(p) : tape.frozen(p);
}

/// Normal(0, sqrt(2 / fan_in)) initialization.
template <class S>
Tensor<S> he_normal(Shape shape, Index fan_in, Rng& rng) {
  Tensor<S> t(std::move(shape));
  const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (Index i = 0; i < t.size(); ++i) t[i] = S(rng.normal() * sigma);
  return t;
}

template <class S>
struct BatchNormParams {
  Tensor<S> gamma, beta, running_mean, running_var;

  static BatchNormParams make(Index channels) {
    return {Tensor<S>::filled({channels}, S(1)), Tensor<S>({channels}), Tensor<S>({channels}),
            Tensor<S>::filled({channels}, S(1))};
  }

  void collect(const std::string& prefix, ParamList<S>& out) {
    out.push_back({prefix + ".gamma", &gamma, true});
    out.push_back({prefix + ".beta", &beta, true});
    out.push_back({prefix + ".running_mean", &running_mean, false});
    out.push_back({prefix + ".running_var", &running_var, false});
  }

  Var<S> apply(Var<S> x, const ForwardMode& mode, double eps = 1e-5) {
    Tape<S>& tape = *x.tape;
    BatchNormOptions opts{mode.norm, mode.bn_momentum, eps, mode.update_stats};
    return batch_norm(x, bind(tape, gamma, mode), bind(tape, beta, mode), running_mean, running_var, opts);
  }
};

template <class S>
std::vector<Tensor<S>*> trainable_tensors(const ParamList<S>& list) {
  std::vector<Tensor<S>*> out;
  for (const auto& p : list) {
    if (p.trainable) out.push_back(p.tensor);
  }
  return out;
}

template <class S>
void zero_grads(const ParamList<S>& list) {
  for (const auto& p : list) p.tensor->zero_grad();
}

}  // namespace multiad
