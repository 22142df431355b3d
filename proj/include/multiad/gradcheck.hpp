#pragma once

#include <functional>
#include <string>
#include <vector>

#include "multiad/distill.hpp"

namespace multiad {

/// A scalar function of some double tensors. `loss` must bind every tensor
/// in `wrt` through `tape.param`, own (capture) whatever they live in, and
/// be deterministic across calls.
struct GradcheckCase {
  std::vector<Tensor<double>*> wrt;
  std::function<Var<double>(Tape<double>&)> loss;
};

struct GradcheckOutcome {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  std::size_t coordinates = 0;
};

/// Central differences with step `h`. When `max_coords_per_tensor` is
/// nonzero, tensors larger than that are probed on a random coordinate
/// subset drawn from `rng`.
GradcheckOutcome check_case(GradcheckCase& c, Rng& rng, std::size_t max_coords_per_tensor = 0, double h = 1e-6);

/// Names accepted by make_gradcheck_case.
const std::vector<std::string>& gradcheck_ops();

/// A random instance of the named operation with small shapes.
GradcheckCase make_gradcheck_case(const std::string& op, Rng& rng);

struct GradcheckSummary {
  std::string op;
  std::size_t instances = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  double seconds = 0.0;
};

inline constexpr double kGradcheckTolerance = 1e-4;

GradcheckSummary run_gradcheck(const std::string& op, std::size_t instances, std::uint64_t seed,
                               double tolerance = kGradcheckTolerance);

}  // namespace multiad
