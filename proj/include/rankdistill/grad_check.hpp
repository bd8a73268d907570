#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rankdistill/tensor.hpp"

namespace rankdistill {

struct GradCheckOptions {
  double step = 1e-5;
  // 0 probes every coordinate; otherwise this many coordinates are drawn
  // uniformly (without replacement) across all inputs.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  bool ok = true;
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
  // Location of the worst coordinate, or of the first non-finite probe.
  std::size_t input_index = 0;
  std::size_t flat_index = 0;
  std::string message;
};

using ScalarFunction = std::function<Tensor()>;

// Compares backward() against central differences
//   |analytic - (f(x+h) - f(x-h)) / 2h| / max(1, |analytic|)
// for leaf tensors `inputs` that `f` reads. Inputs are perturbed in place and
// restored afterwards; their accumulated gradients are reset.
GradCheckResult grad_check(const ScalarFunction& f, std::vector<Tensor> inputs,
                           const GradCheckOptions& options = {});

}  // namespace rankdistill
