#include "rankdistill/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace rankdistill {

GradCheckResult grad_check(const ScalarFunction& f, std::vector<Tensor> inputs,
                           const GradCheckOptions& options) {
  GradCheckResult result;
  if (!(options.step > 0.0)) {
    result.ok = false;
    result.message = "step must be positive";
    return result;
  }

  for (auto& t : inputs) t.zero_grad();
  const Tensor loss = f();
  if (!std::isfinite(loss.item())) {
    result.ok = false;
    result.message = "non-finite loss at the unperturbed point";
    return result;
  }
  loss.backward();

  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) coords.emplace_back(i, j);
  if (options.max_coordinates > 0 && options.max_coordinates < coords.size()) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_coordinates);
    std::sort(coords.begin(), coords.end());
  }

  NoGradGuard no_grad;
  const double h = options.step;
  for (const auto& [i, j] : coords) {
    auto values = inputs[i].mutable_data();
    const double original = values[j];
    values[j] = original + h;
    const double up = f().item();
    values[j] = original - h;
    const double down = f().item();
    values[j] = original;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      std::ostringstream os;
      os << "non-finite probe at input " << i << " coordinate " << j;
      result.ok = false;
      result.input_index = i;
      result.flat_index = j;
      result.message = os.str();
      break;
    }
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic[i][j];
    const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    ++result.coordinates_checked;
    if (err > result.max_relative_error) {
      result.max_relative_error = err;
      result.input_index = i;
      result.flat_index = j;
    }
  }

  for (auto& t : inputs) t.zero_grad();
  return result;
}

}  // namespace rankdistill
