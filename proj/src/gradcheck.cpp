#include "rope_probe/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include "rope_probe/errors.hpp"

namespace rope_probe {

GradCheckResult finite_difference_check(const std::function<double(const Tensor&)>& f,
                                        const Tensor& x, const Tensor& analytic, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
  if (!x.same_shape(analytic)) throw ShapeError("analytic gradient shape differs from x");

  GradCheckResult result;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double original = probe[i];
    probe[i] = original + h;
    const double up = f(probe);
    probe[i] = original - h;
    const double down = f(probe);
    probe[i] = original;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError(fmt::format("finite-difference probe produced non-finite f at index {}", i));
    }
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > result.max_relative_error || i == 0) {
      result.max_relative_error = std::max(result.max_relative_error, rel);
      result.worst_index = i;
      result.analytic = analytic[i];
      result.numeric = numeric;
    }
  }
  return result;
}

}  // namespace rope_probe
