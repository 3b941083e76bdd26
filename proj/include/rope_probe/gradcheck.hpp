#pragma once

#include <functional>

#include "rope_probe/tensor.hpp"

namespace rope_probe {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares `analytic` against central differences of `f` around `x`:
//   (f(x + h e_i) - f(x - h e_i)) / (2h)
// relative error uses max(|analytic|, |numeric|, 1e-12) as denominator.
GradCheckResult finite_difference_check(const std::function<double(const Tensor&)>& f,
                                        const Tensor& x, const Tensor& analytic, double h);

}  // namespace rope_probe
