// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "sicsf/tensor.hpp"

namespace sicsf {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t kinks = 0;  // elements re-measured with a narrower step
};

// Compares autograd gradients of `f` with respect to every tensor in `wrt`
// against central differences (f(x+eps) - f(x-eps)) / (2 eps), perturbing the
// tensors in place. A non-scalar output is contracted with a fixed seeded
// random tensor first; the numeric difference is formed from element-wise
// output differences. Relative error per element is |a-b| / max(|a|,|b|,floor).
// When two step sizes (eps and eps/10) disagree beyond rounding, the window
// holds a non-differentiable point and the narrower estimate is used.
// `max_per_tensor` > 0 checks a seeded random subset of elements per tensor.
GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                           std::vector<Tensor<double>> wrt, double eps = 1e-6,
                           std::size_t max_per_tensor = 0, std::uint64_t seed = 7,
                           double floor = 1e-8);

// Single-input convenience form.
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  Tensor<double> x, double eps = 1e-6);

}  // namespace sicsf
