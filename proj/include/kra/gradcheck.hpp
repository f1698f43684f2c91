#pragma once

#include <cstddef>
#include <functional>
#include <span>

#include "kra/tensor.hpp"

namespace kra {

// Compares an analytic gradient against central differences
// (f(p + h e_i) - f(p - h e_i)) / 2h at the given parameter indices (all of
// them when `indices` is empty). Returns the largest relative error, with
// denominator max(|analytic|, |numeric|, 1e-12). Returns +inf if any analytic
// entry is NaN.
double finite_diff_check(const std::function<double(const Tensor&)>& forward,
                         const Tensor& parameters, const Tensor& analytic,
                         double step, std::span<const std::size_t> indices = {});

// Overload that obtains the analytic gradient from `gradient(parameters)`.
double finite_diff_check(const std::function<double(const Tensor&)>& forward,
                         const std::function<Tensor(const Tensor&)>& gradient,
                         const Tensor& parameters, double step,
                         std::span<const std::size_t> indices = {});

double relative_error(double analytic, double numeric) noexcept;

}  // namespace kra
