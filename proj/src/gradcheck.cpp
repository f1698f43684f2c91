#include "kra/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kra/error.hpp"

namespace kra {

double relative_error(double analytic, double numeric) noexcept {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), 1e-12});
  return std::abs(analytic - numeric) / denom;
}

double finite_diff_check(const std::function<double(const Tensor&)>& forward,
                         const Tensor& parameters, const Tensor& analytic,
                         double step, std::span<const std::size_t> indices) {
  if (!(step > 0.0)) {
    throw Error(ErrorCode::invalid_argument, "finite difference step must be > 0");
  }
  require_same_shape(parameters, analytic, "finite_diff_check");
  for (double g : analytic.data()) {
    if (std::isnan(g)) return std::numeric_limits<double>::infinity();
  }

  Tensor probe = parameters;
  double worst = 0.0;
  auto check = [&](std::size_t i) {
    const double original = probe[i];
    probe[i] = original + step;
    const double up = forward(probe);
    probe[i] = original - step;
    const double down = forward(probe);
    probe[i] = original;
    const double numeric = (up - down) / (2.0 * step);
    worst = std::max(worst, relative_error(analytic[i], numeric));
  };

  if (indices.empty()) {
    for (std::size_t i = 0; i < probe.size(); ++i) check(i);
  } else {
    for (std::size_t i : indices) {
      if (i >= probe.size()) {
        throw Error(ErrorCode::invalid_argument, "probe index out of range");
      }
      check(i);
    }
  }
  return worst;
}

double finite_diff_check(const std::function<double(const Tensor&)>& forward,
                         const std::function<Tensor(const Tensor&)>& gradient,
                         const Tensor& parameters, double step,
                         std::span<const std::size_t> indices) {
  return finite_diff_check(forward, parameters, gradient(parameters), step,
                           indices);
}

}  // namespace kra
