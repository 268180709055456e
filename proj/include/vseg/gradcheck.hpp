#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "vseg/autodiff.hpp"
#include "vseg/error.hpp"
#include "vseg/tensor.hpp"

namespace vseg {

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
template <typename T>
double finite_difference_check(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& analytic,
                               const Tensor<T>& point, double step) {
  if (!(step > 0)) throw ConfigError("finite_difference_check: step must be positive");
  point.require_same_shape(analytic, "finite_difference_check");
  Tensor<T> probe = point;
  double worst = 0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + static_cast<T>(step);
    const double fp = f(probe);
    probe[i] = orig - static_cast<T>(step);
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_difference_check: non-finite function value at coordinate " +
                         std::to_string(i));
    const double numeric = (fp - fm) / (2 * step);
    const double err = std::abs(static_cast<double>(analytic[i]) - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

/// Same check where the scalar function is built on a tape and its analytic
/// gradient comes from reverse mode.
template <typename T>
double finite_difference_check(const std::function<Var(Tape<T>&, Var)>& build, const Tensor<T>& point,
                               double step) {
  auto evaluate = [&](const Tensor<T>& x) {
    Tape<T> tape;
    const Var out = build(tape, tape.input(x));
    if (tape.value(out).size() != 1) throw ShapeError("finite_difference_check: function must be scalar");
    return tape.value(out)[0];
  };
  Tape<T> tape;
  const Var in = tape.input(point);
  const Var out = build(tape, in);
  if (tape.value(out).size() != 1) throw ShapeError("finite_difference_check: function must be scalar");
  if (!std::isfinite(static_cast<double>(tape.value(out)[0])))
    throw NumericError("finite_difference_check: non-finite function value");
  tape.backward(out);
  return finite_difference_check<T>(std::function<T(const Tensor<T>&)>(evaluate), tape.grad(in), point, step);
}

}  // namespace vseg
