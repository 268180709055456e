#pragma once

#include <cstdint>
#include <functional>
#include <random>

#include "vseg/autodiff.hpp"
#include "vseg/gradcheck.hpp"
#include "vseg/tensor.hpp"

namespace vseg::testing {

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(shape);
  for (auto& v : t.storage()) v = static_cast<T>(u(rng));
  return t;
}

// Values with pairwise gaps of at least `gap` so max-pool and relu stay away
// from their kinks under a finite-difference step.
inline Tensor<double> spaced_tensor(const Shape& shape, std::mt19937_64& rng, double gap = 0.01) {
  Tensor<double> t(shape);
  std::vector<double> vals(t.size());
  const double offset = -0.5 * gap * static_cast<double>(t.size()) + 0.5 * gap;
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = offset + gap * static_cast<double>(i);
  std::shuffle(vals.begin(), vals.end(), rng);
  t.storage() = vals;
  return t;
}

// sum(y * weights) as a tape op, so every output coordinate gets a distinct upstream gradient.
template <typename T>
Var weighted_sum(Tape<T>& tape, Var y, const Tensor<T>& weights) {
  const Tensor<T>& Y = tape.value(y);
  Y.require_same_shape(weights, "weighted_sum");
  double s = 0;
  for (std::size_t i = 0; i < Y.size(); ++i) s += static_cast<double>(Y[i]) * weights[i];
  return tape.record(Tensor<T>({1}, static_cast<T>(s)), {y}, [y, weights](Tape<T>& t, std::size_t self) {
    const T up = t.upstream(self)[0];
    if (Tensor<T>* d = t.accumulator(y))
      for (std::size_t i = 0; i < weights.size(); ++i) (*d)[i] += up * weights[i];
  });
}

using DoubleOp = std::function<Var(Tape<double>&, Var)>;

// Finite-difference error of `op` at `point`, contracted against fixed random weights.
inline double op_gradient_error(const DoubleOp& op, const Tensor<double>& point, std::mt19937_64& rng,
                                double step = 1e-5) {
  Tape<double> probe;
  const Shape out_shape = probe.value(op(probe, probe.input(point))).shape();
  const Tensor<double> weights = random_tensor(out_shape, rng);
  std::function<Var(Tape<double>&, Var)> scalar = [&](Tape<double>& t, Var x) {
    return weighted_sum(t, op(t, x), weights);
  };
  return finite_difference_check<double>(scalar, point, step);
}

// Direct nested-loop convolution used as an oracle.
inline Tensor<double> naive_conv2d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b,
                                   std::size_t stride, std::size_t pad, std::size_t groups) {
  const std::size_t N = x.n(), Ci = x.c(), H = x.h(), W = x.w();
  const std::size_t Co = w.dim(0), cig = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::size_t cog = Co / groups;
  const std::size_t OH = (H + 2 * pad - kh) / stride + 1, OW = (W + 2 * pad - kw) / stride + 1;
  (void)Ci;
  Tensor<double> y({N, Co, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Co; ++co) {
      const std::size_t g = co / cog;
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          double s = b ? (*b)[co] : 0.0;
          for (std::size_t ci = 0; ci < cig; ++ci)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                s += w.at(co, ci, i, j) * x.at(n, g * cig + ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
              }
          y.at(n, co, oy, ox) = s;
        }
    }
  return y;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "max_abs_diff");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace vseg::testing
