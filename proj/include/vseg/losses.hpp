#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "vseg/autodiff.hpp"
#include "vseg/error.hpp"
#include "vseg/tensor.hpp"

namespace vseg {

/// Weights of the supervised/semi-supervised combination and focal-loss shape.
/// `labeled` and `unlabeled` are the per-batch image counts.
struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  std::size_t labeled = 0;
  std::size_t unlabeled = 0;
  double gamma = 2.0;
  double alpha = 0.25;

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0) throw ConfigError("loss weights: lambdas must be non-negative");
    if (gamma < 0) throw ConfigError("loss weights: focal gamma must be non-negative");
    if (!(alpha > 0 && alpha <= 1)) throw ConfigError("loss weights: focal alpha must be in (0, 1]");
  }
};

namespace detail {

template <typename T>
void check_segmentation_pair(const Tensor<T>& logits, const Tensor<T>& target, const char* where) {
  require_rank4(logits, where);
  require_finite(logits, where);
  if (logits.c() < 2) throw ShapeError(std::string(where) + ": logits need at least two channels");
  if (target.shape() != Shape{logits.n(), logits.h(), logits.w()})
    throw ShapeError(std::string(where) + ": target " + shape_string(target.shape()) + " does not match logits " +
                     shape_string(logits.shape()));
  for (std::size_t i = 0; i < target.size(); ++i)
    if (target[i] != T(0) && target[i] != T(1))
      throw Error(std::string(where) + ": target values must be 0 or 1");
}

// Mean over pixels of -alpha (1 - p_t)^gamma log p_t with p_t the softmax
// probability of the target class. gamma = 0, alpha = 1 is cross-entropy.
template <typename T>
Var focal_like(Tape<T>& tape, Var logits, const Tensor<T>& target, double gamma, double alpha,
               const char* where) {
  const Tensor<T>& Z = tape.value(logits);
  check_segmentation_pair(Z, target, where);
  const std::size_t N = Z.n(), C = Z.c(), plane = Z.h() * Z.w();
  const double count = static_cast<double>(N * plane);
  Tensor<T> dZ(Z.shape());
  double total = 0;
  std::vector<double> logp(C);
  for (std::size_t b = 0; b < N; ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < C; ++c) m = std::max(m, static_cast<double>(Z[(b * C + c) * plane + i]));
      double s = 0;
      for (std::size_t c = 0; c < C; ++c) s += std::exp(Z[(b * C + c) * plane + i] - m);
      const double lse = m + std::log(s);
      for (std::size_t c = 0; c < C; ++c) logp[c] = Z[(b * C + c) * plane + i] - lse;
      const std::size_t t = target[b * plane + i] != T(0) ? 1 : 0;
      const double pt = std::exp(logp[t]);
      const double q = 1 - pt;
      const double mod = gamma == 0 ? 1.0 : std::pow(q, gamma);
      total += -alpha * mod * logp[t];
      // d loss / d z_c = g (delta_tc - p_c), with g = d loss / d p_t * p_t.
      const double dmod = (gamma == 0 || q <= 0) ? 0.0 : gamma * std::pow(q, gamma - 1);
      const double g = -alpha * (mod - dmod * pt * logp[t]);
      for (std::size_t c = 0; c < C; ++c) {
        const double pc = std::exp(logp[c]);
        dZ[(b * C + c) * plane + i] = static_cast<T>(g * ((c == t ? 1.0 : 0.0) - pc) / count);
      }
    }
  }
  Tensor<T> out({1}, static_cast<T>(total / count));
  return tape.record(std::move(out), {logits}, [logits, dZ = std::move(dZ)](Tape<T>& tp, std::size_t self) {
    const T up = tp.upstream(self)[0];
    if (Tensor<T>* d = tp.accumulator(logits))
      for (std::size_t i = 0; i < dZ.size(); ++i) (*d)[i] += up * dZ[i];
  });
}

}  // namespace detail

/// Two-class cross-entropy on channel-softmaxed logits, averaged over pixels.
/// `target` is (B, H, W) with 1 for vein (channel 1) and 0 for background.
template <typename T>
Var bce_loss(Tape<T>& tape, Var logits, const Tensor<T>& target) {
  return detail::focal_like(tape, logits, target, 0.0, 1.0, "bce_loss");
}

template <typename T>
Var focal_loss(Tape<T>& tape, Var logits, const Tensor<T>& target, double gamma, double alpha) {
  if (gamma < 0) throw ConfigError("focal_loss: gamma must be non-negative");
  if (!(alpha > 0 && alpha <= 1)) throw ConfigError("focal_loss: alpha must be in (0, 1]");
  return detail::focal_like(tape, logits, target, gamma, alpha, "focal_loss");
}

/// Mean squared difference between student probabilities and a fixed teacher map.
template <typename T>
Var consistency_mse(Tape<T>& tape, Var student_probs, const Tensor<T>& teacher_probs) {
  const Tensor<T>& S = tape.value(student_probs);
  S.require_same_shape(teacher_probs, "consistency_mse");
  require_finite(S, "consistency_mse");
  require_finite(teacher_probs, "consistency_mse");
  if (S.empty()) throw ShapeError("consistency_mse: empty input");
  double total = 0;
  for (std::size_t i = 0; i < S.size(); ++i) {
    const double d = static_cast<double>(S[i]) - teacher_probs[i];
    total += d * d;
  }
  const double n = static_cast<double>(S.size());
  Tensor<T> out({1}, static_cast<T>(total / n));
  return tape.record(std::move(out), {student_probs},
                     [student_probs, teacher_probs, n](Tape<T>& tp, std::size_t self) {
                       const double up = tp.upstream(self)[0];
                       const Tensor<T>& Sv = tp.value(student_probs);
                       if (Tensor<T>* d = tp.accumulator(student_probs))
                         for (std::size_t i = 0; i < Sv.size(); ++i)
                           (*d)[i] += static_cast<T>(up * 2.0 * (static_cast<double>(Sv[i]) - teacher_probs[i]) / n);
                     });
}

/// (lambda1 M L_sup + lambda2 N L_semisup) / (M + N).
inline double total_loss(double supervised, double semi_supervised, const LossWeights& w) {
  w.validate();
  const double m = static_cast<double>(w.labeled), n = static_cast<double>(w.unlabeled);
  if (m + n == 0) throw ConfigError("total_loss: no labeled or unlabeled images in the batch");
  return (w.lambda1 * m * supervised + w.lambda2 * n * semi_supervised) / (m + n);
}

/// Tape form of total_loss. Either input may be absent when its weight count is zero.
template <typename T>
Var total_loss(Tape<T>& tape, std::optional<Var> supervised, std::optional<Var> semi_supervised,
               const LossWeights& w) {
  w.validate();
  const double m = static_cast<double>(w.labeled), n = static_cast<double>(w.unlabeled);
  if (m + n == 0) throw ConfigError("total_loss: no labeled or unlabeled images in the batch");
  const double ws = w.lambda1 * m / (m + n), wu = w.lambda2 * n / (m + n);
  if ((ws != 0 && !supervised) || (wu != 0 && !semi_supervised))
    throw ConfigError("total_loss: missing loss term for a non-zero weight");
  double v = 0;
  std::vector<Var> parents;
  if (supervised) {
    v += ws * tape.value(*supervised)[0];
    parents.push_back(*supervised);
  }
  if (semi_supervised) {
    v += wu * tape.value(*semi_supervised)[0];
    parents.push_back(*semi_supervised);
  }
  return tape.record(Tensor<T>({1}, static_cast<T>(v)), parents,
                     [supervised, semi_supervised, ws, wu](Tape<T>& tp, std::size_t self) {
                       const double up = tp.upstream(self)[0];
                       if (supervised)
                         if (Tensor<T>* d = tp.accumulator(*supervised)) (*d)[0] += static_cast<T>(up * ws);
                       if (semi_supervised)
                         if (Tensor<T>* d = tp.accumulator(*semi_supervised)) (*d)[0] += static_cast<T>(up * wu);
                     });
}

// Value-only helpers.
template <typename T>
double bce_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  Tape<T> tape(false);
  return tape.value(bce_loss(tape, tape.input(logits, false), target))[0];
}

template <typename T>
double focal_loss(const Tensor<T>& logits, const Tensor<T>& target, double gamma, double alpha) {
  Tape<T> tape(false);
  return tape.value(focal_loss(tape, tape.input(logits, false), target, gamma, alpha))[0];
}

template <typename T>
double consistency_mse(const Tensor<T>& student_probs, const Tensor<T>& teacher_probs) {
  Tape<T> tape(false);
  return tape.value(consistency_mse(tape, tape.input(student_probs, false), teacher_probs))[0];
}

}  // namespace vseg
