#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vseg/autodiff.hpp"
#include "vseg/error.hpp"
#include "vseg/tensor.hpp"

namespace vseg {

enum class LayerKind {
  conv2d,
  conv_transpose2d,
  maxpool2d,
  relu,
  batchnorm2d,
  channel_concat,
  softmax_channels,
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::conv_transpose2d: return "conv_transpose2d";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::relu: return "relu";
    case LayerKind::batchnorm2d: return "batchnorm2d";
    case LayerKind::channel_concat: return "channel_concat";
    case LayerKind::softmax_channels: return "softmax_channels";
  }
  return "?";
}

/// Static description of one layer. Transposed convolutions always produce
/// `input * stride` spatially; the output padding that achieves this is derived.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t groups = 1;
  bool bias = true;

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride = 1,
                        std::size_t groups = 1, bool bias = true) {
    return {LayerKind::conv2d, k, k, stride, k / 2, in, out, groups, bias};
  }
  static LayerSpec deconv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                          bool bias = true) {
    return {LayerKind::conv_transpose2d, k, k, stride, k / 2, in, out, 1, bias};
  }
  static LayerSpec maxpool(std::size_t k, std::size_t stride, std::size_t padding) {
    return {LayerKind::maxpool2d, k, k, stride, padding, 0, 0, 1, false};
  }
  static LayerSpec batchnorm(std::size_t channels) {
    return {LayerKind::batchnorm2d, 1, 1, 1, 0, channels, channels, 1, false};
  }
  static LayerSpec simple(LayerKind kind) { return {kind, 1, 1, 1, 0, 0, 0, 1, false}; }

  bool is_conv() const {
    return kind == LayerKind::conv2d || kind == LayerKind::conv_transpose2d;
  }

  // Output padding that makes a transposed convolution map H to H * stride.
  std::size_t output_padding() const {
    const long op = static_cast<long>(stride) - static_cast<long>(kernel_h) + 2 * static_cast<long>(padding);
    return op < 0 ? 0 : static_cast<std::size_t>(op);
  }

  void validate() const {
    if (is_conv() || kind == LayerKind::maxpool2d) {
      if (kernel_h == 0 || kernel_w == 0 || stride == 0)
        throw ConfigError(std::string(to_string(kind)) + ": kernel and stride must be positive");
    }
    if (is_conv()) {
      if (groups == 0 || in_channels % groups != 0 || out_channels % groups != 0)
        throw ConfigError(std::string(to_string(kind)) + ": groups " + std::to_string(groups) +
                          " must divide in_channels " + std::to_string(in_channels) +
                          " and out_channels " + std::to_string(out_channels));
    }
    if (kind == LayerKind::conv_transpose2d) {
      const long op = static_cast<long>(stride) - static_cast<long>(kernel_h) + 2 * static_cast<long>(padding);
      if (op < 0 || op >= static_cast<long>(stride) || kernel_h != kernel_w)
        throw ConfigError("conv_transpose2d: kernel/padding cannot produce input*stride output");
    }
  }

  Shape weight_shape() const {
    if (kind == LayerKind::conv2d) return {out_channels, in_channels / groups, kernel_h, kernel_w};
    if (kind == LayerKind::conv_transpose2d) return {in_channels, out_channels / groups, kernel_h, kernel_w};
    return {};
  }

  std::size_t parameter_count() const {
    if (is_conv()) return shape_size(weight_shape()) + (bias ? out_channels : 0);
    if (kind == LayerKind::batchnorm2d) return 2 * in_channels;
    return 0;
  }

  /// Output shape for single-input kinds.
  Shape output_shape(const Shape& in) const {
    if (in.size() != 4) throw ShapeError(std::string(to_string(kind)) + ": expected 4-D input");
    const std::size_t n = in[0], c = in[1], h = in[2], w = in[3];
    switch (kind) {
      case LayerKind::conv2d:
        if (c != in_channels) throw ShapeError("conv2d: input has " + std::to_string(c) +
                                               " channels, layer expects " + std::to_string(in_channels));
        return {n, out_channels, window_out(h, kernel_h), window_out(w, kernel_w)};
      case LayerKind::conv_transpose2d:
        if (c != in_channels) throw ShapeError("conv_transpose2d: input has " + std::to_string(c) +
                                               " channels, layer expects " + std::to_string(in_channels));
        return {n, out_channels, h * stride, w * stride};
      case LayerKind::maxpool2d:
        return {n, c, window_out(h, kernel_h), window_out(w, kernel_w)};
      case LayerKind::batchnorm2d:
        if (c != in_channels) throw ShapeError("batchnorm2d: channel mismatch");
        return in;
      case LayerKind::relu:
      case LayerKind::softmax_channels:
        return in;
      case LayerKind::channel_concat:
        throw ShapeError("channel_concat takes several inputs");
    }
    return in;
  }

 private:
  std::size_t window_out(std::size_t extent, std::size_t k) const {
    if (extent + 2 * padding < k) throw ShapeError(std::string(to_string(kind)) + ": input smaller than kernel");
    return (extent + 2 * padding - k) / stride + 1;
  }
};

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

struct Window {
  std::size_t kh, kw, stride, pad;
};

// cols[(c*kh + i)*kw + j][oy*ow + ox] = src[c][oy*s - p + i][ox*s - p + j] (0 outside).
template <typename T>
void im2col(const T* src, std::size_t channels, std::size_t h, std::size_t w, Window win,
            std::size_t oh, std::size_t ow, T* cols) {
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = src + c * h * w;
    for (std::size_t i = 0; i < win.kh; ++i) {
      for (std::size_t j = 0; j < win.kw; ++j) {
        T* row = cols + ((c * win.kh + i) * win.kw + j) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * win.stride + i) - static_cast<long>(win.pad);
          T* dst = row + oy * ow;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* line = plane + iy * W;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * win.stride + j) - static_cast<long>(win.pad);
            dst[ox] = (ix < 0 || ix >= W) ? T(0) : line[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the image.
template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w, Window win,
            std::size_t oh, std::size_t ow, T* dst) {
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = dst + c * h * w;
    for (std::size_t i = 0; i < win.kh; ++i) {
      for (std::size_t j = 0; j < win.kw; ++j) {
        const T* row = cols + ((c * win.kh + i) * win.kw + j) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * win.stride + i) - static_cast<long>(win.pad);
          if (iy < 0 || iy >= H) continue;
          T* line = plane + iy * W;
          const T* src = row + oy * ow;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * win.stride + j) - static_cast<long>(win.pad);
            if (ix >= 0 && ix < W) line[ix] += src[ox];
          }
        }
      }
    }
  }
}

inline bool is_pointwise(const LayerSpec& s) {
  return s.kernel_h == 1 && s.kernel_w == 1 && s.stride == 1 && s.padding == 0;
}

template <typename T>
void add_bias(Tensor<T>& y, const Tensor<T>& bias) {
  const std::size_t plane = y.h() * y.w();
  for (std::size_t b = 0; b < y.n(); ++b)
    for (std::size_t c = 0; c < y.c(); ++c) {
      T* p = y.data() + (b * y.c() + c) * plane;
      const T v = bias[c];
      for (std::size_t i = 0; i < plane; ++i) p[i] += v;
    }
}

template <typename T>
void accumulate_bias_grad(const Tensor<T>& dy, Tensor<T>& db) {
  const std::size_t plane = dy.h() * dy.w();
  for (std::size_t c = 0; c < dy.c(); ++c) {
    double s = 0;
    for (std::size_t b = 0; b < dy.n(); ++b) {
      const T* p = dy.data() + (b * dy.c() + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
    }
    db[c] += static_cast<T>(s);
  }
}

}  // namespace detail

/// Grouped 2-D convolution. Weight is (out, in/groups, kh, kw); bias optional.
template <typename T>
Var conv2d(Tape<T>& tape, const LayerSpec& spec, Var x, Var weight, std::optional<Var> bias = {}) {
  spec.validate();
  const Tensor<T>& X = tape.value(x);
  require_rank4(X, "conv2d");
  require_finite(X, "conv2d");
  const Shape out_shape = spec.output_shape(X.shape());
  if (tape.value(weight).shape() != spec.weight_shape())
    throw ShapeError("conv2d: weight shape " + shape_string(tape.value(weight).shape()) +
                     " expected " + shape_string(spec.weight_shape()));
  if (bias && tape.value(*bias).shape() != Shape{spec.out_channels})
    throw ShapeError("conv2d: bias shape mismatch");

  const std::size_t N = X.n(), H = X.h(), W = X.w();
  const std::size_t OH = out_shape[2], OW = out_shape[3], P = OH * OW;
  const std::size_t G = spec.groups, cin_g = spec.in_channels / G, cout_g = spec.out_channels / G;
  const std::size_t K = cin_g * spec.kernel_h * spec.kernel_w;
  const detail::Window win{spec.kernel_h, spec.kernel_w, spec.stride, spec.padding};
  const bool pointwise = detail::is_pointwise(spec);

  Tensor<T> Y(out_shape);
  std::vector<T> cols(pointwise ? 0 : K * P);
  const T* wdata = tape.value(weight).data();
  for (std::size_t b = 0; b < N; ++b) {
    for (std::size_t g = 0; g < G; ++g) {
      const T* xg = X.data() + (b * spec.in_channels + g * cin_g) * H * W;
      const T* cptr = xg;
      if (!pointwise) {
        detail::im2col(xg, cin_g, H, W, win, OH, OW, cols.data());
        cptr = cols.data();
      }
      detail::CMapRM<T> Wm(wdata + g * cout_g * K, cout_g, K);
      detail::CMapRM<T> Cm(cptr, K, P);
      detail::MapRM<T> Ym(Y.data() + (b * spec.out_channels + g * cout_g) * P, cout_g, P);
      Ym.noalias() = Wm * Cm;
    }
  }
  if (bias) detail::add_bias(Y, tape.value(*bias));

  std::vector<Var> parents{x, weight};
  if (bias) parents.push_back(*bias);
  return tape.record(std::move(Y), parents, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dY = t.upstream(self);
    const Tensor<T>& Xv = t.value(x);
    const T* wd = t.value(weight).data();
    Tensor<T>* dX = t.accumulator(x);
    Tensor<T>* dW = t.accumulator(weight);
    if (bias)
      if (Tensor<T>* dB = t.accumulator(*bias)) detail::accumulate_bias_grad(dY, *dB);
    std::vector<T> c(pointwise ? 0 : K * P), dc(K * P);
    for (std::size_t b = 0; b < N; ++b) {
      for (std::size_t g = 0; g < G; ++g) {
        const T* xg = Xv.data() + (b * spec.in_channels + g * cin_g) * H * W;
        detail::CMapRM<T> dYm(dY.data() + (b * spec.out_channels + g * cout_g) * P, cout_g, P);
        if (dW) {
          const T* cptr = xg;
          if (!pointwise) {
            detail::im2col(xg, cin_g, H, W, win, OH, OW, c.data());
            cptr = c.data();
          }
          detail::CMapRM<T> Cm(cptr, K, P);
          detail::MapRM<T> dWm(dW->data() + g * cout_g * K, cout_g, K);
          dWm.noalias() += dYm * Cm.transpose();
        }
        if (dX) {
          detail::CMapRM<T> Wm(wd + g * cout_g * K, cout_g, K);
          T* dxg = dX->data() + (b * spec.in_channels + g * cin_g) * H * W;
          if (pointwise) {
            detail::MapRM<T> dXm(dxg, K, P);
            dXm.noalias() += Wm.transpose() * dYm;
          } else {
            detail::MapRM<T> dCm(dc.data(), K, P);
            dCm.noalias() = Wm.transpose() * dYm;
            detail::col2im(dc.data(), cin_g, H, W, win, OH, OW, dxg);
          }
        }
      }
    }
  });
}

/// Transposed convolution (the adjoint of a strided convolution), mapping H to H * stride.
/// Weight is (in, out/groups, kh, kw).
template <typename T>
Var conv_transpose2d(Tape<T>& tape, const LayerSpec& spec, Var x, Var weight,
                     std::optional<Var> bias = {}) {
  spec.validate();
  const Tensor<T>& X = tape.value(x);
  require_rank4(X, "conv_transpose2d");
  require_finite(X, "conv_transpose2d");
  const Shape out_shape = spec.output_shape(X.shape());
  if (tape.value(weight).shape() != spec.weight_shape())
    throw ShapeError("conv_transpose2d: weight shape " + shape_string(tape.value(weight).shape()) +
                     " expected " + shape_string(spec.weight_shape()));
  if (bias && tape.value(*bias).shape() != Shape{spec.out_channels})
    throw ShapeError("conv_transpose2d: bias shape mismatch");

  const std::size_t N = X.n(), H = X.h(), W = X.w(), P = H * W;
  const std::size_t OH = out_shape[2], OW = out_shape[3];
  const std::size_t G = spec.groups, cin_g = spec.in_channels / G, cout_g = spec.out_channels / G;
  const std::size_t K = cout_g * spec.kernel_h * spec.kernel_w;
  // The forward map is col2im over the output grid seen as a convolution input.
  const detail::Window win{spec.kernel_h, spec.kernel_w, spec.stride, spec.padding};

  Tensor<T> Y(out_shape);
  std::vector<T> cols(K * P);
  const T* wdata = tape.value(weight).data();
  for (std::size_t b = 0; b < N; ++b) {
    for (std::size_t g = 0; g < G; ++g) {
      detail::CMapRM<T> Wm(wdata + g * cin_g * K, cin_g, K);
      detail::CMapRM<T> Xm(X.data() + (b * spec.in_channels + g * cin_g) * P, cin_g, P);
      detail::MapRM<T> Cm(cols.data(), K, P);
      Cm.noalias() = Wm.transpose() * Xm;
      detail::col2im(cols.data(), cout_g, OH, OW, win, H, W,
                     Y.data() + (b * spec.out_channels + g * cout_g) * OH * OW);
    }
  }
  if (bias) detail::add_bias(Y, tape.value(*bias));

  std::vector<Var> parents{x, weight};
  if (bias) parents.push_back(*bias);
  return tape.record(std::move(Y), parents, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dY = t.upstream(self);
    const Tensor<T>& Xv = t.value(x);
    const T* wd = t.value(weight).data();
    Tensor<T>* dX = t.accumulator(x);
    Tensor<T>* dW = t.accumulator(weight);
    if (bias)
      if (Tensor<T>* dB = t.accumulator(*bias)) detail::accumulate_bias_grad(dY, *dB);
    std::vector<T> dc(K * P);
    for (std::size_t b = 0; b < N; ++b) {
      for (std::size_t g = 0; g < G; ++g) {
        detail::im2col(dY.data() + (b * spec.out_channels + g * cout_g) * OH * OW, cout_g, OH, OW,
                       win, H, W, dc.data());
        detail::CMapRM<T> dCm(dc.data(), K, P);
        if (dX) {
          detail::CMapRM<T> Wm(wd + g * cin_g * K, cin_g, K);
          detail::MapRM<T> dXm(dX->data() + (b * spec.in_channels + g * cin_g) * P, cin_g, P);
          dXm.noalias() += Wm * dCm;
        }
        if (dW) {
          detail::CMapRM<T> Xm(Xv.data() + (b * spec.in_channels + g * cin_g) * P, cin_g, P);
          detail::MapRM<T> dWm(dW->data() + g * cin_g * K, cin_g, K);
          dWm.noalias() += Xm * dCm.transpose();
        }
      }
    }
  });
}

/// Max pooling; padded cells never win. The argmax of each window is kept for backward.
template <typename T>
Var maxpool2d(Tape<T>& tape, const LayerSpec& spec, Var x) {
  spec.validate();
  const Tensor<T>& X = tape.value(x);
  require_rank4(X, "maxpool2d");
  require_finite(X, "maxpool2d");
  const Shape out_shape = spec.output_shape(X.shape());
  const std::size_t NC = X.n() * X.c(), H = X.h(), W = X.w(), OH = out_shape[2], OW = out_shape[3];
  Tensor<T> Y(out_shape);
  std::vector<std::size_t> argmax(Y.size());
  for (std::size_t p = 0; p < NC; ++p) {
    const T* plane = X.data() + p * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t i = 0; i < spec.kernel_h; ++i) {
          const long iy = static_cast<long>(oy * spec.stride + i) - static_cast<long>(spec.padding);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t j = 0; j < spec.kernel_w; ++j) {
            const long ix = static_cast<long>(ox * spec.stride + j) - static_cast<long>(spec.padding);
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            const std::size_t idx = static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix);
            if (plane[idx] > best) {
              best = plane[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = (p * OH + oy) * OW + ox;
        Y[o] = best;
        argmax[o] = p * H * W + best_idx;
      }
    }
  }
  return tape.record(std::move(Y), {x}, [x, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dY = t.upstream(self);
    if (Tensor<T>* dX = t.accumulator(x))
      for (std::size_t o = 0; o < dY.size(); ++o) (*dX)[argmax[o]] += dY[o];
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  require_finite(X, "relu");
  Tensor<T> Y(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) Y[i] = X[i] > T(0) ? X[i] : T(0);
  return tape.record(std::move(Y), {x}, [x](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dY = t.upstream(self);
    const Tensor<T>& Xv = t.value(x);
    if (Tensor<T>* dX = t.accumulator(x))
      for (std::size_t i = 0; i < dY.size(); ++i)
        if (Xv[i] > T(0)) (*dX)[i] += dY[i];
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& A = tape.value(a);
  A.require_same_shape(tape.value(b), "add");
  Tensor<T> Y = A;
  Y += tape.value(b);
  return tape.record(std::move(Y), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dY = t.upstream(self);
    if (Tensor<T>* dA = t.accumulator(a)) *dA += dY;
    if (Tensor<T>* dB = t.accumulator(b)) *dB += dY;
  });
}

/// Concatenation along the channel axis; spatial extents and batch must agree.
template <typename T>
Var concat_channels(Tape<T>& tape, const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("channel_concat: no inputs");
  const Tensor<T>& first = tape.value(xs[0]);
  require_rank4(first, "channel_concat");
  std::size_t C = 0;
  for (Var v : xs) {
    const Tensor<T>& t = tape.value(v);
    require_rank4(t, "channel_concat");
    require_finite(t, "channel_concat");
    if (t.n() != first.n() || t.h() != first.h() || t.w() != first.w())
      throw ShapeError("channel_concat: " + shape_string(t.shape()) + " vs " + shape_string(first.shape()));
    C += t.c();
  }
  const std::size_t N = first.n(), plane = first.h() * first.w();
  Tensor<T> Y({N, C, first.h(), first.w()});
  std::vector<std::size_t> channels;
  for (std::size_t b = 0; b < N; ++b) {
    std::size_t c0 = 0;
    for (Var v : xs) {
      const Tensor<T>& t = tape.value(v);
      std::copy_n(t.data() + b * t.c() * plane, t.c() * plane, Y.data() + (b * C + c0) * plane);
      c0 += t.c();
    }
  }
  for (Var v : xs) channels.push_back(tape.value(v).c());
  return tape.record(std::move(Y), xs, [xs, channels, N, C, plane](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dY = t.upstream(self);
    std::size_t c0 = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (Tensor<T>* dX = t.accumulator(xs[k])) {
        for (std::size_t b = 0; b < N; ++b) {
          const T* src = dY.data() + (b * C + c0) * plane;
          T* dst = dX->data() + b * channels[k] * plane;
          for (std::size_t i = 0; i < channels[k] * plane; ++i) dst[i] += src[i];
        }
      }
      c0 += channels[k];
    }
  });
}

/// Softmax over the channel axis at every pixel.
template <typename T>
Var softmax_channels(Tape<T>& tape, Var x) {
  const Tensor<T>& X = tape.value(x);
  require_rank4(X, "softmax_channels");
  require_finite(X, "softmax_channels");
  const std::size_t N = X.n(), C = X.c(), plane = X.h() * X.w();
  Tensor<T> Y(X.shape());
  for (std::size_t b = 0; b < N; ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < C; ++c) m = std::max(m, X[(b * C + c) * plane + i]);
      T s = 0;
      for (std::size_t c = 0; c < C; ++c) {
        const T e = std::exp(X[(b * C + c) * plane + i] - m);
        Y[(b * C + c) * plane + i] = e;
        s += e;
      }
      for (std::size_t c = 0; c < C; ++c) Y[(b * C + c) * plane + i] /= s;
    }
  }
  return tape.record(std::move(Y), {x}, [x, N, C, plane](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dY = t.upstream(self);
    const Tensor<T>& Yv = t.value(Var{self});
    Tensor<T>* dX = t.accumulator(x);
    if (!dX) return;
    for (std::size_t b = 0; b < N; ++b) {
      for (std::size_t i = 0; i < plane; ++i) {
        T dot = 0;
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t o = (b * C + c) * plane + i;
          dot += dY[o] * Yv[o];
        }
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t o = (b * C + c) * plane + i;
          (*dX)[o] += Yv[o] * (dY[o] - dot);
        }
      }
    }
  });
}

/// Rows [begin, end) of the batch axis.
template <typename T>
Var slice_batch(Tape<T>& tape, Var x, std::size_t begin, std::size_t end) {
  const Tensor<T>& X = tape.value(x);
  if (X.rank() == 0 || begin > end || end > X.dim(0))
    throw ShapeError("slice_batch: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside batch of " + shape_string(X.shape()));
  Shape s = X.shape();
  s[0] = end - begin;
  const std::size_t row = X.size() / X.dim(0);
  Tensor<T> Y(s);
  std::copy_n(X.data() + begin * row, (end - begin) * row, Y.data());
  return tape.record(std::move(Y), {x}, [x, begin, row](Tape<T>& t, std::size_t self) {
    const Tensor<T>& dY = t.upstream(self);
    if (Tensor<T>* dX = t.accumulator(x))
      for (std::size_t i = 0; i < dY.size(); ++i) (*dX)[begin * row + i] += dY[i];
  });
}

/// Batch-norm state of one layer. Running statistics live in the parameter set
/// as non-trainable buffers so they are checkpointed and EMA-averaged with weights.
template <typename T>
struct BatchNormState {
  Var gamma;
  Var beta;
  Parameter<T>* running_mean = nullptr;
  Parameter<T>* running_var = nullptr;
};

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalisation. Training mode normalises with batch statistics and
/// updates the running buffers; inference mode uses the running buffers.
template <typename T>
Var batchnorm2d(Tape<T>& tape, Var x, const BatchNormState<T>& st, BatchNormOptions opt) {
  const Tensor<T>& X = tape.value(x);
  require_rank4(X, "batchnorm2d");
  require_finite(X, "batchnorm2d");
  const std::size_t N = X.n(), C = X.c(), plane = X.h() * X.w();
  const Tensor<T>& gamma = tape.value(st.gamma);
  const Tensor<T>& beta = tape.value(st.beta);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
    throw ShapeError("batchnorm2d: affine parameters must have " + std::to_string(C) + " entries");
  if (!st.running_mean || !st.running_var || st.running_mean->value.shape() != Shape{C} ||
      st.running_var->value.shape() != Shape{C})
    throw ShapeError("batchnorm2d: running statistics missing or mis-shaped");
  const std::size_t m = N * plane;
  if (opt.training && m < 2) throw ShapeError("batchnorm2d: training needs more than one value per channel");

  std::vector<T> mean(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (opt.training) {
      double s = 0, ss = 0;
      for (std::size_t b = 0; b < N; ++b) {
        const T* p = X.data() + (b * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(m);
      for (std::size_t b = 0; b < N; ++b) {
        const T* p = X.data() + (b * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(m);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
      T& rm = st.running_mean->value[c];
      T& rv = st.running_var->value[c];
      rm = static_cast<T>((1 - opt.momentum) * rm + opt.momentum * mu);
      rv = static_cast<T>((1 - opt.momentum) * rv + opt.momentum * var * m / (m - 1.0));
    } else {
      mean[c] = st.running_mean->value[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(st.running_var->value[c]) + opt.eps));
    }
  }
  Tensor<T> Y(X.shape());
  Tensor<T> xhat(X.shape());
  for (std::size_t b = 0; b < N; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t o = (b * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T xh = (X[o + i] - mean[c]) * inv_std[c];
        xhat[o + i] = xh;
        Y[o + i] = gamma[c] * xh + beta[c];
      }
    }
  const bool training = opt.training;
  return tape.record(
      std::move(Y), {x, st.gamma, st.beta},
      [x, g = st.gamma, bt = st.beta, xhat = std::move(xhat), inv_std, N, C, plane, m, training](
          Tape<T>& t, std::size_t self) {
        const Tensor<T>& dY = t.upstream(self);
        const Tensor<T>& gam = t.value(g);
        Tensor<T>* dX = t.accumulator(x);
        Tensor<T>* dG = t.accumulator(g);
        Tensor<T>* dB = t.accumulator(bt);
        for (std::size_t c = 0; c < C; ++c) {
          double sum_dy = 0, sum_dy_xh = 0;
          for (std::size_t b = 0; b < N; ++b) {
            const std::size_t o = (b * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy += dY[o + i];
              sum_dy_xh += static_cast<double>(dY[o + i]) * xhat[o + i];
            }
          }
          if (dG) (*dG)[c] += static_cast<T>(sum_dy_xh);
          if (dB) (*dB)[c] += static_cast<T>(sum_dy);
          if (!dX) continue;
          const T scale = gam[c] * inv_std[c];
          const T mean_dy = static_cast<T>(sum_dy / m);
          const T mean_dy_xh = static_cast<T>(sum_dy_xh / m);
          for (std::size_t b = 0; b < N; ++b) {
            const std::size_t o = (b * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              if (training)
                (*dX)[o + i] += scale * (dY[o + i] - mean_dy - xhat[o + i] * mean_dy_xh);
              else
                (*dX)[o + i] += scale * dY[o + i];
            }
          }
        }
      });
}

/// Tape variables a layer may consume. Which fields are required depends on the kind.
template <typename T>
struct LayerParams {
  std::optional<Var> weight;
  std::optional<Var> bias;
  std::optional<BatchNormState<T>> norm;
  BatchNormOptions norm_options{};
};

/// Run one layer described by `spec`. channel_concat consumes every input;
/// all other kinds take exactly one.
template <typename T>
Var layer_forward(Tape<T>& tape, const LayerSpec& spec, std::span<const Var> inputs,
                  const LayerParams<T>& params = {}) {
  if (inputs.empty()) throw ShapeError(std::string(to_string(spec.kind)) + ": no input");
  if (spec.kind != LayerKind::channel_concat && inputs.size() != 1)
    throw ShapeError(std::string(to_string(spec.kind)) + ": expects exactly one input");
  const Var x = inputs[0];
  switch (spec.kind) {
    case LayerKind::conv2d:
    case LayerKind::conv_transpose2d: {
      if (!params.weight) throw ShapeError(std::string(to_string(spec.kind)) + ": missing weight");
      if (spec.bias && !params.bias) throw ShapeError(std::string(to_string(spec.kind)) + ": missing bias");
      const std::optional<Var> b = spec.bias ? params.bias : std::nullopt;
      return spec.kind == LayerKind::conv2d ? conv2d(tape, spec, x, *params.weight, b)
                                            : conv_transpose2d(tape, spec, x, *params.weight, b);
    }
    case LayerKind::maxpool2d: return maxpool2d(tape, spec, x);
    case LayerKind::relu: return relu(tape, x);
    case LayerKind::batchnorm2d:
      if (!params.norm) throw ShapeError("batchnorm2d: missing normalisation state");
      if (tape.value(x).rank() == 4 && tape.value(x).c() != spec.in_channels)
        throw ShapeError("batchnorm2d: channel mismatch");
      return batchnorm2d(tape, x, *params.norm, params.norm_options);
    case LayerKind::channel_concat:
      return concat_channels(tape, std::vector<Var>(inputs.begin(), inputs.end()));
    case LayerKind::softmax_channels: return softmax_channels(tape, x);
  }
  throw ShapeError("unknown layer kind");
}

}  // namespace vseg
