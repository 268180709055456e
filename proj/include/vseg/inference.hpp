#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "vseg/augmentation.hpp"
#include "vseg/image.hpp"
#include "vseg/layers.hpp"
#include "vseg/metrics.hpp"
#include "vseg/network.hpp"
#include "vseg/postprocess.hpp"

namespace vseg {

/// Copies a size x size image into batch slot b, scaled to [0, 1].
inline void write_input(Tensor<float>& batch, std::size_t b, const Image& img) {
  const std::size_t plane = batch.h() * batch.w();
  if (img.size() != plane) throw ShapeError("write_input: image size does not match the batch");
  float* dst = batch.data() + b * plane;
  for (std::size_t i = 0; i < plane; ++i) dst[i] = img[i] / 255.0f;
}

/// Foreground probability (softmax channel 1) of one batch slot.
inline Grid<float> foreground_map(const Tensor<float>& probs, std::size_t b) {
  const std::size_t H = probs.h(), W = probs.w(), C = probs.c();
  Grid<float> g(W, H);
  std::copy_n(probs.data() + (b * C + 1) * H * W, H * W, g.data.data());
  return g;
}

inline Tensor<float> softmax_values(const Tensor<float>& logits) {
  Tape<float> tape(false);
  return tape.value(softmax_channels(tape, tape.input(logits, false)));
}

/// Foreground probability maps for images already at the model's input size.
inline std::vector<Grid<float>> predict_probabilities(SegModel<float>& model, const std::vector<Image>& images,
                                                      std::size_t batch_size = 16) {
  const std::size_t S = model.config().input_size;
  std::vector<Grid<float>> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, images.size() - start);
    Tensor<float> x({n, 1, S, S});
    for (std::size_t b = 0; b < n; ++b) write_input(x, b, images[start + b]);
    const Tensor<float> p = softmax_values(model.infer(x));
    for (std::size_t b = 0; b < n; ++b) out.push_back(foreground_map(p, b));
  }
  return out;
}

inline std::vector<VeinMask> predict_masks(SegModel<float>& model, const std::vector<Image>& images,
                                           const PostprocessConfig& post = {}) {
  std::vector<VeinMask> out;
  for (const auto& p : predict_probabilities(model, images)) out.push_back(postprocess_mask(p, post));
  return out;
}

/// Mean DSC of post-processed predictions against the given masks.
inline double mean_dsc(SegModel<float>& model, const std::vector<Image>& images, const std::vector<Mask>& masks,
                       const PostprocessConfig& post = {}) {
  if (images.empty()) throw Error("mean_dsc: empty image list");
  if (images.size() != masks.size()) throw ShapeError("mean_dsc: image and mask counts differ");
  const auto pred = predict_masks(model, images, post);
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += dsc(pred[i].mask, masks[i]);
  return s / static_cast<double>(pred.size());
}

/// Input image with the prediction boundary drawn at 255.
inline Image overlay_boundary(const Image& img, const Mask& pred) {
  Image out = img;
  const auto se = morph::disk(1);
  const Mask inner = morph::erode(pred, se);
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] && !inner[i]) out[i] = 255;
  return out;
}

}  // namespace vseg
