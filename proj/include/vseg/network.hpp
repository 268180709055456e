#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vseg/autodiff.hpp"
#include "vseg/error.hpp"
#include "vseg/layers.hpp"
#include "vseg/tensor.hpp"

namespace vseg {

/// Hyper-parameters of the ResNeXt-Unet. With the defaults the stage widths are
/// 64 / 256 / 512 on the encoder and 256 / 128 / 64 on the decoder; `base_width`
/// scales every width proportionally.
struct ModelConfig {
  std::size_t input_size = 64;
  std::size_t input_channels = 1;
  std::size_t output_channels = 2;
  std::size_t base_width = 64;
  std::size_t cardinality = 32;
  std::size_t blocks_per_stage = 3;
  bool batchnorm = true;

  void validate() const {
    if (base_width == 0 || cardinality == 0 || blocks_per_stage == 0 || input_channels == 0 ||
        output_channels == 0)
      throw ConfigError("model config: widths, cardinality and block count must be positive");
    if ((2 * base_width) % cardinality != 0 || (4 * base_width) % cardinality != 0)
      throw ConfigError("model config: cardinality " + std::to_string(cardinality) +
                        " must divide the bottleneck widths " + std::to_string(2 * base_width) + " and " +
                        std::to_string(4 * base_width));
    if (input_size < 16 || input_size % 8 != 0)
      throw ConfigError("model config: input size must be a multiple of 8 and at least 16");
  }

  std::string canonical() const {
    std::ostringstream os;
    os << "resnext-unet;in=" << input_channels << ';' << "size=" << input_size << ';'
       << "out=" << output_channels << ';' << "width=" << base_width << ';' << "card=" << cardinality << ';'
       << "blocks=" << blocks_per_stage << ';' << "bn=" << (batchnorm ? 1 : 0);
    return os.str();
  }

  // FNV-1a of the canonical description.
  std::uint64_t digest() const {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : canonical()) {
      h ^= ch;
      h *= 1099511628211ull;
    }
    return h;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct StageInfo {
  std::string name;
  Shape output;
  std::size_t parameters = 0;
};

struct ForwardOptions {
  bool training = false;
  std::vector<StageInfo>* stages = nullptr;
};

template <typename T>
class SegModel {
 public:
  SegModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    build(rng);
  }

  const ModelConfig& config() const noexcept { return config_; }
  ParameterSet<T>& params() noexcept { return params_; }
  const ParameterSet<T>& params() const noexcept { return params_; }

  std::size_t parameter_count() const { return params_.trainable_count(); }

  /// Stage list with output shapes for a single image, walked from the layer specs.
  std::vector<StageInfo> stages() const {
    const std::size_t s = config_.input_size;
    const Shape in{1, config_.input_channels, s, s};
    std::vector<StageInfo> out;
    Shape c1 = conv1_.spec.output_shape(in);
    out.push_back({"conv1", c1, unit_count(conv1_)});
    Shape h = pool_.output_shape(c1);
    std::size_t n = 0;
    for (const auto& b : stage2_) {
      h = block_output(b, h);
      n += block_count(b);
    }
    const Shape c2 = h;
    out.push_back({"conv2", c2, n});
    n = 0;
    for (const auto& b : stage3_) {
      h = block_output(b, h);
      n += block_count(b);
    }
    out.push_back({"conv3", h, n});
    auto decoder = [&](const char* dname, const Unit& up, const char* cname, const Unit& fuse,
                       const char* rname, const Unit& refine, const Shape& skip) {
      h = up.spec.output_shape(h);
      out.push_back({dname, h, unit_count(up)});
      Shape cat{h[0], h[1] + skip[1], h[2], h[3]};
      h = fuse.spec.output_shape(cat);
      out.push_back({cname, h, unit_count(fuse)});
      h = refine.spec.output_shape(h);
      out.push_back({rname, h, unit_count(refine)});
    };
    decoder("deconv4", deconv4_, "conv5", conv5_, "conv6", conv6_, c2);
    decoder("deconv7", deconv7_, "conv8", conv8_, "conv9", conv9_, c1);
    decoder("deconv10", deconv10_, "conv11", conv11_, "conv12", conv12_, in);
    h = conv13_.spec.output_shape(h);
    out.push_back({"conv13", h, unit_count(conv13_)});
    return out;
  }

  /// Logits (B, output_channels, H, W) for a (B, input_channels, H, W) input.
  Var forward(Tape<T>& tape, Var x, ForwardOptions opt = {}) {
    const Tensor<T>& X = tape.value(x);
    const std::size_t s = config_.input_size;
    if (X.rank() != 4 || X.c() != config_.input_channels || X.h() != s || X.w() != s || X.n() == 0)
      throw ShapeError("forward: expected input Bx" + std::to_string(config_.input_channels) + "x" +
                       std::to_string(s) + "x" + std::to_string(s) + ", got " + shape_string(X.shape()));
    auto note = [&](const char* name, Var v) {
      if (opt.stages) opt.stages->push_back({name, tape.value(v).shape(), 0});
    };
    const Var c1 = relu(tape, apply(tape, conv1_, x, opt.training));
    note("conv1", c1);
    Var h = maxpool2d(tape, pool_, c1);
    for (const auto& b : stage2_) h = run_block(tape, b, h, opt.training);
    const Var c2 = h;
    note("conv2", c2);
    for (const auto& b : stage3_) h = run_block(tape, b, h, opt.training);
    note("conv3", h);

    auto decoder = [&](const char* dname, const Unit& up, const char* cname, const Unit& fuse,
                       const char* rname, const Unit& refine, Var skip) {
      h = relu(tape, apply(tape, up, h, opt.training));
      note(dname, h);
      const Var cat = concat_channels(tape, {h, skip});
      h = relu(tape, apply(tape, fuse, cat, opt.training));
      note(cname, h);
      h = relu(tape, apply(tape, refine, h, opt.training));
      note(rname, h);
    };
    decoder("deconv4", deconv4_, "conv5", conv5_, "conv6", conv6_, c2);
    decoder("deconv7", deconv7_, "conv8", conv8_, "conv9", conv9_, c1);
    decoder("deconv10", deconv10_, "conv11", conv11_, "conv12", conv12_, x);
    h = apply(tape, conv13_, h, opt.training);
    note("conv13", h);
    return h;
  }

  /// Inference-mode logits without gradient tracking.
  Tensor<T> infer(const Tensor<T>& batch) {
    Tape<T> tape(false);
    const Var out = forward(tape, tape.input(batch, false), {.training = false});
    return tape.value(out);
  }

  template <typename U>
  SegModel<U> cast() const {
    SegModel<U> out(config_, 0);
    for (std::size_t i = 0; i < params_.size(); ++i)
      out.params()[i].value = params_[i].value.template cast<U>();
    return out;
  }

 private:
  struct Norm {
    std::size_t gamma, beta, mean, var;
  };
  struct Unit {
    LayerSpec spec;
    std::size_t weight = 0;
    std::optional<std::size_t> bias;
    std::optional<Norm> norm;
  };
  struct Block {
    Unit reduce, group, expand;
    std::optional<Unit> shortcut;
  };

  Unit make_unit(std::mt19937_64& rng, const std::string& name, LayerSpec spec, bool with_norm) {
    spec.validate();
    if (with_norm) spec.bias = false;
    Unit u{spec, 0, std::nullopt, std::nullopt};
    const Shape ws = spec.weight_shape();
    double fan_in = static_cast<double>(spec.in_channels / spec.groups * spec.kernel_h * spec.kernel_w);
    if (spec.kind == LayerKind::conv_transpose2d) fan_in /= static_cast<double>(spec.stride * spec.stride);
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
    Tensor<T> w(ws);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(normal(rng));
    u.weight = index_of(params_.add(name + ".weight", std::move(w)));
    if (spec.bias) u.bias = index_of(params_.add(name + ".bias", Tensor<T>({spec.out_channels})));
    if (with_norm) {
      const std::size_t c = spec.out_channels;
      Norm n{};
      n.gamma = index_of(params_.add(name + ".bn.gamma", Tensor<T>({c}, T(1))));
      n.beta = index_of(params_.add(name + ".bn.beta", Tensor<T>({c})));
      n.mean = index_of(params_.add(name + ".bn.running_mean", Tensor<T>({c}), false));
      n.var = index_of(params_.add(name + ".bn.running_var", Tensor<T>({c}, T(1)), false));
      u.norm = n;
    }
    return u;
  }

  // Index of the entry just added.
  std::size_t index_of(const Parameter<T>&) const { return params_.size() - 1; }

  Block make_block(std::mt19937_64& rng, const std::string& name, std::size_t in, std::size_t mid,
                   std::size_t out, std::size_t stride) {
    const bool bn = config_.batchnorm;
    Block b;
    b.reduce = make_unit(rng, name + ".reduce", LayerSpec::conv(in, mid, 1), bn);
    b.group = make_unit(rng, name + ".group", LayerSpec::conv(mid, mid, 3, stride, config_.cardinality), bn);
    b.expand = make_unit(rng, name + ".expand", LayerSpec::conv(mid, out, 1), bn);
    if (in != out || stride != 1)
      b.shortcut = make_unit(rng, name + ".shortcut",
                             LayerSpec{LayerKind::conv2d, 1, 1, stride, 0, in, out, 1, true}, bn);
    return b;
  }

  void build(std::mt19937_64& rng) {
    const std::size_t w = config_.base_width;
    conv1_ = make_unit(rng, "conv1", LayerSpec::conv(config_.input_channels, w, 3, 2), false);
    pool_ = LayerSpec::maxpool(3, 2, 1);
    for (std::size_t i = 0; i < config_.blocks_per_stage; ++i)
      stage2_.push_back(make_block(rng, "conv2.block" + std::to_string(i), i == 0 ? w : 4 * w, 2 * w, 4 * w, 1));
    for (std::size_t i = 0; i < config_.blocks_per_stage; ++i)
      stage3_.push_back(make_block(rng, "conv3.block" + std::to_string(i), i == 0 ? 4 * w : 8 * w, 4 * w, 8 * w,
                                      i == 0 ? 2 : 1));
    deconv4_ = make_unit(rng, "deconv4", LayerSpec::deconv(8 * w, 4 * w, 3, 2), false);
    conv5_ = make_unit(rng, "conv5", LayerSpec::conv(8 * w, 4 * w, 3), false);
    conv6_ = make_unit(rng, "conv6", LayerSpec::conv(4 * w, 4 * w, 3), false);
    deconv7_ = make_unit(rng, "deconv7", LayerSpec::deconv(4 * w, 2 * w, 3, 2), false);
    conv8_ = make_unit(rng, "conv8", LayerSpec::conv(3 * w, 2 * w, 3), false);
    conv9_ = make_unit(rng, "conv9", LayerSpec::conv(2 * w, 2 * w, 3), false);
    deconv10_ = make_unit(rng, "deconv10", LayerSpec::deconv(2 * w, w, 3, 2), false);
    conv11_ = make_unit(rng, "conv11", LayerSpec::conv(w + config_.input_channels, w, 3), false);
    conv12_ = make_unit(rng, "conv12", LayerSpec::conv(w, w, 3), false);
    conv13_ = make_unit(rng, "conv13", LayerSpec::conv(w, config_.output_channels, 3), false);
  }

  Var apply(Tape<T>& tape, const Unit& u, Var x, bool training) {
    const Var w = tape.parameter(params_[u.weight]);
    std::optional<Var> b;
    if (u.bias) b = tape.parameter(params_[*u.bias]);
    Var y = u.spec.kind == LayerKind::conv2d ? conv2d(tape, u.spec, x, w, b)
                                             : conv_transpose2d(tape, u.spec, x, w, b);
    if (u.norm) {
      BatchNormState<T> st{tape.parameter(params_[u.norm->gamma]), tape.parameter(params_[u.norm->beta]),
                           &params_[u.norm->mean], &params_[u.norm->var]};
      y = batchnorm2d(tape, y, st, BatchNormOptions{.training = training});
    }
    return y;
  }

  // relu(expand(relu(group(relu(reduce(x))))) + shortcut(x))
  Var run_block(Tape<T>& tape, const Block& b, Var x, bool training) {
    Var h = relu(tape, apply(tape, b.reduce, x, training));
    h = relu(tape, apply(tape, b.group, h, training));
    h = apply(tape, b.expand, h, training);
    const Var sc = b.shortcut ? apply(tape, *b.shortcut, x, training) : x;
    return relu(tape, add(tape, h, sc));
  }

  Shape block_output(const Block& b, const Shape& in) const {
    Shape h = b.group.spec.output_shape(b.reduce.spec.output_shape(in));
    return b.expand.spec.output_shape(h);
  }

  std::size_t unit_count(const Unit& u) const {
    std::size_t n = params_[u.weight].value.size();
    if (u.bias) n += params_[*u.bias].value.size();
    if (u.norm) n += params_[u.norm->gamma].value.size() + params_[u.norm->beta].value.size();
    return n;
  }

  std::size_t block_count(const Block& b) const {
    return unit_count(b.reduce) + unit_count(b.group) + unit_count(b.expand) +
           (b.shortcut ? unit_count(*b.shortcut) : 0);
  }

  ModelConfig config_;
  ParameterSet<T> params_;
  Unit conv1_;
  LayerSpec pool_;
  std::vector<Block> stage2_, stage3_;
  Unit deconv4_, conv5_, conv6_, deconv7_, conv8_, conv9_, deconv10_, conv11_, conv12_, conv13_;
};

template <typename T = float>
SegModel<T> build_model(std::uint64_t seed, const ModelConfig& config = {}) {
  return SegModel<T>(config, seed);
}

/// Per-stage table: name, output shape (single image), parameter count.
template <typename T>
std::string parameter_summary(const SegModel<T>& model) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "stage" << std::setw(16) << "output" << "parameters\n";
  std::size_t total = 0;
  for (const auto& s : model.stages()) {
    const Shape chw(s.output.begin() + 1, s.output.end());
    os << std::setw(10) << s.name << std::setw(16) << shape_string(chw) << s.parameters << '\n';
    total += s.parameters;
  }
  os << std::setw(26) << "total" << total << '\n';
  return os.str();
}

}  // namespace vseg
