#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vseg/augmentation.hpp"
#include "vseg/error.hpp"
#include "vseg/inference.hpp"
#include "vseg/layers.hpp"
#include "vseg/losses.hpp"
#include "vseg/network.hpp"
#include "vseg/optimizer.hpp"
#include "vseg/postprocess.hpp"
#include "vseg/seed.hpp"

namespace vseg {

enum class Method { supervised, mean_teacher, pi_model, temporal_ensemble, pseudo_label };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::supervised: return "supervised";
    case Method::mean_teacher: return "mean_teacher";
    case Method::pi_model: return "pi_model";
    case Method::temporal_ensemble: return "temporal_ensemble";
    case Method::pseudo_label: return "pseudo_label";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::supervised, Method::mean_teacher, Method::pi_model, Method::temporal_ensemble,
                   Method::pseudo_label})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown method '" + s + "'");
}

struct Sample {
  std::string id;
  Image image;
  std::optional<Mask> mask;
};

struct LogRow {
  std::size_t iter = 0;
  std::string phase;
  double loss_sup = 0;
  double loss_cons = 0;
  double loss_total = 0;
  std::optional<double> val_dsc;
};

inline std::string log_csv(const std::vector<LogRow>& rows) {
  std::ostringstream os;
  os << "iter,phase,loss_sup,loss_cons,loss_total,val_dsc\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.8g,%.8g,%.8g,", r.iter, r.phase.c_str(), r.loss_sup, r.loss_cons,
                  r.loss_total);
    os << buf;
    if (r.val_dsc) {
      std::snprintf(buf, sizeof buf, "%.6f", *r.val_dsc);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

struct IterationInfo {
  std::size_t iteration = 0;
  std::size_t epoch = 0;
  std::size_t labeled = 0;
  std::size_t unlabeled = 0;
  double lambda2 = 0;
  const ParameterSet<float>* student = nullptr;
  const ParameterSet<float>* teacher = nullptr;
};

struct EpochInfo {
  std::size_t epoch = 0;
  std::string phase;
  double student_dsc = 0;
  std::optional<double> teacher_dsc;
  const std::vector<Mask>* pseudo_labels = nullptr;       // pseudo_label only
  const std::vector<Grid<float>>* ensemble_targets = nullptr;  // temporal_ensemble only
};

struct TrainConfig {
  std::uint64_t seed = 1;
  ModelConfig model;
  std::size_t batch_size = 8;
  double lr_bce = 1e-3;
  double lr_focal = 5e-4;
  double lr_semi = 5e-4;
  double switch_dsc = 0.5;
  std::size_t bce_epochs = 50;
  std::size_t max_epochs = 200;
  std::size_t semi_epochs = 50;
  std::size_t patience = 20;
  double ema_alpha = 0.99;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double gamma = 2.0;
  double focal_alpha = 0.25;
  double rampup_fraction = 0.1;
  bool augment = true;
  std::optional<double> target_dsc;
  OptimizerConfig optimizer;
  PostprocessConfig post;
  std::function<void(const LogRow&)> on_log;
  std::function<void(const IterationInfo&)> on_iteration;
  std::function<void(const EpochInfo&)> on_epoch;

  void validate() const {
    model.validate();
    post.validate();
    if (batch_size < 2) throw ConfigError("train: batch size must be at least 2");
    if (!(lr_bce > 0 && lr_focal > 0 && lr_semi > 0)) throw ConfigError("train: learning rates must be positive");
    if (!(ema_alpha >= 0 && ema_alpha < 1)) throw ConfigError("train: EMA alpha must be in [0, 1)");
    if (rampup_fraction < 0 || rampup_fraction > 1) throw ConfigError("train: ramp-up fraction must be in [0, 1]");
    LossWeights{lambda1, lambda2, 0, 0, gamma, focal_alpha}.validate();
  }
};

/// theta_T <- alpha theta_T + (1 - alpha) theta_S, elementwise.
template <typename T>
void ema_update(Tensor<T>& teacher, const Tensor<T>& student, double alpha) {
  if (!(alpha >= 0 && alpha < 1)) throw ConfigError("ema_update: alpha must be in [0, 1)");
  teacher.require_same_shape(student, "ema_update");
  for (std::size_t i = 0; i < teacher.size(); ++i)
    teacher[i] = static_cast<T>(alpha * static_cast<double>(teacher[i]) + (1 - alpha) * static_cast<double>(student[i]));
}

/// Applies ema_update to every entry, batch-norm running statistics included.
template <typename T>
void ema_update(ParameterSet<T>& teacher, const ParameterSet<T>& student, double alpha) {
  if (teacher.size() != student.size()) throw ShapeError("ema_update: parameter sets differ in size");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].name != student[i].name) throw ShapeError("ema_update: parameter order differs");
    ema_update(teacher[i].value, student[i].value, alpha);
  }
}

struct SupervisedResult {
  SegModel<float> model;
  std::vector<LogRow> log;
  double best_val_dsc = 0;
  std::size_t iterations = 0;
  std::size_t bce_epochs = 0;
  std::size_t focal_epochs = 0;
};

struct SemiResult {
  SegModel<float> student;
  std::optional<SegModel<float>> teacher;  // mean_teacher only
  std::vector<LogRow> log;
  double student_val_dsc = 0;
  std::optional<double> teacher_val_dsc;
  std::size_t parameter_sets = 1;
  std::size_t iterations = 0;
  std::size_t epochs = 0;
};

struct Selection {
  std::string chosen;  // "teacher" or "student"
  double teacher_dsc = 0;
  double student_dsc = 0;
  double score() const { return chosen == "teacher" ? teacher_dsc : student_dsc; }
};

namespace detail {

struct Canonical {
  std::vector<Image> images;
  std::vector<Mask> masks;
};

inline Canonical canonical(const std::vector<Sample>& s, std::size_t size, bool need_masks) {
  Canonical c;
  for (const auto& x : s) {
    c.images.push_back(resize_image(x.image, size));
    if (need_masks) {
      if (!x.mask) throw Error("sample " + x.id + " has no mask");
      c.masks.push_back(resize_mask(*x.mask, size));
    }
  }
  return c;
}

// Stage tags keep the BCE stage and the focal/semi stages on separate streams;
// the focal stage and every semi-supervised method share one.
inline constexpr std::uint64_t kStageBce = 1;
inline constexpr std::uint64_t kStageMain = 2;

enum class SupLoss { bce, focal };

class Engine {
 public:
  Engine(const TrainConfig& cfg, const std::vector<Sample>& labeled, const std::vector<Sample>& unlabeled,
         const std::vector<Sample>& validation)
      : cfg_(cfg), labeled_(labeled), unlabeled_(unlabeled) {
    const std::size_t S = cfg.model.input_size;
    for (const auto& s : labeled)
      if (!s.mask) throw Error("labeled sample " + s.id + " has no mask");
    val_ = canonical(validation.empty() ? labeled : validation, S, true);
  }

  std::vector<LogRow> log;
  std::size_t iteration = 0;

  double validate(SegModel<float>& m) { return mean_dsc(m, val_.images, val_.masks, cfg_.post); }

  void emit(LogRow row) {
    if (cfg_.on_log) cfg_.on_log(row);
    log.push_back(std::move(row));
  }

  void mark_validation(double v) {
    if (!log.empty()) log.back().val_dsc = v;
  }

  struct Targets {
    Method method = Method::supervised;
    SegModel<float>* teacher = nullptr;              // mean_teacher
    const std::vector<Grid<float>>* ensemble = nullptr;  // temporal_ensemble, bias-corrected
    const std::vector<Mask>* pseudo = nullptr;        // pseudo_label
  };

  /// One pass: batches of labeled (and unlabeled) samples, one optimizer step each.
  void run_epoch(SegModel<float>& student, Optimizer<float>& opt, std::uint64_t stage, std::size_t epoch,
                 SupLoss sup_kind, double lr, const std::string& phase, const Targets& tg, std::size_t total_iters) {
    const std::size_t M = labeled_.size(), N = tg.method == Method::supervised ? 0 : unlabeled_.size();
    const std::size_t bl = N == 0 ? cfg_.batch_size : std::max<std::size_t>(1, cfg_.batch_size / 2);
    const std::size_t bu = N == 0 ? 0 : cfg_.batch_size - bl;
    const std::size_t batches = N == 0 ? (M + bl - 1) / bl : (N + bu - 1) / bu;

    std::vector<std::size_t> lorder = shuffled(M, derive_seed(cfg_.seed, {seed_tag::shuffle, stage, epoch, 0}));
    std::vector<std::size_t> uorder = shuffled(N, derive_seed(cfg_.seed, {seed_tag::shuffle, stage, epoch, 1}));
    std::size_t lcursor = 0, reshuffles = 0;

    for (std::size_t b = 0; b < batches; ++b) {
      std::vector<std::size_t> lab, unl;
      const std::size_t nl = N == 0 ? std::min(bl, M - b * bl) : bl;
      for (std::size_t j = 0; j < nl; ++j) {
        if (lcursor == M) {
          lorder = shuffled(M, derive_seed(cfg_.seed, {seed_tag::shuffle, stage, epoch, 2 + ++reshuffles}));
          lcursor = 0;
        }
        lab.push_back(lorder[lcursor++]);
      }
      for (std::size_t j = b * bu; j < std::min(N, (b + 1) * bu); ++j) unl.push_back(uorder[j]);
      step(student, opt, stage, epoch, b, lab, unl, sup_kind, lr, phase, tg, total_iters);
    }
  }

 private:
  static std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(v.begin(), v.end(), rng);
    return v;
  }

  SpatialAug spatial_for(std::mt19937_64& rng) const {
    return cfg_.augment ? sample_spatial(rng, cfg_.model.input_size) : SpatialAug{.size = cfg_.model.input_size};
  }
  IntensityAug intensity_for(std::mt19937_64& rng) const { return cfg_.augment ? sample_intensity(rng) : IntensityAug{}; }

  double lambda2_at(std::size_t total_iters) const {
    if (cfg_.rampup_fraction == 0 || total_iters == 0) return cfg_.lambda2;
    const double ramp = std::max(1.0, cfg_.rampup_fraction * static_cast<double>(total_iters));
    return cfg_.lambda2 * std::min(1.0, static_cast<double>(iteration + 1) / ramp);
  }

  void step(SegModel<float>& student, Optimizer<float>& opt, std::uint64_t stage, std::size_t epoch,
            std::size_t batch, const std::vector<std::size_t>& lab, const std::vector<std::size_t>& unl,
            SupLoss sup_kind, double lr, const std::string& phase, const Targets& tg, std::size_t total_iters) {
    const std::size_t S = cfg_.model.input_size;
    const std::size_t nl = lab.size(), nu = unl.size(), n = nl + nu;
    Tensor<float> x({n, 1, S, S}), y({nl, S, S});
    Tensor<float> teacher_x({std::max<std::size_t>(nu, 1), 1, S, S});
    std::vector<SpatialAug> unl_spatial;

    for (std::size_t j = 0; j < nl; ++j) {
      std::mt19937_64 rng(derive_seed(cfg_.seed, {seed_tag::augment, stage, epoch, batch, 0, j}));
      const Sample& s = labeled_[lab[j]];
      const SpatialAug sa = spatial_for(rng);
      const IntensityAug ia = intensity_for(rng);
      const PairedViews v = make_paired_views(s.image, &*s.mask, sa, ia);
      write_input(x, j, v.student);
      for (std::size_t i = 0; i < S * S; ++i) y[j * S * S + i] = (*v.mask)[i];
    }
    for (std::size_t j = 0; j < nu; ++j) {
      std::mt19937_64 rng(derive_seed(cfg_.seed, {seed_tag::augment, stage, epoch, batch, 1, j}));
      const Sample& s = unlabeled_[unl[j]];
      const SpatialAug sa = spatial_for(rng);
      const IntensityAug ia = intensity_for(rng);
      const PairedViews v = make_paired_views(s.image, nullptr, sa, ia);
      write_input(x, nl + j, v.student);
      write_input(teacher_x, j, v.teacher);
      unl_spatial.push_back(sa);
    }

    // Fixed targets for the unlabeled part, computed before the student tape.
    Tensor<float> soft_target;
    Tensor<float> hard_target;
    if (nu > 0) {
      switch (tg.method) {
        case Method::mean_teacher:
          soft_target = softmax_values(slice_rows(tg.teacher->infer(teacher_x), nu));
          break;
        case Method::pi_model:
          soft_target = softmax_values(slice_rows(student.infer(teacher_x), nu));
          break;
        case Method::temporal_ensemble: {
          soft_target = Tensor<float>({nu, 2, S, S});
          for (std::size_t j = 0; j < nu; ++j) {
            const Image fg = warp_image((*tg.ensemble)[unl[j]], unl_spatial[j]);
            for (std::size_t i = 0; i < S * S; ++i) {
              const float f = std::clamp(fg[i], 0.0f, 1.0f);
              soft_target[(2 * j + 1) * S * S + i] = f;
              soft_target[(2 * j) * S * S + i] = 1.0f - f;
            }
          }
          break;
        }
        case Method::pseudo_label: {
          hard_target = Tensor<float>({nu, S, S});
          for (std::size_t j = 0; j < nu; ++j) {
            const Mask m = warp_mask((*tg.pseudo)[unl[j]], unl_spatial[j]);
            for (std::size_t i = 0; i < S * S; ++i) hard_target[j * S * S + i] = m[i];
          }
          break;
        }
        case Method::supervised: break;
      }
    }

    student.params().zero_grad();
    Tape<float> tape;
    const Var logits = student.forward(tape, tape.input(x, false), {.training = true});
    const Var lab_logits = nu == 0 ? logits : slice_batch(tape, logits, 0, nl);
    const Var sup = sup_kind == SupLoss::bce ? bce_loss(tape, lab_logits, y)
                                             : focal_loss(tape, lab_logits, y, cfg_.gamma, cfg_.focal_alpha);
    std::optional<Var> semi;
    if (nu > 0) {
      const Var ul = slice_batch(tape, logits, nl, n);
      if (tg.method == Method::pseudo_label)
        semi = focal_loss(tape, ul, hard_target, cfg_.gamma, cfg_.focal_alpha);
      else
        semi = consistency_mse(tape, softmax_channels(tape, ul), soft_target);
    }
    const double l2 = nu > 0 ? lambda2_at(total_iters) : 0.0;
    const LossWeights w{cfg_.lambda1, l2, nl, nu, cfg_.gamma, cfg_.focal_alpha};
    const Var total = total_loss(tape, sup, semi, w);
    const double lt = tape.value(total)[0];
    if (!std::isfinite(lt))
      throw TrainingDiverged("training diverged at iteration " + std::to_string(iteration) + " (" + phase +
                             "): loss is not finite");
    tape.backward(total);
    opt.step(student.params(), lr);
    if (tg.method == Method::mean_teacher) ema_update(tg.teacher->params(), student.params(), cfg_.ema_alpha);

    emit({iteration, phase, tape.value(sup)[0], semi ? tape.value(*semi)[0] : 0.0, lt, std::nullopt});
    if (cfg_.on_iteration)
      cfg_.on_iteration({iteration, epoch, nl, nu, l2, &student.params(),
                         tg.method == Method::mean_teacher ? &tg.teacher->params() : nullptr});
    ++iteration;
  }

  static Tensor<float> slice_rows(const Tensor<float>& t, std::size_t n) {
    if (t.n() == n) return t;
    Tensor<float> out({n, t.c(), t.h(), t.w()});
    std::copy_n(t.data(), out.size(), out.data());
    return out;
  }

  const TrainConfig& cfg_;
  const std::vector<Sample>& labeled_;
  const std::vector<Sample>& unlabeled_;
  Canonical val_;
};

inline std::size_t batches_per_epoch(const TrainConfig& cfg, std::size_t M, std::size_t N) {
  if (N == 0) return (M + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t bu = cfg.batch_size - std::max<std::size_t>(1, cfg.batch_size / 2);
  return (N + bu - 1) / bu;
}

}  // namespace detail

/// BCE stage at lr_bce until validation DSC reaches switch_dsc or bce_epochs
/// pass, then focal stage at lr_focal with early stopping. An empty validation
/// set validates on the training set. Returns the best focal-stage model.
inline SupervisedResult train_supervised(const std::vector<Sample>& labeled, const std::vector<Sample>& validation,
                                         const TrainConfig& cfg, std::optional<SegModel<float>> init = std::nullopt) {
  cfg.validate();
  if (labeled.empty()) throw Error("train_supervised: no labeled images");
  SegModel<float> model = init ? std::move(*init) : SegModel<float>(cfg.model, derive_seed(cfg.seed, {seed_tag::init}));
  if (!(model.config() == cfg.model)) throw ConfigError("train_supervised: initial model config differs");
  static const std::vector<Sample> none;
  detail::Engine eng(cfg, labeled, none, validation);
  const detail::Engine::Targets sup{};
  SupervisedResult res{model, {}, 0, 0, 0, 0};

  Optimizer<float> opt(cfg.optimizer);
  for (std::size_t e = 0; e < cfg.bce_epochs; ++e) {
    eng.run_epoch(model, opt, detail::kStageBce, e, detail::SupLoss::bce, cfg.lr_bce, "bce", sup, 0);
    const double v = eng.validate(model);
    eng.mark_validation(v);
    ++res.bce_epochs;
    if (cfg.on_epoch) cfg.on_epoch({e, "bce", v, std::nullopt, nullptr, nullptr});
    if (v >= cfg.switch_dsc) break;
  }

  opt = Optimizer<float>(cfg.optimizer);
  double best = eng.validate(model);
  SegModel<float> best_model = model;
  std::size_t stale = 0;
  for (std::size_t e = 0; e < cfg.max_epochs; ++e) {
    if (cfg.target_dsc && best >= *cfg.target_dsc) break;
    eng.run_epoch(model, opt, detail::kStageMain, e, detail::SupLoss::focal, cfg.lr_focal, "focal", sup, 0);
    const double v = eng.validate(model);
    eng.mark_validation(v);
    ++res.focal_epochs;
    if (cfg.on_epoch) cfg.on_epoch({e, "focal", v, std::nullopt, nullptr, nullptr});
    if (v > best) {
      best = v;
      best_model = model;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  res.model = std::move(best_model);
  res.best_val_dsc = best;
  res.log = std::move(eng.log);
  res.iterations = eng.iteration;
  return res;
}

/// Semi-supervised fine-tuning from a converged supervised model.
inline SemiResult train_semi(const std::vector<Sample>& labeled, const std::vector<Sample>& unlabeled,
                             const std::vector<Sample>& validation, Method method, const SegModel<float>& init,
                             const TrainConfig& cfg) {
  cfg.validate();
  if (method == Method::supervised) throw ConfigError("train_semi: method must be semi-supervised");
  if (labeled.empty()) throw Error("train_semi: no labeled images");
  if (unlabeled.empty() && method != Method::mean_teacher) throw Error("train_semi: no unlabeled images");
  if (!(init.config() == cfg.model)) throw ConfigError("train_semi: initial model config differs from the config");

  const std::size_t S = cfg.model.input_size;
  SegModel<float> student = init;
  std::optional<SegModel<float>> teacher;
  if (method == Method::mean_teacher) teacher = init;

  detail::Engine eng(cfg, labeled, unlabeled, validation);
  const std::size_t N = unlabeled.size();
  const std::size_t total_iters = cfg.semi_epochs * detail::batches_per_epoch(cfg, labeled.size(), N);

  // Method buffers.
  std::vector<Image> unl_canonical;
  if (method == Method::temporal_ensemble || method == Method::pseudo_label)
    for (const auto& s : unlabeled) unl_canonical.push_back(resize_image(s.image, S));
  std::vector<Mask> pseudo;
  std::vector<Grid<float>> accum, ens_targets;
  std::size_t ens_updates = 0;
  auto update_ensemble = [&] {
    const auto probs = predict_probabilities(student, unl_canonical);
    if (accum.empty()) accum.assign(probs.size(), Grid<float>(S, S));
    for (std::size_t i = 0; i < probs.size(); ++i)
      for (std::size_t k = 0; k < probs[i].size(); ++k)
        accum[i][k] = static_cast<float>(cfg.ema_alpha * accum[i][k] + (1 - cfg.ema_alpha) * probs[i][k]);
    ++ens_updates;
    const double correction = 1.0 / (1.0 - std::pow(cfg.ema_alpha, static_cast<double>(ens_updates)));
    ens_targets = accum;
    for (auto& g : ens_targets)
      for (auto& v : g.data) v = static_cast<float>(std::min(1.0, v * correction));
  };
  if (method == Method::pseudo_label)
    for (const auto& m : predict_masks(student, unl_canonical, cfg.post)) pseudo.push_back(m.mask);
  if (method == Method::temporal_ensemble) update_ensemble();

  detail::Engine::Targets tg{method, teacher ? &*teacher : nullptr, &ens_targets, &pseudo};
  Optimizer<float> opt(cfg.optimizer);

  SemiResult res{student, teacher, {}, 0, std::nullopt, method == Method::mean_teacher ? 2u : 1u, 0, 0};
  auto score = [&](double s, std::optional<double> t) { return t ? std::max(s, *t) : s; };
  res.student_val_dsc = eng.validate(student);
  if (teacher) res.teacher_val_dsc = eng.validate(*teacher);
  double best = score(res.student_val_dsc, res.teacher_val_dsc);
  std::size_t stale = 0;
  const std::string phase = to_string(method);

  for (std::size_t e = 0; e < cfg.semi_epochs; ++e) {
    eng.run_epoch(student, opt, detail::kStageMain, e, detail::SupLoss::focal, cfg.lr_semi, phase, tg, total_iters);
    if (method == Method::temporal_ensemble) update_ensemble();
    const double vs = eng.validate(student);
    std::optional<double> vt;
    if (teacher) vt = eng.validate(*teacher);
    eng.mark_validation(score(vs, vt));
    ++res.epochs;
    if (cfg.on_epoch)
      cfg.on_epoch({e, phase, vs, vt, method == Method::pseudo_label ? &pseudo : nullptr,
                    method == Method::temporal_ensemble ? &ens_targets : nullptr});
    if (score(vs, vt) > best) {
      best = score(vs, vt);
      res.student = student;
      if (teacher) res.teacher = *teacher;
      res.student_val_dsc = vs;
      res.teacher_val_dsc = vt;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  res.log = std::move(eng.log);
  res.iterations = eng.iteration;
  return res;
}

/// Picks the model with the higher mean validation DSC; ties go to the student.
inline Selection select_inference_model(SegModel<float>& teacher, SegModel<float>& student,
                                        const std::vector<Sample>& validation, const PostprocessConfig& post = {}) {
  if (validation.empty()) throw Error("select_inference_model: empty validation set");
  const auto c = detail::canonical(validation, student.config().input_size, true);
  Selection s;
  s.teacher_dsc = mean_dsc(teacher, c.images, c.masks, post);
  s.student_dsc = mean_dsc(student, c.images, c.masks, post);
  s.chosen = s.teacher_dsc > s.student_dsc ? "teacher" : "student";
  return s;
}

}  // namespace vseg
