#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "vseg/dataset.hpp"
#include "vseg/inference.hpp"
#include "vseg/metrics.hpp"
#include "vseg/pgm.hpp"
#include "vseg/seed.hpp"
#include "vseg/trainer.hpp"

namespace vseg {

/// Assigns shuffled subjects round-robin to folds. Returns one subject list per fold.
inline std::vector<std::vector<std::string>> partition_subjects(std::vector<std::string> subjects, std::size_t folds,
                                                                std::uint64_t seed) {
  if (folds < 2) throw ConfigError("cross-validation needs at least 2 folds");
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
  if (subjects.size() < folds)
    throw ConfigError("cross-validation: " + std::to_string(subjects.size()) + " subjects for " +
                      std::to_string(folds) + " folds");
  std::mt19937_64 rng(derive_seed(seed, {seed_tag::folds}));
  std::shuffle(subjects.begin(), subjects.end(), rng);
  std::vector<std::vector<std::string>> out(folds);
  for (std::size_t i = 0; i < subjects.size(); ++i) out[i % folds].push_back(subjects[i]);
  for (auto& f : out) std::sort(f.begin(), f.end());
  return out;
}

inline Sample to_sample(const DatasetEntry& e, bool with_mask) {
  return {e.id(), e.image, with_mask ? std::optional<Mask>(*e.ground_truth()) : std::nullopt};
}

struct TrainingSplit {
  std::vector<Sample> labeled;
  std::vector<Sample> unlabeled;
  std::vector<Sample> validation;
};

/// Training data from a set of entries. Entries tagged validation form the
/// validation set; without any, a seeded fraction of the labeled entries is held out.
inline TrainingSplit make_training_split(const std::vector<const DatasetEntry*>& entries, double validation_fraction,
                                         std::uint64_t seed) {
  if (validation_fraction < 0 || validation_fraction >= 1)
    throw ConfigError("validation fraction must be in [0, 1)");
  TrainingSplit t;
  std::vector<const DatasetEntry*> labeled;
  for (const auto* e : entries) {
    switch (e->split) {
      case Split::labeled: labeled.push_back(e); break;
      case Split::unlabeled: t.unlabeled.push_back(to_sample(*e, false)); break;
      case Split::validation: t.validation.push_back(to_sample(*e, true)); break;
      case Split::test: break;
    }
  }
  if (labeled.empty()) throw Error("training split has no labeled images");
  std::vector<bool> held(labeled.size(), false);
  if (t.validation.empty() && validation_fraction > 0 && labeled.size() > 1) {
    const std::size_t n = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(validation_fraction * static_cast<double>(labeled.size()))), 1,
        labeled.size() - 1);
    std::vector<std::size_t> idx(labeled.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < n; ++i) held[idx[i]] = true;
  }
  for (std::size_t i = 0; i < labeled.size(); ++i)
    (held[i] ? t.validation : t.labeled).push_back(to_sample(*labeled[i], true));
  return t;
}

using PredictionHook = std::function<void(const std::string& experiment, std::size_t fold, const DatasetEntry& entry,
                                          const Image& input, const VeinMask& prediction)>;

/// Scores a model on entries with ground truth, at the model's input size.
inline std::vector<ImageResult> evaluate(SegModel<float>& model, const std::vector<const DatasetEntry*>& entries,
                                         const PostprocessConfig& post = {}, const std::string& experiment = "",
                                         std::size_t fold = 0, const PredictionHook& hook = {}) {
  const std::size_t S = model.config().input_size;
  std::vector<Image> images;
  for (const auto* e : entries) images.push_back(resize_image(e->image, S));
  const auto preds = predict_masks(model, images, post);
  std::vector<ImageResult> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Mask* gt = entries[i]->ground_truth();
    if (!gt) throw Error("evaluate: image " + entries[i]->id() + " has no ground truth");
    const Mask g = resize_mask(*gt, S);
    out.push_back({entries[i]->id(), dsc(preds[i].mask, g), centroid_error(preds[i], g), preds[i].failed});
    if (hook) hook(experiment, fold, *entries[i], images[i], preds[i]);
  }
  return out;
}

struct CrossValConfig {
  std::size_t folds = 5;
  double validation_fraction = 0.15;
  std::uint64_t seed = 1;
  std::vector<Method> methods{Method::mean_teacher};
  TrainConfig train;
  std::function<void(const std::string&)> on_progress;
  PredictionHook on_prediction;
};

struct Experiment {
  std::string name;
  std::vector<FoldReport> folds;
};

/// Subject-level k-fold cross-validation. Each fold trains the supervised model
/// once; every semi-supervised method is fine-tuned from it. Experiments come
/// back with supervised first, then the methods in the given order.
inline std::vector<Experiment> cross_validate(const Dataset& data, const CrossValConfig& cfg) {
  cfg.train.validate();
  const auto parts = partition_subjects(subjects_of(data), cfg.folds, cfg.seed);
  std::vector<Method> methods{Method::supervised};
  for (Method m : cfg.methods)
    if (std::find(methods.begin(), methods.end(), m) == methods.end()) methods.push_back(m);
  std::vector<Experiment> out;
  for (Method m : methods) out.push_back({to_string(m), {}});

  auto say = [&](const std::string& s) {
    if (cfg.on_progress) cfg.on_progress(s);
  };
  for (std::size_t f = 0; f < cfg.folds; ++f) {
    const auto& test_subjects = parts[f];
    std::vector<const DatasetEntry*> train, test;
    for (const auto& e : data) {
      const bool is_test = std::find(test_subjects.begin(), test_subjects.end(), e.subject) != test_subjects.end();
      (is_test ? test : train).push_back(&e);
    }
    test.erase(std::remove_if(test.begin(), test.end(), [](const DatasetEntry* e) { return !e->ground_truth(); }),
               test.end());
    if (test.empty()) throw Error("fold " + std::to_string(f) + " has no test images with ground truth");
    const std::uint64_t fold_seed = derive_seed(cfg.seed, {seed_tag::fold_run, f});
    const TrainingSplit split =
        make_training_split(train, cfg.validation_fraction, derive_seed(fold_seed, {seed_tag::split}));
    TrainConfig tc = cfg.train;
    tc.seed = fold_seed;

    say("fold " + std::to_string(f) + ": supervised");
    SupervisedResult sup = train_supervised(split.labeled, split.validation, tc);
    out[0].folds.push_back({f, evaluate(sup.model, test, tc.post, out[0].name, f, cfg.on_prediction)});

    for (std::size_t k = 1; k < methods.size(); ++k) {
      say("fold " + std::to_string(f) + ": " + out[k].name);
      SemiResult r = train_semi(split.labeled, split.unlabeled, split.validation, methods[k], sup.model, tc);
      SegModel<float>* chosen = &r.student;
      if (r.teacher) {
        const Selection s = select_inference_model(*r.teacher, r.student, split.validation, tc.post);
        if (s.chosen == "teacher") chosen = &*r.teacher;
      }
      out[k].folds.push_back({f, evaluate(*chosen, test, tc.post, out[k].name, f, cfg.on_prediction)});
    }
  }
  return out;
}

namespace detail {

inline std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

inline std::string results_csv(const std::vector<Experiment>& experiments) {
  std::string s = "experiment,fold,image_id,dsc,centroid_error,failed\n";
  for (const auto& e : experiments)
    for (const auto& f : e.folds)
      for (const auto& r : f.images)
        s += e.name + "," + std::to_string(f.fold) + "," + r.image_id + "," + detail::fmt6(r.dsc) + "," +
             detail::fmt6(r.centroid_error) + "," + (r.failed ? "1" : "0") + "\n";
  return s;
}

inline std::string summary_csv(const std::vector<Experiment>& experiments) {
  std::string s = "experiment,fold,dsc_mean,dsc_std,cent_mean,cent_std,failure_rate\n";
  for (const auto& e : experiments)
    for (const auto& row : summarize(e.folds))
      s += e.name + "," + row.fold + "," + detail::fmt6(row.dsc.mean) + "," + detail::fmt6(row.dsc.std) + "," +
           detail::fmt6(row.centroid.mean) + "," + detail::fmt6(row.centroid.std) + "," +
           detail::fmt6(row.failure_rate) + "\n";
  return s;
}

inline void write_results_csv(const fs::path& path, const std::vector<Experiment>& e) {
  write_file_atomic(path, results_csv(e));
}
inline void write_summary_csv(const fs::path& path, const std::vector<Experiment>& e) {
  write_file_atomic(path, summary_csv(e));
}

}  // namespace vseg
