#include <gtest/gtest.h>

#include <cmath>

#include "vseg/dataset.hpp"
#include "vseg/trainer.hpp"

using namespace vseg;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.base_width = 4;
  c.cardinality = 2;
  c.blocks_per_stage = 1;
  c.input_size = 16;
  return c;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.model = tiny_model();
  c.seed = 3;
  c.bce_epochs = 1;
  c.max_epochs = 2;
  c.semi_epochs = 2;
  c.patience = 100;
  return c;
}

struct Split3 {
  std::vector<Sample> labeled, unlabeled, validation;
};

Split3 tiny_data(std::size_t labeled, std::size_t unlabeled) {
  const Dataset d = generate_phantom_dataset(
      {.subjects = 1, .images_per_subject = labeled + unlabeled + 2, .labeled_per_subject = labeled, .image_size = 70, .seed = 9});
  Split3 s;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& e = d[i];
    if (i < labeled)
      s.labeled.push_back({e.id(), e.image, e.mask});
    else if (i < labeled + unlabeled)
      s.unlabeled.push_back({e.id(), e.image, std::nullopt});
    else
      s.validation.push_back({e.id(), e.image, e.eval_mask});
  }
  return s;
}

std::vector<float> vec(const Tensor<float>& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(Ema, Examples) {
  Tensor<float> t({1}), s({1});
  t[0] = 1, s[0] = 0;
  ema_update(t, s, 0.99);
  EXPECT_FLOAT_EQ(t[0], 0.99f);
  t[0] = 7, s[0] = 3;
  ema_update(t, s, 0.0);
  EXPECT_EQ(t[0], 3.0f);
  t[0] = 0;
  const float expected[] = {0.5f, 1.25f, 2.125f};
  for (int k = 0; k < 3; ++k) {
    s[0] = static_cast<float>(k + 1);
    ema_update(t, s, 0.5);
    EXPECT_FLOAT_EQ(t[0], expected[k]);
  }
  EXPECT_THROW(ema_update(t, s, 1.0), ConfigError);
  Tensor<float> other({2});
  EXPECT_THROW(ema_update(t, other, 0.5), ShapeError);
}

TEST(Ema, ContractsTowardsStudent) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(-5, 5);
  for (double alpha : {0.0, 0.3, 0.9, 0.99}) {
    Tensor<float> t({50}), s({50});
    for (std::size_t i = 0; i < 50; ++i) t[i] = u(rng), s[i] = u(rng);
    const Tensor<float> before = t;
    ema_update(t, s, alpha);
    for (std::size_t i = 0; i < 50; ++i)
      EXPECT_NEAR(std::abs(t[i] - s[i]), alpha * std::abs(before[i] - s[i]), 1e-5);
  }
}

TEST(MeanTeacher, TeacherFollowsRecurrenceAndGetsNoGradient) {
  const auto data = tiny_data(4, 12);
  TrainConfig cfg = tiny_config();
  cfg.semi_epochs = 1;
  cfg.ema_alpha = 0.9;
  const SegModel<float> init(cfg.model, 5);
  std::vector<std::vector<std::vector<float>>> students, teachers;
  cfg.on_iteration = [&](const IterationInfo& info) {
    if (students.size() >= 3) return;
    std::vector<std::vector<float>> sv, tv;
    for (std::size_t i = 0; i < info.student->size(); ++i) {
      sv.push_back(vec((*info.student)[i].value));
      tv.push_back(vec((*info.teacher)[i].value));
      for (float g : (*info.teacher)[i].grad.values()) ASSERT_EQ(g, 0.0f);
    }
    students.push_back(sv);
    teachers.push_back(tv);
  };
  train_semi(data.labeled, data.unlabeled, data.validation, Method::mean_teacher, init, cfg);
  ASSERT_EQ(students.size(), 3u);
  std::vector<std::vector<double>> expect;
  for (std::size_t i = 0; i < init.params().size(); ++i) {
    const auto v = vec(init.params()[i].value);
    expect.emplace_back(v.begin(), v.end());
  }
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < expect.size(); ++i)
      for (std::size_t j = 0; j < expect[i].size(); ++j) {
        expect[i][j] = 0.9 * expect[i][j] + 0.1 * students[k][i][j];
        ASSERT_NEAR(teachers[k][i][j], expect[i][j], 1e-6) << init.params()[i].name;
      }
}

TEST(MeanTeacher, BatchCompositionAndRampUp) {
  const auto data = tiny_data(3, 10);
  TrainConfig cfg = tiny_config();
  cfg.rampup_fraction = 0.5;
  std::vector<IterationInfo> seen;
  cfg.on_iteration = [&](const IterationInfo& i) { seen.push_back(i); };
  const SegModel<float> init(cfg.model, 5);
  const auto r = train_semi(data.labeled, data.unlabeled, data.validation, Method::mean_teacher, init, cfg);
  ASSERT_EQ(seen.size(), 6u);  // ceil(10 / 4) batches for 2 epochs
  const std::size_t unl[] = {4, 4, 2};
  const double ramp = 0.5 * 6;
  for (std::size_t k = 0; k < seen.size(); ++k) {
    EXPECT_EQ(seen[k].labeled, 4u);
    EXPECT_EQ(seen[k].unlabeled, unl[k % 3]);
    EXPECT_NEAR(seen[k].lambda2, std::min(1.0, (k + 1) / ramp), 1e-12);
  }
  EXPECT_EQ(r.parameter_sets, 2u);
  ASSERT_TRUE(r.teacher.has_value());
}

TEST(Baselines, SingleParameterSet) {
  const auto data = tiny_data(3, 4);
  TrainConfig cfg = tiny_config();
  cfg.semi_epochs = 1;
  const SegModel<float> init(cfg.model, 5);
  for (Method m : {Method::pi_model, Method::temporal_ensemble, Method::pseudo_label}) {
    const auto r = train_semi(data.labeled, data.unlabeled, data.validation, m, init, cfg);
    EXPECT_EQ(r.parameter_sets, 1u) << to_string(m);
    EXPECT_FALSE(r.teacher.has_value());
    EXPECT_EQ(r.iterations, 1u);  // four unlabeled images fill one batch
    for (const auto& row : r.log) EXPECT_TRUE(std::isfinite(row.loss_total));
  }
}

TEST(PseudoLabel, LabelsAreFrozen) {
  const auto data = tiny_data(3, 4);
  TrainConfig cfg = tiny_config();
  cfg.semi_epochs = 10;
  const SegModel<float> init(cfg.model, 5);
  std::vector<Mask> first, tenth;
  cfg.on_epoch = [&](const EpochInfo& e) {
    ASSERT_NE(e.pseudo_labels, nullptr);
    if (e.epoch == 0) first = *e.pseudo_labels;
    if (e.epoch == 9) tenth = *e.pseudo_labels;
  };
  train_semi(data.labeled, data.unlabeled, data.validation, Method::pseudo_label, init, cfg);
  ASSERT_EQ(first.size(), 4u);
  EXPECT_EQ(first, tenth);
}

TEST(TemporalEnsemble, TargetsAreBiasCorrectedAverages) {
  const auto data = tiny_data(3, 4);
  TrainConfig cfg = tiny_config();
  cfg.semi_epochs = 2;
  cfg.ema_alpha = 0.6;
  const SegModel<float> init(cfg.model, 5);
  std::vector<Image> canon;
  for (const auto& s : data.unlabeled) canon.push_back(resize_image(s.image, 16));
  SegModel<float> copy = init;
  const auto p0 = predict_probabilities(copy, canon);
  std::vector<std::vector<Grid<float>>> targets;
  std::vector<std::vector<float>> after_epoch0;
  cfg.on_iteration = [&](const IterationInfo& info) {
    if (info.epoch != 0) return;
    after_epoch0.clear();
    for (std::size_t i = 0; i < info.student->size(); ++i) after_epoch0.push_back(vec((*info.student)[i].value));
  };
  cfg.on_epoch = [&](const EpochInfo& e) { targets.push_back(*e.ensemble_targets); };
  train_semi(data.labeled, data.unlabeled, data.validation, Method::temporal_ensemble, init, cfg);
  ASSERT_EQ(targets.size(), 2u);
  SegModel<float> m(cfg.model, 0);
  for (std::size_t i = 0; i < m.params().size(); ++i)
    std::copy(after_epoch0[i].begin(), after_epoch0[i].end(), m.params()[i].value.values().begin());
  const auto p1 = predict_probabilities(m, canon);
  // Z after two updates, divided by 1 - alpha^2.
  const double al = 0.6;
  for (std::size_t i = 0; i < p0.size(); ++i)
    for (std::size_t k = 0; k < p0[i].size(); ++k) {
      const double z = al * (1 - al) * p0[i][k] + (1 - al) * p1[i][k];
      EXPECT_NEAR(targets[0][i][k], std::min(1.0, z / (1 - al * al)), 1e-5);
    }
}

TEST(Degenerate, MeanTeacherWithoutUnlabeledMatchesSupervisedStage) {
  const auto data = tiny_data(5, 0);
  TrainConfig cfg = tiny_config();
  cfg.bce_epochs = 0;
  cfg.max_epochs = 2;
  cfg.semi_epochs = 2;
  cfg.lr_semi = cfg.lr_focal;
  const SegModel<float> init(cfg.model, 5);
  const auto sup = train_supervised(data.labeled, data.validation, cfg, init);
  const auto mt = train_semi(data.labeled, {}, data.validation, Method::mean_teacher, init, cfg);
  ASSERT_EQ(sup.log.size(), mt.log.size());
  ASSERT_EQ(sup.log.size(), 2u);
  for (std::size_t i = 0; i < sup.log.size(); ++i) {
    EXPECT_EQ(sup.log[i].loss_sup, mt.log[i].loss_sup);
    EXPECT_EQ(mt.log[i].loss_cons, 0.0);
  }
}

TEST(Supervised, BcePhasePrecedesFocalAndIsDeterministic) {
  const auto data = tiny_data(5, 0);
  TrainConfig cfg = tiny_config();
  cfg.bce_epochs = 2;
  cfg.switch_dsc = 1.1;  // never switch early
  const auto a = train_supervised(data.labeled, data.validation, cfg);
  const auto b = train_supervised(data.labeled, data.validation, cfg);
  EXPECT_EQ(a.bce_epochs, 2u);
  EXPECT_EQ(a.focal_epochs, 2u);
  ASSERT_EQ(a.log.size(), 4u);  // one batch per epoch
  bool seen_focal = false;
  for (const auto& r : a.log) {
    if (r.phase == "focal") seen_focal = true;
    if (seen_focal) EXPECT_EQ(r.phase, "focal");
  }
  EXPECT_EQ(a.log.front().phase, "bce");
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].loss_total, b.log[i].loss_total);
  for (std::size_t i = 0; i < a.model.params().size(); ++i)
    EXPECT_EQ(vec(a.model.params()[i].value), vec(b.model.params()[i].value));
  cfg.seed = 4;
  const auto c = train_supervised(data.labeled, data.validation, cfg);
  EXPECT_NE(c.log.front().loss_total, a.log.front().loss_total);
}

TEST(Supervised, LossDecreasesOnTinySet) {
  const auto data = tiny_data(4, 0);
  TrainConfig cfg = tiny_config();
  cfg.augment = false;
  cfg.bce_epochs = 30;
  cfg.switch_dsc = 1.1;
  cfg.max_epochs = 0;
  const auto r = train_supervised(data.labeled, {}, cfg);
  EXPECT_LT(r.log.back().loss_sup, 0.5 * r.log.front().loss_sup);
}

TEST(Selection, TieGoesToStudentAndScoresAreRecomputed) {
  const auto data = tiny_data(3, 0);
  SegModel<float> a(tiny_model(), 1), b(tiny_model(), 1), c(tiny_model(), 2);
  const Selection tie = select_inference_model(a, b, data.validation);
  EXPECT_EQ(tie.chosen, "student");
  EXPECT_EQ(tie.teacher_dsc, tie.student_dsc);
  const Selection s = select_inference_model(a, c, data.validation);
  std::vector<Image> imgs;
  std::vector<Mask> masks;
  for (const auto& v : data.validation) {
    imgs.push_back(resize_image(v.image, 16));
    masks.push_back(resize_mask(*v.mask, 16));
  }
  EXPECT_EQ(s.teacher_dsc, mean_dsc(a, imgs, masks));
  EXPECT_EQ(s.student_dsc, mean_dsc(c, imgs, masks));
  EXPECT_EQ(s.chosen, s.teacher_dsc > s.student_dsc ? "teacher" : "student");
  EXPECT_THROW(select_inference_model(a, b, {}), Error);
}

TEST(Config, Validation) {
  TrainConfig cfg = tiny_config();
  cfg.batch_size = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.ema_alpha = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_EQ(parse_method("pi_model"), Method::pi_model);
  EXPECT_THROW(parse_method("mixup"), ConfigError);
  const auto data = tiny_data(2, 2);
  const SegModel<float> init(tiny_model(), 1);
  EXPECT_THROW(train_semi(data.labeled, {}, data.validation, Method::pi_model, init, tiny_config()), Error);
  EXPECT_THROW(train_semi(data.labeled, data.unlabeled, data.validation, Method::supervised, init, tiny_config()),
               ConfigError);
}

TEST(Log, CsvHeaderAndRows) {
  const std::string csv = log_csv({{0, "bce", 0.5, 0, 0.5, std::nullopt}, {1, "focal", 0.25, 0.1, 0.35, 0.8}});
  EXPECT_EQ(csv, "iter,phase,loss_sup,loss_cons,loss_total,val_dsc\n0,bce,0.5,0,0.5,\n1,focal,0.25,0.1,0.35,0.800000\n");
}
