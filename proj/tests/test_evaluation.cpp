#include <gtest/gtest.h>

#include <map>
#include <set>

#include "vseg/evaluation.hpp"

using namespace vseg;

namespace {

std::vector<std::string> names(std::size_t n) {
  std::vector<std::string> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(subject_name(i));
  return v;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.model.base_width = 4;
  t.model.cardinality = 2;
  t.model.blocks_per_stage = 1;
  t.bce_epochs = 1;
  t.max_epochs = 1;
  t.semi_epochs = 1;
  return t;
}

}  // namespace

TEST(Partition, FortySubjectsIntoFiveFoldsOfEight) {
  const auto parts = partition_subjects(names(40), 5, 3);
  ASSERT_EQ(parts.size(), 5u);
  std::set<std::string> seen;
  for (const auto& p : parts) {
    EXPECT_EQ(p.size(), 8u);
    for (const auto& s : p) EXPECT_TRUE(seen.insert(s).second) << s << " in two folds";
  }
  EXPECT_EQ(seen.size(), 40u);
  EXPECT_EQ(partition_subjects(names(40), 5, 3), parts);
  EXPECT_NE(partition_subjects(names(40), 5, 4), parts);
}

TEST(Partition, Errors) {
  EXPECT_THROW(partition_subjects(names(4), 5, 1), ConfigError);
  EXPECT_THROW(partition_subjects(names(4), 1, 1), ConfigError);
}

TEST(TrainingSplit, HoldsOutAFractionOfLabeled) {
  const Dataset d = generate_phantom_dataset(
      {.subjects = 2, .images_per_subject = 10, .labeled_per_subject = 10, .image_size = 70, .seed = 1});
  std::vector<const DatasetEntry*> all;
  for (const auto& e : d) all.push_back(&e);
  const auto s = make_training_split(all, 0.15, 9);
  EXPECT_EQ(s.validation.size(), 3u);
  EXPECT_EQ(s.labeled.size(), 17u);
  EXPECT_TRUE(s.unlabeled.empty());
  std::set<std::string> ids;
  for (const auto& x : s.labeled) ids.insert(x.id);
  for (const auto& x : s.validation) EXPECT_FALSE(ids.count(x.id));
  EXPECT_EQ(make_training_split(all, 0.15, 9).validation.front().id, s.validation.front().id);
}

TEST(TrainingSplit, ExplicitValidationEntriesWin) {
  Dataset d = generate_phantom_dataset(
      {.subjects = 1, .images_per_subject = 6, .labeled_per_subject = 4, .image_size = 70, .seed = 1});
  d[0].split = Split::validation;
  std::vector<const DatasetEntry*> all;
  for (const auto& e : d) all.push_back(&e);
  const auto s = make_training_split(all, 0.5, 1);
  ASSERT_EQ(s.validation.size(), 1u);
  EXPECT_EQ(s.validation[0].id, d[0].id());
  EXPECT_EQ(s.labeled.size(), 3u);
  EXPECT_EQ(s.unlabeled.size(), 2u);
  EXPECT_FALSE(s.unlabeled[0].mask.has_value());
}

TEST(CrossValidate, EverySubjectIsTestedExactlyOnce) {
  const Dataset d = generate_phantom_dataset(
      {.subjects = 5, .images_per_subject = 4, .labeled_per_subject = 2, .image_size = 70, .seed = 2});
  CrossValConfig cv;
  cv.seed = 2;
  cv.train = tiny_train();
  std::map<std::string, std::set<std::size_t>> tested;
  cv.on_prediction = [&](const std::string& exp, std::size_t fold, const DatasetEntry& e, const Image& input,
                         const VeinMask& pred) {
    EXPECT_EQ(input.width, 64u);
    EXPECT_EQ(pred.mask.width, 64u);
    if (exp == "supervised") tested[e.subject].insert(fold);
  };
  const auto ex = cross_validate(d, cv);
  ASSERT_EQ(ex.size(), 2u);
  EXPECT_EQ(ex[0].name, "supervised");
  EXPECT_EQ(ex[1].name, "mean_teacher");
  EXPECT_EQ(tested.size(), 5u);
  for (const auto& [subject, folds] : tested) EXPECT_EQ(folds.size(), 1u) << subject;
  for (const auto& e : ex) {
    ASSERT_EQ(e.folds.size(), 5u);
    for (const auto& f : e.folds) {
      EXPECT_EQ(f.images.size(), 4u);  // all images of the one test subject
      for (const auto& r : f.images) {
        EXPECT_GE(r.dsc, 0.0);
        EXPECT_LE(r.dsc, 1.0);
        EXPECT_GE(r.centroid_error, 0.0);
      }
    }
  }
}

TEST(CrossValidate, CsvSchemaAndAggregateRow) {
  std::vector<Experiment> ex{{"supervised", {}}, {"mean_teacher", {}}};
  for (auto& e : ex)
    for (std::size_t f = 0; f < 5; ++f)
      e.folds.push_back({f, {{"s/a", 0.5 + 0.1 * f, 1.0, false}, {"s/b", 0.25, 2.0, f == 0}}});
  const std::string summary = summary_csv(ex);
  std::istringstream in(summary);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "experiment,fold,dsc_mean,dsc_std,cent_mean,cent_std,failure_rate");
  std::map<std::string, std::vector<std::string>> folds;
  while (std::getline(in, line)) folds[line.substr(0, line.find(','))].push_back(line);
  for (const auto& [name, rows] : folds) {
    ASSERT_EQ(rows.size(), 6u) << name;
    EXPECT_EQ(rows.back().substr(0, name.size() + 5), name + ",all,");
  }
  // mean of fold means: (0.375 + 0.425 + 0.475 + 0.525 + 0.575) / 5
  EXPECT_NE(summary.find("supervised,all,0.475000,"), std::string::npos);
  const std::string results = results_csv(ex);
  EXPECT_EQ(results.substr(0, results.find('\n')), "experiment,fold,image_id,dsc,centroid_error,failed");
  EXPECT_NE(results.find("supervised,0,s/b,0.250000,2.000000,1\n"), std::string::npos);
}
