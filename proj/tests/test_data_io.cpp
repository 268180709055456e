#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "vseg/checkpoint.hpp"
#include "vseg/dataset.hpp"
#include "vseg/inference.hpp"
#include "vseg/phantom.hpp"

using namespace vseg;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("vseg_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ModelConfig small_model() {
  ModelConfig c;
  c.base_width = 4;
  c.cardinality = 2;
  c.blocks_per_stage = 1;
  c.input_size = 16;
  return c;
}

std::vector<float> vec(const Tensor<float>& t) { return {t.values().begin(), t.values().end()}; }

double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2 * std::numbers::pi); }
double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

TEST(Pgm, RoundTrip) {
  TempDir dir("pgm");
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> u(0, 255);
  Image img(13, 7);
  for (auto& v : img.data) v = static_cast<float>(u(rng));
  write_image(dir.path / "a.pgm", img);
  EXPECT_EQ(read_image(dir.path / "a.pgm"), img);
  Mask m(13, 7);
  for (std::size_t i = 0; i < m.size(); i += 3) m[i] = 1;
  write_mask(dir.path / "m.pgm", m);
  EXPECT_EQ(read_mask(dir.path / "m.pgm"), m);
}

TEST(Pgm, ParsesCommentsAndRejectsBadFiles) {
  const std::string ok = std::string("P5\n# comment\n2 1\n255\n") + '\x05' + '\xff';
  const auto g = parse_pgm(ok);
  EXPECT_EQ(g.width, 2u);
  EXPECT_EQ(g.at(1, 0), 255);
  EXPECT_THROW(parse_pgm("P2\n2 1\n255\n1 2"), FormatError);
  EXPECT_THROW(parse_pgm("P5\n2 2\n255\nab"), FormatError);
  EXPECT_THROW(parse_pgm("P5\n2 1\n65535\nabcd"), FormatError);
  TempDir dir("badmask");
  Grid<std::uint8_t> gray(2, 1);
  gray[0] = 128;
  write_file_atomic(dir.path / "m.pgm", encode_pgm(gray));
  EXPECT_THROW(read_mask(dir.path / "m.pgm"), FormatError);
  EXPECT_THROW(read_image(dir.path / "missing.pgm"), Error);
}

TEST(Dataset, WriteLoadRoundTrip) {
  TempDir dir("ds");
  const Dataset d = generate_phantom_dataset({.subjects = 2, .images_per_subject = 4, .labeled_per_subject = 2,
                                              .image_size = 70, .seed = 5});
  write_dataset(dir.path, d);
  const Dataset back = load_dataset(dir.path);
  ASSERT_EQ(back.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(back[i].subject, d[i].subject);
    EXPECT_EQ(back[i].name, d[i].name);
    EXPECT_EQ(back[i].split, d[i].split);
    EXPECT_EQ(back[i].image, d[i].image);
    EXPECT_EQ(back[i].mask, d[i].mask);
    EXPECT_EQ(back[i].eval_mask, d[i].eval_mask);
  }
  EXPECT_EQ(subjects_of(back), (std::vector<std::string>{"subject_00", "subject_01"}));
}

TEST(Dataset, MissingMaskNamesTheFile) {
  TempDir dir("missing");
  const Dataset d = generate_phantom_dataset({.subjects = 1, .images_per_subject = 2, .labeled_per_subject = 2,
                                              .image_size = 70, .seed = 5});
  write_dataset(dir.path, d);
  fs::remove(dir.path / "subject_00" / "img_01_mask.pgm");
  try {
    load_dataset(dir.path);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("img_01_mask.pgm"), std::string::npos);
  }
}

TEST(Dataset, PhantomCountsAndSplits) {
  const Dataset d = generate_phantom_dataset({});
  ASSERT_EQ(d.size(), 300u);
  std::size_t labeled = 0;
  for (const auto& e : d) {
    labeled += e.split == Split::labeled;
    ASSERT_NE(e.ground_truth(), nullptr);
    EXPECT_EQ(e.image.width, 70u);
  }
  EXPECT_EQ(labeled, 60u);
  EXPECT_EQ(subjects_of(d).size(), 10u);
}

TEST(Phantom, RadiusDistributionMatchesTruncatedNormal) {
  std::mt19937_64 rng(7);
  const int n = 40000;
  double s = 0, q = 0;
  for (int i = 0; i < n; ++i) {
    const double r = sample_vein_radius(rng);
    ASSERT_GE(r, 3.0);
    ASSERT_LE(r, 26.0);
    s += r;
    q += r * r;
  }
  const double mean = s / n, sd = std::sqrt(q / n - mean * mean);
  const double a = (3 - kVeinRadiusMean) / kVeinRadiusStd, b = (26 - kVeinRadiusMean) / kVeinRadiusStd;
  const double Z = normal_cdf(b) - normal_cdf(a);
  const double tm = kVeinRadiusMean + kVeinRadiusStd * (normal_pdf(a) - normal_pdf(b)) / Z;
  const double tv = kVeinRadiusStd * kVeinRadiusStd *
                    (1 + (a * normal_pdf(a) - b * normal_pdf(b)) / Z - std::pow((normal_pdf(a) - normal_pdf(b)) / Z, 2));
  EXPECT_NEAR(mean, tm, 0.07);
  EXPECT_NEAR(sd, std::sqrt(tv), 0.07);
  EXPECT_NEAR(mean, 14.22, 0.2);
  EXPECT_NEAR(sd, 4.38, 0.25);
}

TEST(Phantom, MaskIsTheEllipseAndDeterministic) {
  std::mt19937_64 rng(3);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const PhantomParams p = sample_image_params(sample_subject(s), rng);
    const Phantom a = generate_phantom(s, p), b = generate_phantom(s, p);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.mask, b.mask);
    const double t = p.orientation_deg * std::numbers::pi / 180;
    double sx = 0, sy = 0, inside = 0, outside = 0;
    std::size_t n = 0;
    for (std::size_t y = 0; y < 70; ++y)
      for (std::size_t x = 0; x < 70; ++x) {
        const double dx = x - p.center_x, dy = y - p.center_y;
        const double u = std::cos(t) * dx + std::sin(t) * dy, v = -std::sin(t) * dx + std::cos(t) * dy;
        const bool in = u * u / (p.radius_x * p.radius_x) + v * v / (p.radius_y * p.radius_y) <= 1;
        EXPECT_EQ(a.mask.at(x, y), in ? 1 : 0);
        if (in) {
          sx += x, sy += y, ++n;
          inside += a.image.at(x, y);
        } else {
          outside += a.image.at(x, y);
        }
      }
    ASSERT_GT(n, 0u);
    EXPECT_LE(std::hypot(sx / n - p.center_x, sy / n - p.center_y), 0.5);
    EXPECT_LT(inside / n, outside / (70.0 * 70 - n));
    const Phantom c = generate_phantom(s + 100, p);
    EXPECT_NE(c.image, a.image);
  }
}

TEST(Phantom, DatasetIsReproducible) {
  const auto a = generate_phantom_dataset({.subjects = 2, .images_per_subject = 3, .labeled_per_subject = 1,
                                           .image_size = 70, .seed = 11});
  const auto b = generate_phantom_dataset({.subjects = 2, .images_per_subject = 3, .labeled_per_subject = 1,
                                           .image_size = 70, .seed = 11});
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].image, b[i].image);
}

TEST(Checkpoint, RoundTripGivesIdenticalOutputs) {
  TempDir dir("ckpt");
  SegModel<float> model(small_model(), 42);
  save_checkpoint(dir.path / "m.ckpt", model, {.method = "mean_teacher", .role = "teacher", .iteration = 17});
  LoadedCheckpoint c = load_checkpoint(dir.path / "m.ckpt");
  EXPECT_EQ(c.meta.method, "mean_teacher");
  EXPECT_EQ(c.meta.role, "teacher");
  EXPECT_EQ(c.meta.iteration, 17u);
  ASSERT_EQ(c.model.params().size(), model.params().size());
  for (std::size_t i = 0; i < model.params().size(); ++i)
    EXPECT_EQ(vec(c.model.params()[i].value), vec(model.params()[i].value)) << model.params()[i].name;
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0, 1);
  Tensor<float> x({2, 1, 16, 16});
  for (auto& v : x.values()) v = u(rng);
  EXPECT_EQ(vec(c.model.infer(x)), vec(model.infer(x)));

  SegModel<float> other(small_model(), 7);
  load_into(other, dir.path / "m.ckpt");
  EXPECT_EQ(vec(other.infer(x)), vec(model.infer(x)));
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  SegModel<float> model(small_model(), 1);
  const std::string bytes = encode_checkpoint(model, {});
  std::string bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(decode_checkpoint(bad_version), VersionError);
  std::string bad_digest = bytes;
  bad_digest[8] ^= 0x5a;
  EXPECT_THROW(decode_checkpoint(bad_digest), DigestError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), FormatError);
  EXPECT_THROW(decode_checkpoint("NOPE" + bytes.substr(4)), FormatError);

  ModelConfig wider = small_model();
  wider.base_width = 8;
  SegModel<float> other(wider, 1);
  TempDir dir("ckpt2");
  save_checkpoint(dir.path / "m.ckpt", model);
  EXPECT_THROW(load_into(other, dir.path / "m.ckpt"), DigestError);
}

TEST(Inference, OverlayMarksOnlyTheBoundary) {
  Image img(16, 16, 10.0f);
  Mask m(16, 16);
  for (std::size_t y = 4; y < 10; ++y)
    for (std::size_t x = 4; x < 10; ++x) m.at(x, y) = 1;
  const Image o = overlay_boundary(img, m);
  EXPECT_EQ(o.at(4, 4), 255.0f);
  EXPECT_EQ(o.at(6, 6), 10.0f);
  EXPECT_EQ(o.at(0, 0), 10.0f);
}
