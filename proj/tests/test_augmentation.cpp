#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "vseg/augmentation.hpp"
#include "vseg/postprocess.hpp"

using namespace vseg;

namespace {

Image random_image(std::size_t w, std::size_t h, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, 255);
  Image img(w, h);
  for (auto& v : img.data) v = static_cast<float>(u(rng));
  return img;
}

Mask disk_mask(std::size_t size, double cx, double cy, double r) {
  Mask m(size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      m.at(x, y) = std::hypot(x - cx, y - cy) <= r ? 1 : 0;
  return m;
}

// Independent bilinear resize: sample at ((u + 0.5) * in / out - 0.5) with zero padding.
Image resize_oracle(const Image& img, std::size_t out) {
  Image r(out, out);
  auto px = [&](long x, long y) -> double {
    if (x < 0 || y < 0 || x >= static_cast<long>(img.width) || y >= static_cast<long>(img.height)) return 0;
    return img.at(x, y);
  };
  for (std::size_t v = 0; v < out; ++v)
    for (std::size_t u = 0; u < out; ++u) {
      const double sx = (u + 0.5) * img.width / static_cast<double>(out) - 0.5;
      const double sy = (v + 0.5) * img.height / static_cast<double>(out) - 0.5;
      const long x0 = static_cast<long>(std::floor(sx)), y0 = static_cast<long>(std::floor(sy));
      const double tx = sx - x0, ty = sy - y0;
      r.at(u, v) = static_cast<float>((1 - tx) * (1 - ty) * px(x0, y0) + tx * (1 - ty) * px(x0 + 1, y0) +
                                      (1 - tx) * ty * px(x0, y0 + 1) + tx * ty * px(x0 + 1, y0 + 1));
    }
  return r;
}

}  // namespace

TEST(SampleAugmentation, RangesAndFlipFrequency) {
  std::mt19937_64 rng(1);
  std::size_t flips = 0;
  for (int i = 0; i < 10000; ++i) {
    const SpatialAug s = sample_spatial(rng);
    EXPECT_LE(std::abs(s.rotation_deg), 15.0);
    EXPECT_LE(std::abs(s.shear_deg), 15.0);
    EXPECT_LE(std::abs(s.aspect_delta), 0.01);
    flips += s.hflip;
    const IntensityAug a = sample_intensity(rng);
    EXPECT_NO_THROW(a.validate());
  }
  EXPECT_NEAR(flips / 10000.0, 0.5, 0.02);
}

TEST(SampleAugmentation, SameSeedSameSequence) {
  for (std::uint64_t seed : {3u, 99u}) {
    EXPECT_EQ(std::get<SpatialAug>(sample_augmentation(seed, AugKind::spatial)),
              std::get<SpatialAug>(sample_augmentation(seed, AugKind::spatial)));
    EXPECT_EQ(std::get<IntensityAug>(sample_augmentation(seed, AugKind::intensity)),
              std::get<IntensityAug>(sample_augmentation(seed, AugKind::intensity)));
  }
  std::mt19937_64 a(5), b(5);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_spatial(a), sample_spatial(b));
}

TEST(ApplySpatial, IdentityOnSameSizeIsExact) {
  std::mt19937_64 rng(2);
  const Image img = random_image(64, 64, rng);
  const Mask m = disk_mask(64, 30, 33, 9);
  auto [out, om] = apply_spatial(img, &m, SpatialAug{});
  EXPECT_EQ(out, img);
  EXPECT_EQ(*om, m);
}

TEST(ApplySpatial, IdentityOn70IsPlainResize) {
  std::mt19937_64 rng(3);
  const Image img = random_image(70, 70, rng);
  const Image out = apply_spatial(img, nullptr, SpatialAug{}).first;
  const Image oracle = resize_oracle(img, 64);
  ASSERT_EQ(out.width, 64u);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], oracle[i], 1e-3);
}

TEST(ApplySpatial, MaskStaysBinaryAndImageInRange) {
  std::mt19937_64 rng(4);
  const Image img = random_image(70, 70, rng);
  const Mask m = disk_mask(70, 35, 30, 12);
  for (int i = 0; i < 50; ++i) {
    auto [out, om] = apply_spatial(img, &m, sample_spatial(rng));
    for (auto v : om->data) EXPECT_LE(v, 1);
    for (auto v : out.data) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 255.0f);
    }
  }
}

TEST(ApplySpatial, RotationMovesCentroidAboutCentre) {
  const double c = 31.5;  // centre in pixel-index coordinates of a 64 grid
  for (double cx : {40.0, 22.0})
    for (double r : {5.0, 8.0}) {
      const Mask m = disk_mask(64, cx, 28, r);
      const Point p0 = centroid(m);
      for (double deg : {10.0, -10.0, 15.0}) {
        const Mask out = warp_mask(m, SpatialAug{.rotation_deg = deg});
        const Point p1 = centroid(out);
        const double t = deg * std::numbers::pi / 180;
        const double ex = c + std::cos(t) * (p0.x - c) - std::sin(t) * (p0.y - c);
        const double ey = c + std::sin(t) * (p0.x - c) + std::cos(t) * (p0.y - c);
        EXPECT_LE(std::hypot(p1.x - ex, p1.y - ey), 1.0) << deg;
      }
    }
}

TEST(ApplySpatial, FlipMirrorsColumns) {
  std::mt19937_64 rng(6);
  const Image img = random_image(64, 64, rng);
  const Image out = warp_image(img, SpatialAug{.hflip = true});
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) EXPECT_EQ(out.at(x, y), img.at(63 - x, y));
}

TEST(ApplySpatial, Errors) {
  Image img(70, 70);
  Mask m(64, 64);
  EXPECT_THROW(apply_spatial(img, &m, SpatialAug{}), ShapeError);
  EXPECT_THROW(warp_image(img, SpatialAug{.rotation_deg = 20}), ConfigError);
}

TEST(ApplyIntensity, IdentityAndClamp) {
  std::mt19937_64 rng(7);
  const Image img = random_image(64, 64, rng);
  EXPECT_EQ(apply_intensity(img, IntensityAug{}), img);
  Image px(1, 1, 250.0f);
  EXPECT_EQ(apply_intensity(px, IntensityAug{.gain = 1.2})[0], 255.0f);
  Image low(1, 1, 5.0f);
  EXPECT_EQ(apply_intensity(low, IntensityAug{.offset = -15})[0], 0.0f);
  // contrast about 127.5, then gain, then offset: (127.5 + 0.8 (200 - 127.5)) * 1.1 + 3
  Image mid(1, 1, 200.0f);
  EXPECT_NEAR(apply_intensity(mid, IntensityAug{.offset = 3, .gain = 1.1, .contrast = 0.8})[0],
              (127.5 + 0.8 * 72.5) * 1.1 + 3, 1e-4);
}

TEST(ApplyIntensity, DropoutCount) {
  const Image img(64, 64, 100.0f);
  double total = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const Image out = apply_intensity(img, IntensityAug{.dropout = 0.05, .dropout_seed = s});
    std::size_t zeros = 0;
    for (auto v : out.data) zeros += v == 0.0f;
    EXPECT_LE(std::abs(static_cast<double>(zeros) - 204.8), 5 * 13.95);
    total += static_cast<double>(zeros);
  }
  EXPECT_NEAR(total / 200, 204.8, 3.0);
}

TEST(PairedViews, TeacherViewReconstructsFromRecordedParameters) {
  std::mt19937_64 rng(8);
  const Image img = random_image(70, 70, rng);
  const Mask m = disk_mask(70, 35, 35, 10);
  for (int i = 0; i < 20; ++i) {
    const PairedViews v = make_paired_views(img, &m, sample_spatial(rng), sample_intensity(rng));
    auto [teacher, tm] = apply_spatial(img, &m, v.spatial);
    EXPECT_EQ(v.teacher, teacher);
    EXPECT_EQ(*v.mask, *tm);
    EXPECT_EQ(v.student, apply_intensity(teacher, v.intensity));
    for (auto p : v.student.data) {
      EXPECT_GE(p, 0.0f);
      EXPECT_LE(p, 255.0f);
    }
  }
}
