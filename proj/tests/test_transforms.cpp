#include <gtest/gtest.h>

#include "fd_oracle.hpp"
#include "patchstorm/transforms.hpp"

using namespace patchstorm;
using namespace patchstorm::testing;

TEST(SampleCrop, FullRangeGivesFullImage) {
  Rng rng(1);
  const CropSpec c = sample_crop(rng, 32, {1.0, 1.0}, 32);
  EXPECT_EQ(c, full_crop(32, 32));
}

TEST(SampleCrop, SameStateSameSpec) {
  Rng a(2, 5), b(2, 5);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_crop(a, 32, {}, 32), sample_crop(b, 32, {}, 32));
}

TEST(SampleCrop, QuarterAreaMeanSide) {
  Rng rng(3);
  double sum = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const CropSpec c = sample_crop(rng, 32, {0.25, 0.25}, 32);
    ASSERT_LE(c.x + c.w, 32u);
    ASSERT_LE(c.y + c.h, 32u);
    sum += static_cast<double>(c.w);
  }
  EXPECT_GE(sum / 10000.0, 15.5);
  EXPECT_LE(sum / 10000.0, 16.5);
}

TEST(SampleCrop, OffsetsCoverEveryPosition) {
  Rng rng(4);
  std::vector<int> seen(17, 0);
  for (int i = 0; i < 5000; ++i) ++seen[sample_crop(rng, 32, {0.25, 0.25}, 8).x];
  for (int v : seen) EXPECT_GT(v, 0);
}

TEST(SampleCrop, TinyScaleClampsToOnePixel) {
  Rng rng(5);
  const CropSpec c = sample_crop(rng, 4, {1e-6, 1e-6}, 4);
  EXPECT_EQ(c.w, 1u);
  EXPECT_THROW(sample_crop(rng, 4, {0.0, 0.5}, 4), Error);
}

TEST(CropResize, FullCropIsIdentity) {
  Rng rng(6);
  const Tensor img = random_tensor(rng, {3, 9, 9}, 0.0, 1.0);
  const CropSpec full = full_crop(9, 9);
  EXPECT_EQ(crop_resize(img, full), img);
  const Tensor g = random_tensor(rng, {3, 9, 9});
  EXPECT_EQ(crop_resize_vjp(img, full, g), g);
}

TEST(CropResize, HalfPixelCenterHandOracle) {
  const Tensor img({1, 2, 2}, {0.0, 1.0, 1.0, 0.0});
  const Tensor out = crop_resize(img, {0, 0, 2, 2, 1});
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(out[0], 0.5);
}

TEST(CropResize, VjpOfOnesSumsToOutArea) {
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const std::size_t out = 1 + rng.below(20);
    const CropSpec c = sample_crop(rng, 16, {0.05, 1.0}, out);
    const Tensor img({2, 16, 16}, 0.5);
    const Tensor g = crop_resize_vjp(img, c, Tensor({2, out, out}, 1.0));
    double s = 0.0;
    for (double v : g.data()) s += v;
    EXPECT_NEAR(s, 2.0 * static_cast<double>(out * out), 1e-9);
  }
}

TEST(CropResize, VjpIsZeroOutsideCrop) {
  Rng rng(8);
  const Tensor img = random_tensor(rng, {1, 16, 16}, 0.0, 1.0);
  const CropSpec c{3, 5, 7, 7, 12};
  const Tensor g = crop_resize_vjp(img, c, random_tensor(rng, {1, 12, 12}));
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      const bool inside = x >= 3 && x < 10 && y >= 5 && y < 12;
      if (!inside) {
        EXPECT_EQ(g.at(0, y, x), 0.0);
      }
    }
}

TEST(CropResize, VjpMatchesFiniteDifferences) {
  Rng rng(9);
  for (int trial = 0; trial < 25; ++trial) {
    const Tensor img = random_tensor(rng, {2, 10, 10}, 0.0, 1.0);
    const std::size_t out = 1 + rng.below(14);
    const CropSpec c = sample_crop(rng, 10, {0.1, 1.0}, out);
    const Tensor w = random_tensor(rng, {2, out, out});
    auto f = [&](const Tensor& x) { return dot(crop_resize(x, c).data(), w.data()); };
    EXPECT_LE(rel_error(crop_resize_vjp(img, c, w).data(), fd_gradient(f, img).data(), 1e-9), 1e-5);
  }
}

TEST(CropResize, OutOfBoundsSpecIsAnError) {
  const Tensor img({1, 8, 8});
  try {
    crop_resize(img, {4, 0, 5, 5, 4});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::out_of_range);
  }
  EXPECT_THROW(crop_resize(img, {0, 0, 0, 0, 4}), Error);
}

TEST(Iou, HandValues) {
  const CropSpec a{0, 0, 8, 8, 8}, b{4, 4, 8, 8, 8}, far{20, 20, 4, 4, 8};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, far), 0.0);
  EXPECT_DOUBLE_EQ(iou(a, b), 1.0 / 7.0);
}

TEST(Iou, SymmetricAndBounded) {
  Rng rng(10);
  for (int i = 0; i < 1000; ++i) {
    const CropSpec a = sample_crop(rng, 32, {0.05, 1.0}, 8), b = sample_crop(rng, 32, {0.05, 1.0}, 8);
    const double v = iou(a, b);
    EXPECT_EQ(v, iou(b, a));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(MildTransform, IdentityParamsGiveIdentity) {
  Rng rng(11);
  const Tensor img = random_tensor(rng, {3, 12, 12}, 0.0, 1.0);
  EXPECT_EQ(mild_transform(rng, img, MildTransformParams::identity()), img);
}

TEST(MildTransform, FlipIsAnInvolution) {
  Rng rng(12);
  const Tensor img = random_tensor(rng, {3, 12, 12}, 0.0, 1.0);
  const MildTransformParams flip{1.0, 1.0, 1.0, 0.0};
  const Tensor once = mild_transform(rng, img, flip);
  EXPECT_EQ(once.at(1, 3, 0), img.at(1, 3, 11));
  EXPECT_EQ(mild_transform(rng, once, flip), img);
}

TEST(MildTransform, DefaultsMatchShippedConfig) {
  const MildTransformParams p;
  EXPECT_EQ(p.scale_lo, 0.9);
  EXPECT_EQ(p.scale_hi, 1.0);
  EXPECT_EQ(p.flip_prob, 0.5);
  EXPECT_EQ(p.max_rotation, 15.0);
}

TEST(MildTransform, PreservesPixelRange) {
  Rng rng(13);
  for (int i = 0; i < 200; ++i) {
    const Tensor img = random_tensor(rng, {3, 16, 16}, 0.0, 1.0);
    const Tensor out = mild_transform(rng, img, {0.5, 1.0, 0.5, 45.0});
    for (double v : out.data()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(MildTransform, NinetyDegreeRotationOfCenteredGrid) {
  Tensor img({1, 3, 3});
  img.at(0, 0, 1) = 1.0;  // top middle
  const Tensor r = rotate(img, 90.0);
  double total = 0.0;
  for (double v : r.data()) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_NEAR(r.at(0, 1, 0) + r.at(0, 1, 2), 1.0, 1e-12);
}

TEST(MildTransform, InvalidParamsRejected) {
  Rng rng(14);
  const Tensor img({1, 4, 4});
  EXPECT_THROW(mild_transform(rng, img, {0.9, 1.0, 1.5, 0.0}), Error);
  EXPECT_THROW(mild_transform(rng, img, {0.9, 1.0, 0.5, -1.0}), Error);
}
