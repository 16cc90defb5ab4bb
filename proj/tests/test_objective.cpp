#include <gtest/gtest.h>

#include "fd_oracle.hpp"
#include "patchstorm/objective.hpp"

using namespace patchstorm;
using namespace patchstorm::testing;

namespace {

std::shared_ptr<const Encoder> make_encoder(std::size_t patch, std::uint64_t seed) {
  EncoderConfig cfg;
  cfg.resolution = 16;
  cfg.patch_size = patch;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.embed_dim = 8;
  Encoder enc = encoder_init(cfg, seed);
  Rng rng(seed, 1);
  for (auto& [name, w] : enc.weights)
    for (double& v : w.data()) v += rng.normal(0.0, 0.2);
  return std::make_shared<const Encoder>(std::move(enc));
}

Tensor image(Rng& rng) { return random_tensor(rng, {3, 16, 16}, 0.05, 0.95); }

TargetContext make_context(Rng& rng, std::size_t P, double lambda, std::size_t m = 2) {
  TargetContext ctx;
  ctx.target = image(rng);
  for (std::size_t p = 0; p < P; ++p) ctx.aux.push_back(image(rng));
  ctx.lambda = lambda;
  for (std::size_t j = 0; j < m; ++j) ctx.encoders.push_back(make_encoder(j % 2 == 0 ? 4 : 8, 40 + j));
  ctx.validate();
  return ctx;
}

}  // namespace

TEST(CosineLoss, HandValues) {
  const Tensor u = Tensor::vector({1.0, 0.0}), v = Tensor::vector({0.0, 2.0}), w = Tensor::vector({-3.0, 0.0});
  EXPECT_DOUBLE_EQ(cosine_loss(u.data(), u.data()), 0.0);
  EXPECT_DOUBLE_EQ(cosine_loss(u.data(), v.data()), 1.0);
  EXPECT_DOUBLE_EQ(cosine_loss(u.data(), w.data()), 2.0);
  EXPECT_THROW(cosine_loss(u.data(), Tensor::vector({0.0, 0.0}).data()), Error);
}

TEST(CosineLoss, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const Tensor u = random_tensor(rng, {6}), v = random_tensor(rng, {6});
    auto f = [&](const Tensor& x) { return cosine_loss(x.data(), v.data()); };
    EXPECT_LE(rel_error(cosine_loss_grad(u, v).data(), fd_gradient(f, u).data()), 1e-6);
  }
}

TEST(TargetSemantics, IdentityTransformReproducesPlainEmbedding) {
  Rng rng(2);
  TargetContext ctx = make_context(rng, 0, 0.0);
  ctx.mild = MildTransformParams::identity();
  Rng draw(3);
  const auto sem = sample_target_semantics(draw, ctx);
  for (std::size_t j = 0; j < ctx.encoders.size(); ++j) {
    ASSERT_EQ(sem.embeddings[j].size(), 1u);
    EXPECT_EQ(sem.embeddings[j][0], encode(*ctx.encoders[j], ctx.target));
  }
}

TEST(TargetSemantics, CountsAndDeterminism) {
  Rng rng(4);
  const TargetContext ctx = make_context(rng, 2, 0.3);
  Rng a(5), b(5);
  const auto sa = sample_target_semantics(a, ctx), sb = sample_target_semantics(b, ctx);
  for (std::size_t j = 0; j < ctx.encoders.size(); ++j) {
    ASSERT_EQ(sa.embeddings[j].size(), 3u);
    for (std::size_t p = 0; p < 3; ++p) {
      EXPECT_EQ(sa.embeddings[j][p], sb.embeddings[j][p]);
      EXPECT_NEAR(l2_norm(sa.embeddings[j][p].data()), 1.0, 1e-9);
    }
  }
}

TEST(CropLoss, LambdaZeroIgnoresAux) {
  Rng rng(6);
  TargetContext ctx = make_context(rng, 2, 0.0);
  const Tensor x = image(rng);
  const CropSpec crop{2, 3, 12, 12, 16};
  Rng a(7);
  const double before = crop_loss(x, crop, sample_target_semantics(a, ctx), ctx);
  for (auto& aux : ctx.aux) aux = image(rng);
  Rng b(7);
  EXPECT_EQ(crop_loss(x, crop, sample_target_semantics(b, ctx), ctx), before);
}

TEST(CropLoss, SelfSimilarityIsZero) {
  Rng rng(8);
  TargetContext ctx = make_context(rng, 0, 0.0, 1);
  ctx.mild = MildTransformParams::identity();
  Rng draw(9);
  EXPECT_NEAR(crop_loss(ctx.target, full_crop(16, 16), sample_target_semantics(draw, ctx), ctx), 0.0, 1e-12);
}

TEST(CropLoss, AuxEqualToTargetDoublesLoss) {
  Rng rng(10);
  TargetContext ctx = make_context(rng, 1, 0.0);
  ctx.mild = MildTransformParams::identity();
  ctx.aux[0] = ctx.target;
  const Tensor x = image(rng);
  const CropSpec crop{1, 1, 14, 14, 16};
  Rng a(11);
  const double base = crop_loss(x, crop, sample_target_semantics(a, ctx), ctx);
  ctx.lambda = 1.0;
  Rng b(11);
  EXPECT_NEAR(crop_loss(x, crop, sample_target_semantics(b, ctx), ctx), 2.0 * base, 1e-12);
}

TEST(McaGradient, SingleFullCropEqualsPlainGradient) {
  Rng rng(12);
  TargetContext ctx = make_context(rng, 0, 0.0, 1);
  ctx.target_transform = TargetTransform::identity;
  const Tensor x = image(rng);
  Rng draw(13);
  const auto r = mca_ata_gradient(x, ctx, 1, {1.0, 1.0}, draw);
  const Encoder& enc = *ctx.encoders[0];
  const Tensor z = encode(enc, x), y = encode(enc, ctx.target);
  const Tensor plain = encode_vjp(enc, x, cosine_loss_grad(z, y));
  EXPECT_LE(max_abs_diff(r.g, plain), 1e-15);
  EXPECT_DOUBLE_EQ(r.mean_loss, cosine_loss(z.data(), y.data()));
}

TEST(McaGradient, DuplicatedCropListGivesSameAverage) {
  Rng rng(14);
  const TargetContext ctx = make_context(rng, 2, 0.3);
  const Tensor x = image(rng);
  const CropSpec crops[] = {{0, 0, 12, 12, 16}, {3, 2, 13, 13, 16}};
  const std::uint64_t seeds[] = {5, 6};
  const CropSpec doubled[] = {crops[0], crops[1], crops[0], crops[1]};
  const std::uint64_t doubled_seeds[] = {5, 6, 5, 6};
  // Semantics seeds are keyed by crop index too, so pin the target view.
  TargetContext fixed = ctx;
  fixed.mild = MildTransformParams::identity();
  const auto a = mca_ata_gradient_for(x, fixed, crops, seeds);
  const auto b = mca_ata_gradient_for(x, fixed, doubled, doubled_seeds);
  EXPECT_LE(max_abs_diff(a.g, b.g), 1e-15);
}

TEST(McaGradient, MatchesFiniteDifferencesOfFrozenLoss) {
  Rng rng(15);
  const TargetContext ctx = make_context(rng, 2, 0.3);
  const Tensor x = image(rng);
  Rng draw(16);
  std::vector<CropSpec> crops;
  std::vector<std::uint64_t> seeds;
  for (int k = 0; k < 4; ++k) {
    crops.push_back(sample_crop(draw, 16, {0.5, 1.0}, 16));
    seeds.push_back(draw.next_u64());
  }
  const auto r = mca_ata_gradient_for(x, ctx, crops, seeds);
  auto f = [&](const Tensor& xi) { return mca_ata_gradient_for(xi, ctx, crops, seeds).mean_loss; };
  std::vector<double> analytic, numeric;
  for (int s = 0; s < 30; ++s) {
    const std::size_t i = draw.below(x.size());
    analytic.push_back(r.g[i]);
    numeric.push_back(central_difference(f, x, i));
  }
  EXPECT_LE(rel_error(analytic, numeric), 1e-4);
}

TEST(McaGradient, RecordsAreZeroOutsideTheirCrop) {
  Rng rng(17);
  const TargetContext ctx = make_context(rng, 1, 0.5);
  const Tensor x = image(rng);
  Rng draw(18);
  const auto r = mca_ata_gradient(x, ctx, 6, {0.3, 0.6}, draw);
  ASSERT_EQ(r.records.size(), 6u);
  for (const auto& rec : r.records) {
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t yy = 0; yy < 16; ++yy)
        for (std::size_t xx = 0; xx < 16; ++xx) {
          const bool inside = xx >= rec.crop.x && xx < rec.crop.x + rec.crop.w && yy >= rec.crop.y &&
                              yy < rec.crop.y + rec.crop.h;
          if (!inside) {
            ASSERT_EQ(rec.pixel_grad.at(c, yy, xx), 0.0);
          }
        }
  }
}

TEST(McaGradient, LambdaZeroIsBitwiseAuxInvariant) {
  Rng rng(19);
  TargetContext ctx = make_context(rng, 2, 0.0);
  const Tensor x = image(rng);
  Rng a(20), b(20);
  const auto ga = mca_ata_gradient(x, ctx, 3, {}, a);
  for (auto& aux : ctx.aux) aux = image(rng);
  const auto gb = mca_ata_gradient(x, ctx, 3, {}, b);
  EXPECT_EQ(ga.g, gb.g);
}

TEST(McaGradient, IndependentOfThreadCount) {
  Rng rng(21);
  const TargetContext ctx = make_context(rng, 2, 0.3);
  const Tensor x = image(rng);
  Rng a(22), b(22), c(22);
  const auto g1 = mca_ata_gradient(x, ctx, 5, {}, a, 1);
  const auto g2 = mca_ata_gradient(x, ctx, 5, {}, b, 2);
  const auto g8 = mca_ata_gradient(x, ctx, 5, {}, c, 8);
  EXPECT_EQ(g1.g, g2.g);
  EXPECT_EQ(g1.g, g8.g);
  EXPECT_EQ(g1.mean_loss, g8.mean_loss);
}

TEST(TargetContextValidation, RejectsBadInputs) {
  Rng rng(23);
  TargetContext ctx = make_context(rng, 0, 0.0);
  ctx.lambda = 0.5;
  EXPECT_THROW(ctx.validate(), Error);
  ctx.lambda = 1.5;
  EXPECT_THROW(ctx.validate(), Error);
  ctx.lambda = 0.0;
  ctx.target = Tensor({3, 8, 8});
  EXPECT_THROW(ctx.validate(), Error);
}
