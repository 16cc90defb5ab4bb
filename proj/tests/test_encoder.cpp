#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fd_oracle.hpp"
#include "patchstorm/encoder.hpp"

using namespace patchstorm;
using namespace patchstorm::testing;

namespace {

EncoderConfig small_config(std::size_t patch = 8) {
  EncoderConfig cfg;
  cfg.resolution = 16;
  cfg.patch_size = patch;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.embed_dim = 8;
  return cfg;
}

Tensor random_image(Rng& rng, const EncoderConfig& cfg) { return random_tensor(rng, cfg.image_shape(), 0.05, 0.95); }

// Larger init than the default so the backward pass is well exercised.
Encoder perturbed_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  Encoder enc = encoder_init(cfg, seed);
  Rng rng(seed, 99);
  for (auto& [name, w] : enc.weights) {
    for (double& v : w.data()) v += rng.normal(0.0, 0.2);
  }
  return enc;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("patchstorm_test_" + name);
}

}  // namespace

TEST(EncoderConfig, TokenCount) {
  EncoderConfig cfg;
  cfg.resolution = 32;
  cfg.patch_size = 4;
  EXPECT_EQ(cfg.tokens(), 65u);
  const Encoder enc = encoder_init(cfg, 1);
  EXPECT_EQ(enc.w("pos_embed").shape(), (Shape{65, 32}));
}

TEST(EncoderConfig, InvalidFieldsNameTheConstraint) {
  EncoderConfig cfg;
  cfg.patch_size = 5;
  try {
    encoder_init(cfg, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("patch_size"), std::string::npos);
  }
  cfg.patch_size = 8;
  cfg.heads = 3;
  EXPECT_THROW(encoder_init(cfg, 1), Error);
}

TEST(EncoderInit, DeterministicInSeed) {
  const EncoderConfig cfg;
  const Encoder a = encoder_init(cfg, 7), b = encoder_init(cfg, 7), c = encoder_init(cfg, 8);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_NE(a.weights, c.weights);
  EXPECT_EQ(a.id, "vit-p8-s7");
}

TEST(EncoderInit, BiasesZeroGainsOne) {
  const Encoder enc = encoder_init(EncoderConfig{}, 3);
  for (double v : enc.w("blocks.0.ln1.gain").data()) EXPECT_EQ(v, 1.0);
  for (double v : enc.w("blocks.1.mlp.fc1.bias").data()) EXPECT_EQ(v, 0.0);
  const auto& w = enc.w("patch_embed.weight");
  double s2 = 0.0;
  for (double v : w.data()) s2 += v * v;
  EXPECT_NEAR(std::sqrt(s2 / static_cast<double>(w.size())), 0.02, 0.002);
}

TEST(Encode, OutputIsUnitNorm) {
  Rng rng(1);
  for (std::size_t p : {4u, 8u, 16u}) {
    EncoderConfig cfg;
    cfg.patch_size = p;
    const Encoder enc = encoder_init(cfg, p);
    for (int i = 0; i < 3; ++i) {
      const Tensor z = encode(enc, random_image(rng, cfg));
      ASSERT_EQ(z.shape(), Shape{32});
      EXPECT_NEAR(l2_norm(z.data()), 1.0, 1e-9);
    }
  }
}

TEST(Encode, RepeatableAndRejectsBadInput) {
  const EncoderConfig cfg;
  const Encoder enc = encoder_init(cfg, 2);
  Rng rng(2);
  const Tensor img = random_image(rng, cfg);
  EXPECT_EQ(encode(enc, img), encode(enc, img));
  Tensor bright = img;
  bright[5] = 1.5;
  try {
    encode(enc, bright);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::out_of_range);
  }
  EXPECT_THROW(encode(enc, Tensor({3, 16, 16})), Error);
}

// Self-generated golden value: embedding of the zero image under the default
// patch-8 encoder with seed 1 (tests/golden/zero_image_embedding.txt).
TEST(Encode, ZeroImageGolden) {
  const Encoder enc = encoder_init(EncoderConfig{}, 1);
  const Tensor z = encode(enc, Tensor(EncoderConfig{}.image_shape()));
  const std::filesystem::path golden = std::filesystem::path(PATCHSTORM_TEST_DATA) / "zero_image_embedding.txt";
  std::ifstream is(golden);
  ASSERT_TRUE(is) << "missing " << golden;
  std::vector<double> expected;
  for (double v; is >> v;) expected.push_back(v);
  ASSERT_EQ(expected.size(), z.size());
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(z[i], expected[i], 1e-12) << i;
}

TEST(EncodeVjp, ZeroAndScaledEmbeddingGrad) {
  const EncoderConfig cfg = small_config();
  const Encoder enc = perturbed_encoder(cfg, 4);
  Rng rng(4);
  const Tensor img = random_image(rng, cfg);
  const Tensor zero = encode_vjp(enc, img, Tensor({cfg.embed_dim}));
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
  const Tensor g = random_tensor(rng, {cfg.embed_dim});
  Tensor g3 = g;
  scale_inplace(g3, 3.0);
  const Tensor a = encode_vjp(enc, img, g), b = encode_vjp(enc, img, g3);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b[i], 3.0 * a[i], 1e-12 * (1.0 + std::abs(b[i])));
}

// Cosine loss to a fixed random unit target, 50 pixels, 5 encoders.
TEST(EncodeVjp, MatchesFiniteDifferencesThroughCosine) {
  Rng rng(17);
  for (int e = 0; e < 5; ++e) {
    const EncoderConfig cfg = small_config(e % 2 == 0 ? 4 : 8);
    const Encoder enc = perturbed_encoder(cfg, 100 + e);
    const Tensor img = random_image(rng, cfg);
    Tensor target = random_tensor(rng, {cfg.embed_dim});
    scale_inplace(target, 1.0 / l2_norm(target.data()));
    auto f = [&](const Tensor& x) { return cosine_similarity(encode(enc, x).data(), target.data()); };
    // encode is unit norm, so d cos / dz is the target itself.
    const Tensor grad = encode_vjp(enc, img, target);
    std::vector<double> analytic, numeric;
    for (int s = 0; s < 50; ++s) {
      const std::size_t i = rng.below(img.size());
      analytic.push_back(grad[i]);
      numeric.push_back(central_difference(f, img, i));
    }
    EXPECT_LE(rel_error(analytic, numeric), 1e-4) << "encoder " << e;
  }
}

TEST(EncodeVjp, WeightGradientsMatchFiniteDifferences) {
  const EncoderConfig cfg = small_config();
  Encoder enc = perturbed_encoder(cfg, 9);
  Rng rng(9);
  const Tensor img = random_image(rng, cfg);
  const Tensor probe = random_tensor(rng, {cfg.embed_dim});
  const auto back = vit::backward(enc, vit::forward(enc, img), probe, true);
  for (const auto& [name, w] : enc.weights) {
    ASSERT_TRUE(back.weight_grads.contains(name)) << name;
    std::vector<double> analytic, numeric;
    for (int s = 0; s < 4; ++s) {
      const std::size_t i = rng.below(w.size());
      auto f = [&](const Tensor& wi) {
        Encoder probe_enc = enc;
        probe_enc.weights[name] = wi;
        return dot(encode(probe_enc, img).data(), probe.data());
      };
      analytic.push_back(back.weight_grads.at(name)[i]);
      numeric.push_back(central_difference(f, w, i));
    }
    EXPECT_LE(rel_error(analytic, numeric, 1e-7), 1e-4) << name;
  }
}

TEST(TrainStep, ZeroRateLeavesWeightsAndReportsLoss) {
  const EncoderConfig cfg = small_config();
  Encoder enc = encoder_init(cfg, 5);
  const Encoder before = enc;
  Rng rng(5);
  Tensor head = random_tensor(rng, {cfg.embed_dim, 12});
  const Tensor head_before = head;
  const Tensor imgs[] = {random_image(rng, cfg), random_image(rng, cfg)};
  const std::size_t labels[] = {3, 7};
  const double l0 = train_step(enc, head, imgs, labels, 0.0);
  EXPECT_EQ(enc.weights, before.weights);
  EXPECT_EQ(head, head_before);
  EXPECT_EQ(train_step(enc, head, imgs, labels, 0.0), l0);
}

TEST(TrainStep, UniformLogitsGiveLogClasses) {
  const EncoderConfig cfg = small_config();
  Encoder enc = encoder_init(cfg, 6);
  Tensor head({cfg.embed_dim, 12});
  Rng rng(6);
  const Tensor img = random_image(rng, cfg);
  const std::size_t label = 4;
  EXPECT_NEAR(train_step(enc, head, std::span(&img, 1), std::span(&label, 1), 0.0), std::log(12.0), 1e-6);
}

TEST(TrainStep, SingleExampleConverges) {
  const EncoderConfig cfg = small_config();
  Encoder enc = encoder_init(cfg, 7);
  Tensor head({cfg.embed_dim, 12});
  Rng rng(7);
  const Tensor img = random_image(rng, cfg);
  const std::size_t label = 9;
  const double initial = train_step(enc, head, std::span(&img, 1), std::span(&label, 1), 0.1);
  double last = initial;
  for (int s = 1; s < 200; ++s) last = train_step(enc, head, std::span(&img, 1), std::span(&label, 1), 0.1);
  EXPECT_LT(last, initial);
}

TEST(TrainStep, Errors) {
  const EncoderConfig cfg = small_config();
  Encoder enc = encoder_init(cfg, 8);
  Tensor head({cfg.embed_dim, 12});
  EXPECT_THROW(train_step(enc, head, {}, {}, 0.1), Error);
  Rng rng(8);
  const Tensor img = random_image(rng, cfg);
  const std::size_t bad = 12;
  try {
    train_step(enc, head, std::span(&img, 1), std::span(&bad, 1), 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::out_of_range);
  }
}

TEST(WeightFile, RoundTripIsBitExact) {
  const Encoder enc = perturbed_encoder(small_config(4), 11);
  const auto path = temp_path("vit-roundtrip.bin");
  save_weights(enc, path);
  const Encoder back = load_weights(path);
  EXPECT_EQ(back.config, enc.config);
  EXPECT_EQ(back.weights, enc.weights);
  EXPECT_EQ(back.id, "patchstorm_test_vit-roundtrip");
  std::filesystem::remove(path);
}

TEST(WeightFile, TruncationAndMagicAreDistinct) {
  std::stringstream ss;
  write_encoder(ss, encoder_init(small_config(), 12));
  const std::string bytes = ss.str();
  for (std::size_t cut : {std::size_t{5}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    std::stringstream truncated(bytes.substr(0, cut));
    try {
      read_encoder(truncated, "t");
      FAIL() << cut;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::truncated) << cut;
    }
  }
  std::string corrupt = bytes;
  corrupt[3] = '?';
  std::stringstream bad(corrupt);
  try {
    read_encoder(bad, "t");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::bad_magic);
  }
  std::string old = bytes;
  old[8] = 9;
  std::stringstream versioned(old);
  try {
    read_encoder(versioned, "t");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::bad_version);
  }
}
