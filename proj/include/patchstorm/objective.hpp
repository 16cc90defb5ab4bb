#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "patchstorm/encoder.hpp"
#include "patchstorm/error.hpp"
#include "patchstorm/parallel.hpp"
#include "patchstorm/rng.hpp"
#include "patchstorm/tensor.hpp"
#include "patchstorm/transforms.hpp"

namespace patchstorm {

/// 1 - cos(u, v). Minimizing it maximizes cosine similarity.
inline double cosine_loss(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw Error(Errc::shape_mismatch, "cosine_loss: lengths " + std::to_string(u.size()) + " and " +
                                          std::to_string(v.size()) + " differ");
  }
  const double nu = l2_norm(u), nv = l2_norm(v);
  if (nu == 0.0 || nv == 0.0) throw Error(Errc::invalid_argument, "cosine_loss: zero-norm input");
  return 1.0 - dot(u, v) / (nu * nv);
}

/// Gradient of cosine_loss with respect to u.
inline Tensor cosine_loss_grad(const Tensor& u, const Tensor& v) {
  const double nu = l2_norm(u.data()), nv = l2_norm(v.data());
  if (nu == 0.0 || nv == 0.0) throw Error(Errc::invalid_argument, "cosine_loss: zero-norm input");
  const double c = dot(u.data(), v.data()) / (nu * nv);
  Tensor g(u.shape());
  for (std::size_t i = 0; i < u.size(); ++i) g[i] = -(v[i] / (nu * nv) - c * u[i] / (nu * nu));
  return g;
}

/// How the target image itself is transformed before encoding.
enum class TargetTransform { mild, radical_crop, identity };

struct TargetContext {
  Tensor target;
  std::vector<Tensor> aux;
  MildTransformParams mild;
  double lambda = 0.0;
  std::vector<std::shared_ptr<const Encoder>> encoders;
  TargetTransform target_transform = TargetTransform::mild;
  CropParams radical{0.5, 1.0};

  std::size_t P() const { return aux.size(); }

  void validate() const {
    if (encoders.empty()) throw Error(Errc::invalid_argument, "target context: no encoders");
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
      throw Error(Errc::invalid_argument, "lambda must lie in [0,1], got " + std::to_string(lambda));
    }
    if (lambda > 0.0 && aux.empty()) throw Error(Errc::invalid_argument, "lambda > 0 requires at least one aux image");
    const Shape shape = encoders.front()->config.image_shape();
    for (const auto& e : encoders) {
      if (!e) throw Error(Errc::invalid_argument, "target context: null encoder");
      if (e->config.image_shape() != shape) {
        throw Error(Errc::shape_mismatch, "target context: encoder " + e->id + " input " +
                                              shape_str(e->config.image_shape()) + " differs from " + shape_str(shape));
      }
    }
    if (target.shape() != shape) {
      throw Error(Errc::shape_mismatch, "target image " + shape_str(target.shape()) + " does not match " + shape_str(shape));
    }
    for (const auto& a : aux) {
      if (a.shape() != shape) {
        throw Error(Errc::shape_mismatch, "aux image " + shape_str(a.shape()) + " does not match " + shape_str(shape));
      }
    }
    mild.validate();
    radical.validate();
  }
};

/// embeddings[j][0] is y0 under encoder j; embeddings[j][p] the p-th aux anchor.
/// Aux entries are left empty when lambda is 0.
struct TargetSemantics {
  std::vector<std::vector<Tensor>> embeddings;
};

/// Draws P+1 transforms (the same draws for every encoder) and encodes.
inline TargetSemantics sample_target_semantics(Rng& rng, const TargetContext& ctx) {
  const std::size_t side = ctx.target.dim(1);
  Tensor t0;
  switch (ctx.target_transform) {
    case TargetTransform::mild:
      t0 = mild_transform(rng, ctx.target, ctx.mild);
      break;
    case TargetTransform::radical_crop:
      t0 = crop_resize(ctx.target, sample_crop(rng, side, ctx.radical, side));
      break;
    case TargetTransform::identity:
      t0 = ctx.target;
      break;
  }
  std::vector<Tensor> views;
  views.reserve(ctx.P());
  for (const auto& a : ctx.aux) views.push_back(mild_transform(rng, a, ctx.mild));
  TargetSemantics sem;
  sem.embeddings.resize(ctx.encoders.size());
  for (std::size_t j = 0; j < ctx.encoders.size(); ++j) {
    auto& row = sem.embeddings[j];
    row.resize(ctx.P() + 1);
    row[0] = encode(*ctx.encoders[j], t0);
    if (ctx.lambda == 0.0) continue;
    for (std::size_t p = 0; p < ctx.P(); ++p) row[p + 1] = encode(*ctx.encoders[j], views[p]);
  }
  return sem;
}

namespace detail {

// Loss of one embedding against the sampled semantics of encoder j, with
// its gradient when `grad` is non-null.
inline double semantic_loss(const Tensor& z, const std::vector<Tensor>& ys, double lambda, Tensor* grad) {
  double loss = cosine_loss(z.data(), ys[0].data());
  if (grad) *grad = cosine_loss_grad(z, ys[0]);
  const std::size_t P = ys.size() - 1;
  if (lambda == 0.0 || P == 0) return loss;
  const double w = lambda / static_cast<double>(P);
  for (std::size_t p = 1; p <= P; ++p) {
    loss += w * cosine_loss(z.data(), ys[p].data());
    if (grad) axpy(w, cosine_loss_grad(z, ys[p]), *grad);
  }
  return loss;
}

}  // namespace detail

/// Mean over encoders of the crop's target-plus-aux loss.
inline double crop_loss(const Tensor& x_adv, const CropSpec& crop, const TargetSemantics& sem, const TargetContext& ctx) {
  const Tensor view = crop_resize(x_adv, crop);
  double total = 0.0;
  for (std::size_t j = 0; j < ctx.encoders.size(); ++j) {
    total += detail::semantic_loss(encode(*ctx.encoders[j], view), sem.embeddings[j], ctx.lambda, nullptr);
  }
  return total / static_cast<double>(ctx.encoders.size());
}

struct CropGradRecord {
  CropSpec crop;
  double loss = 0.0;
  Tensor pixel_grad;  // full image frame
};

/// crop_loss and its gradient with respect to x_adv, chained through
/// crop_resize_vjp and each encoder's VJP.
inline CropGradRecord crop_loss_and_grad(const Tensor& x_adv, const CropSpec& crop, const TargetSemantics& sem,
                                         const TargetContext& ctx) {
  const Tensor view = crop_resize(x_adv, crop);
  const double inv_m = 1.0 / static_cast<double>(ctx.encoders.size());
  Tensor view_grad(view.shape());
  double total = 0.0;
  for (std::size_t j = 0; j < ctx.encoders.size(); ++j) {
    const Encoder& enc = *ctx.encoders[j];
    const auto cache = vit::forward(enc, view);
    Tensor dz;
    total += detail::semantic_loss(cache.embedding, sem.embeddings[j], ctx.lambda, &dz);
    axpy(inv_m, vit::backward(enc, cache, dz, false).image_grad, view_grad);
  }
  return {crop, total * inv_m, crop_resize_vjp(x_adv, crop, view_grad)};
}

struct McaGradient {
  Tensor g;
  double mean_loss = 0.0;
  std::vector<CropGradRecord> records;
};

/// Gradient average over an explicit crop list, each crop with its own
/// target-semantics seed. Results are reduced in ascending crop index.
inline McaGradient mca_ata_gradient_for(const Tensor& x_adv, const TargetContext& ctx, std::span<const CropSpec> crops,
                                        std::span<const std::uint64_t> semantic_seeds, unsigned threads = 1) {
  if (crops.empty()) throw Error(Errc::invalid_argument, "mca_ata_gradient: K must be >= 1");
  if (crops.size() != semantic_seeds.size()) {
    throw Error(Errc::invalid_argument, "mca_ata_gradient: one semantics seed per crop is required");
  }
  const std::size_t K = crops.size();
  std::vector<CropGradRecord> records(K);
  parallel_for(K, threads, [&](std::size_t k) {
    Rng rng(semantic_seeds[k], stream_id(0x5E4A, k));
    const TargetSemantics sem = sample_target_semantics(rng, ctx);
    records[k] = crop_loss_and_grad(x_adv, crops[k], sem, ctx);
  });
  McaGradient out;
  out.g = Tensor(x_adv.shape());
  const double inv_k = 1.0 / static_cast<double>(K);
  for (const auto& r : records) {
    axpy(inv_k, r.pixel_grad, out.g);
    out.mean_loss += r.loss;
  }
  out.mean_loss *= inv_k;
  out.records = std::move(records);
  return out;
}

/// Samples K crops, then one semantics seed per crop, from `rng`.
inline McaGradient mca_ata_gradient(const Tensor& x_adv, const TargetContext& ctx, std::size_t K,
                                    const CropParams& crop_params, Rng& rng, unsigned threads = 1) {
  if (K == 0) throw Error(Errc::invalid_argument, "mca_ata_gradient: K must be >= 1");
  const std::size_t side = x_adv.dim(1), out = ctx.encoders.front()->config.resolution;
  std::vector<CropSpec> crops(K);
  for (auto& c : crops) c = sample_crop(rng, side, crop_params, out);
  std::vector<std::uint64_t> seeds(K);
  for (auto& s : seeds) s = rng.next_u64();
  return mca_ata_gradient_for(x_adv, ctx, crops, seeds, threads);
}

}  // namespace patchstorm
