#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "patchstorm/attack.hpp"
#include "patchstorm/encoder.hpp"
#include "patchstorm/error.hpp"
#include "patchstorm/objective.hpp"
#include "patchstorm/parallel.hpp"
#include "patchstorm/rng.hpp"
#include "patchstorm/tensor.hpp"
#include "patchstorm/transforms.hpp"

namespace patchstorm {

// ------------------------------------------------- gradient vs crop overlap

struct IouRow {
  double iou = 0.0;
  double cosine = 0.0;
  CropSpec a, b;
};

struct IouStudy {
  std::vector<IouRow> rows;
  std::size_t skipped = 0;  // pairs with a zero-gradient crop
};

/// Full-frame pixel gradient of 1 - cos(f(crop(image)), target_embedding).
inline Tensor crop_pixel_grad(const Encoder& enc, const Tensor& image, const CropSpec& crop,
                              const Tensor& target_embedding) {
  const Tensor view = crop_resize(image, crop);
  const auto cache = vit::forward(enc, view);
  const Tensor dz = cosine_loss_grad(cache.embedding, target_embedding);
  return crop_resize_vjp(image, crop, vit::backward(enc, cache, dz, false).image_grad);
}

/// Second crop of a pair: the first one shifted by up to `reach` pixels per
/// axis and resized by up to reach/2, clamped into the frame. `reach` itself
/// is uniform in [0, side/4], which spreads IoU over roughly [0.3, 1].
inline CropSpec jitter_crop(Rng& rng, const CropSpec& a, std::size_t img_size) {
  const auto side = static_cast<std::int64_t>(a.w);
  const auto reach = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(side / 4 + 1)));
  auto offset = [&](std::int64_t r) {
    return static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(2 * r + 1))) - r;
  };
  const std::int64_t S = static_cast<std::int64_t>(img_size);
  const std::int64_t w = std::clamp<std::int64_t>(side + offset(reach / 2), 1, S);
  const std::int64_t x = std::clamp<std::int64_t>(static_cast<std::int64_t>(a.x) + offset(reach), 0, S - w);
  const std::int64_t y = std::clamp<std::int64_t>(static_cast<std::int64_t>(a.y) + offset(reach), 0, S - w);
  return {static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(w),
          static_cast<std::size_t>(w), a.out};
}

/// IoU and gradient cosine for explicit crop pairs; zero-gradient pairs are skipped.
inline IouStudy grad_similarity_for_pairs(const Encoder& enc, const Tensor& image, const Tensor& target_embedding,
                                          std::span<const std::pair<CropSpec, CropSpec>> pairs, unsigned threads = 1) {
  std::vector<std::optional<IouRow>> slots(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    const auto& [a, b] = pairs[i];
    const Tensor ga = crop_pixel_grad(enc, image, a, target_embedding);
    const Tensor gb = crop_pixel_grad(enc, image, b, target_embedding);
    if (l2_norm(ga.data()) == 0.0 || l2_norm(gb.data()) == 0.0) return;
    slots[i] = IouRow{iou(a, b), cosine_similarity(ga.data(), gb.data()), a, b};
  });
  IouStudy study;
  for (auto& s : slots) {
    if (s) {
      study.rows.push_back(*s);
    } else {
      ++study.skipped;
    }
  }
  return study;
}

/// Samples n_pairs distinct crop pairs (a from crop_params, b a jitter of a)
/// and records IoU against the cosine of their full-frame gradients.
inline IouStudy grad_similarity_vs_iou(const Encoder& enc, const Tensor& image, const Tensor& target_embedding,
                                       std::size_t n_pairs, Rng& rng, const CropParams& crop_params = {},
                                       unsigned threads = 1) {
  if (n_pairs == 0) throw Error(Errc::invalid_argument, "grad_similarity_vs_iou: n_pairs must be >= 1");
  const std::size_t side = image.dim(1), out = enc.config.resolution;
  std::vector<std::pair<CropSpec, CropSpec>> pairs(n_pairs);
  for (auto& [a, b] : pairs) {
    a = sample_crop(rng, side, crop_params, out);
    do {
      b = jitter_crop(rng, a, side);
    } while (b == a);
  }
  return grad_similarity_for_pairs(enc, image, target_embedding, pairs, threads);
}

/// Mean cosine over rows with lo <= iou < hi (hi >= 1 includes iou = 1).
inline std::optional<double> bucket_mean(std::span<const IouRow> rows, double lo, double hi) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.iou >= lo && (r.iou < hi || (hi >= 1.0 && r.iou <= hi))) {
      sum += r.cosine;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

// ------------------------------------------------- consecutive iterations

/// cos(g_i, g_{i+1}) over the recorded gradient trace (0 where either is zero).
inline std::vector<double> consecutive_grad_similarity(const AttackResult& run) {
  if (run.grad_trace.empty() || run.grad_trace.size() != run.loss_trace.size()) {
    throw Error(Errc::invalid_argument, "consecutive_grad_similarity: run has no complete gradient trace "
                                        "(enable record_grads)");
  }
  std::vector<double> out;
  for (std::size_t i = 0; i + 1 < run.grad_trace.size(); ++i) {
    out.push_back(cosine_similarity(run.grad_trace[i].data(), run.grad_trace[i + 1].data()));
  }
  return out;
}

// --------------------------------------------------- averaged-crop variance

struct VarianceReport {
  std::size_t K = 0;
  double sigma2_hat = 0.0;
  std::optional<double> p_bar_hat;  // empty when no pair has two nonzero deviations
  double var_mean = 0.0;            // |mean_k (g_k - mu)|^2
  double var_mean_expansion = 0.0;  // (K sigma2 + cross terms) / K^2
  double bound = 0.0;               // sigma2/K + (K-1)/K p_bar sigma2
};

/// Deviations are taken from `reference_mean` when given, else from the
/// sample mean (which makes var_mean zero up to rounding).
inline VarianceReport variance_stats(std::span<const Tensor> grads, const Tensor* reference_mean = nullptr) {
  const std::size_t K = grads.size();
  if (K < 2) throw Error(Errc::invalid_argument, "variance_stats: need K >= 2 gradients");
  const Shape& shape = grads.front().shape();
  for (const auto& g : grads) {
    if (g.shape() != shape) throw Error(Errc::shape_mismatch, "variance_stats: gradients differ in shape");
  }
  if (reference_mean && reference_mean->shape() != shape) {
    throw Error(Errc::shape_mismatch, "variance_stats: reference mean " + shape_str(reference_mean->shape()) +
                                          " vs gradients " + shape_str(shape));
  }
  const double k = static_cast<double>(K);
  Tensor mu(shape);
  if (reference_mean) {
    mu = *reference_mean;
  } else {
    for (const auto& g : grads) axpy(1.0 / k, g, mu);
  }
  std::vector<Tensor> dev;
  dev.reserve(K);
  for (const auto& g : grads) {
    Tensor d = g;
    axpy(-1.0, mu, d);
    dev.push_back(std::move(d));
  }

  VarianceReport rep;
  rep.K = K;
  double diag = 0.0;
  std::vector<double> norms(K);
  for (std::size_t i = 0; i < K; ++i) {
    const double sq = dot(dev[i].data(), dev[i].data());
    diag += sq;
    norms[i] = std::sqrt(sq);
  }
  rep.sigma2_hat = diag / k;

  double cross = 0.0, corr = 0.0;
  std::size_t corr_pairs = 0;
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t j = i + 1; j < K; ++j) {
      const double ip = dot(dev[i].data(), dev[j].data());
      cross += 2.0 * ip;
      if (norms[i] > 0.0 && norms[j] > 0.0) {
        corr += ip / (norms[i] * norms[j]);
        ++corr_pairs;
      }
    }
  }
  if (corr_pairs > 0) rep.p_bar_hat = corr / static_cast<double>(corr_pairs);

  Tensor mean_dev(shape);
  for (const auto& d : dev) axpy(1.0 / k, d, mean_dev);
  rep.var_mean = dot(mean_dev.data(), mean_dev.data());
  rep.var_mean_expansion = (diag + cross) / (k * k);
  rep.bound = rep.sigma2_hat / k + (k - 1.0) / k * rep.p_bar_hat.value_or(0.0) * rep.sigma2_hat;
  return rep;
}

inline VarianceReport variance_stats(std::span<const CropGradRecord> records, const Tensor* reference_mean = nullptr) {
  std::vector<Tensor> grads;
  grads.reserve(records.size());
  for (const auto& r : records) grads.push_back(r.pixel_grad);
  return variance_stats(std::span<const Tensor>(grads), reference_mean);
}

// ---------------------------------------------------------- embedding drift

struct DriftReport {
  double drift_radical = 0.0;
  double drift_mild_aux = 0.0;
  double delta_hat = 0.0;
  std::size_t samples = 0;
};

/// Mean embedding distance to f(x_tar) of radically cropped targets versus
/// mildly transformed aux anchors. delta_hat = 2(1 - min_p CS(aux_p, x_tar)).
inline DriftReport drift_stats(const Encoder& enc, const Tensor& x_tar, std::span<const Tensor> aux,
                               const CropParams& radical, const MildTransformParams& mild, std::size_t n_samples,
                               Rng& rng, unsigned threads = 1) {
  if (n_samples == 0) throw Error(Errc::invalid_argument, "drift_stats: n_samples must be >= 1");
  if (aux.empty()) throw Error(Errc::invalid_argument, "drift_stats: the mild path needs at least one aux image");
  radical.validate();
  mild.validate();
  const std::size_t side = x_tar.dim(1);
  const Tensor zt = encode(enc, x_tar);
  auto dist = [&](const Tensor& img) {
    const Tensor z = encode(enc, img);
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (z[i] - zt[i]) * (z[i] - zt[i]);
    return std::sqrt(s);
  };
  std::vector<std::uint64_t> seeds(n_samples);
  for (auto& s : seeds) s = rng.next_u64();
  std::vector<double> rad(n_samples), mil(n_samples);
  parallel_for(n_samples, threads, [&](std::size_t i) {
    Rng r(seeds[i], stream_id(0xD81F, i));
    rad[i] = dist(crop_resize(x_tar, sample_crop(r, side, radical, side)));
    double m = 0.0;
    for (const auto& a : aux) m += dist(mild_transform(r, a, mild));
    mil[i] = m / static_cast<double>(aux.size());
  });
  DriftReport rep;
  rep.samples = n_samples;
  for (std::size_t i = 0; i < n_samples; ++i) {
    rep.drift_radical += rad[i];
    rep.drift_mild_aux += mil[i];
  }
  rep.drift_radical /= static_cast<double>(n_samples);
  rep.drift_mild_aux /= static_cast<double>(n_samples);
  double worst = 1.0;
  for (const auto& a : aux) worst = std::min(worst, cosine_similarity(encode(enc, a).data(), zt.data()));
  rep.delta_hat = 2.0 * (1.0 - worst);
  return rep;
}

// --------------------------------------------------------------- cost model

struct FlopsEstimate {
  std::vector<double> per_layer;  // M = 12 N d^2 + 4 N^2 d per config
  double rho = 0.0;
  double total = 0.0;  // rho K (3 + P) M_ref per iteration
};

inline double layer_flops(const EncoderConfig& cfg) {
  const double N = static_cast<double>(cfg.tokens()), d = static_cast<double>(cfg.width);
  return 12.0 * N * d * d + 4.0 * N * N * d;
}

/// rho = sum of per-model costs (depth x M) over the reference model's cost.
/// The reference defaults to the patch-8 zoo geometry.
inline FlopsEstimate flops_estimate(std::span<const EncoderConfig> configs, std::size_t K, std::size_t P,
                                    const EncoderConfig& reference = {}) {
  if (configs.empty()) throw Error(Errc::invalid_argument, "flops_estimate: empty config list");
  if (K == 0) throw Error(Errc::invalid_argument, "flops_estimate: K must be >= 1");
  reference.validate();
  FlopsEstimate est;
  const double m_ref = layer_flops(reference);
  double sum = 0.0;
  for (const auto& c : configs) {
    c.validate();
    est.per_layer.push_back(layer_flops(c));
    sum += static_cast<double>(c.depth) * est.per_layer.back();
  }
  est.rho = sum / (static_cast<double>(reference.depth) * m_ref);
  est.total = est.rho * static_cast<double>(K) * (3.0 + static_cast<double>(P)) * m_ref;
  return est;
}

}  // namespace patchstorm
