#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "patchstorm/error.hpp"
#include "patchstorm/objective.hpp"
#include "patchstorm/rng.hpp"
#include "patchstorm/tensor.hpp"
#include "patchstorm/transforms.hpp"

namespace patchstorm {

enum class Variant { adam, mifgsm, vanilla };
enum class TargetSchedule { mild, radical_alternate };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::adam: return "adam";
    case Variant::mifgsm: return "mifgsm";
    case Variant::vanilla: return "vanilla";
  }
  return "?";
}

inline std::string_view to_string(TargetSchedule s) {
  return s == TargetSchedule::mild ? "mild" : "radical_alternate";
}

struct AttackConfig {
  int epsilon = 16;          // in 1/255 units
  double step_size = 1.275;  // in 1/255 units
  std::size_t iterations = 300;
  std::size_t K = 10;
  std::size_t P = 2;
  double lambda = 0.3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eta = 1e-8;
  double gamma = 1.0;
  Variant variant = Variant::adam;
  CropParams crop_params;
  MildTransformParams mild_params;
  TargetSchedule target_schedule = TargetSchedule::mild;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  bool record_grads = false;
  bool record_crops = false;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(Errc::invalid_argument, "attack config: " + m); };
    if (epsilon < 0 || epsilon > 255) fail("epsilon must lie in [0,255], got " + std::to_string(epsilon));
    if (!(step_size >= 0.0) || !std::isfinite(step_size)) fail("step_size must be >= 0");
    if (iterations == 0) fail("iterations must be >= 1");
    if (K == 0) fail("K must be >= 1");
    if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda must lie in [0,1]");
    if (lambda > 0.0 && P == 0) fail("lambda > 0 requires P >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1 must lie in [0,1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2 must lie in [0,1)");
    if (!(eta > 0.0)) fail("eta must be positive");
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) fail("gamma must be >= 0");
    crop_params.validate();
    mild_params.validate();
  }
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"v2-default", "v1-baseline", "no-mca", "no-ata", "no-pm"};
  return names;
}

/// Named configurations. The three ablations each switch off one component
/// of v2-default.
inline AttackConfig preset(std::string_view name) {
  AttackConfig c;
  if (name == "v2-default") return c;
  if (name == "v1-baseline") {
    c.K = 1;
    c.P = 0;
    c.lambda = 0.0;
    c.target_schedule = TargetSchedule::radical_alternate;
    c.variant = Variant::mifgsm;
    c.gamma = 0.0;
    c.step_size = 1.0;
    return c;
  }
  if (name == "no-mca") {
    c.K = 1;
    return c;
  }
  if (name == "no-ata") {
    c.P = 0;
    c.lambda = 0.0;
    return c;
  }
  if (name == "no-pm") {
    c.beta1 = 0.0;
    c.beta2 = 0.0;
    return c;
  }
  throw Error(Errc::invalid_argument, "unknown preset '" + std::string(name) + "'");
}

struct OptimizerState {
  Tensor m, v, mu;
  std::size_t t = 0;

  explicit OptimizerState(const Shape& shape) : m(shape), v(shape), mu(shape) {}
};

/// Bias-corrected Adam direction scaled to step_size / 255.
inline Tensor adam_step(OptimizerState& s, const Tensor& g, const AttackConfig& cfg) {
  ++s.t;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.t));
  const double alpha = cfg.step_size / 255.0;
  Tensor step(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
    s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
    const double mhat = s.m[i] / c1, vhat = s.v[i] / c2;
    step[i] = alpha * mhat / (std::sqrt(vhat) + cfg.eta);
  }
  return step;
}

/// Bias-corrected first moment only; with beta1 = 0 this is plain gradient descent.
inline Tensor vanilla_step(OptimizerState& s, const Tensor& g, const AttackConfig& cfg) {
  ++s.t;
  const double b1 = cfg.beta1;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.t));
  const double alpha = cfg.step_size / 255.0;
  Tensor step(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
    step[i] = alpha * (s.m[i] / c1);
  }
  return step;
}

/// mu <- gamma mu + g / |g|_1, step = alpha sign(mu). A zero gradient gives
/// a zero step and leaves mu untouched.
inline Tensor mifgsm_step(OptimizerState& s, const Tensor& g, const AttackConfig& cfg) {
  ++s.t;
  Tensor step(g.shape());
  const double n1 = l1_norm(g.data());
  if (n1 == 0.0) return step;
  const double alpha = cfg.step_size / 255.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    s.mu[i] = cfg.gamma * s.mu[i] + g[i] / n1;
    step[i] = s.mu[i] > 0.0 ? alpha : (s.mu[i] < 0.0 ? -alpha : 0.0);
  }
  return step;
}

/// Clamp into the l-inf ball of radius epsilon/255 around x_clean, then into [0,1].
inline Tensor project(const Tensor& x_adv, const Tensor& x_clean, int epsilon) {
  if (x_adv.shape() != x_clean.shape()) {
    throw Error(Errc::shape_mismatch, "project: " + shape_str(x_adv.shape()) + " vs " + shape_str(x_clean.shape()));
  }
  const double e = static_cast<double>(epsilon) / 255.0;
  Tensor out(x_adv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double lo = x_clean[i] - e, hi = x_clean[i] + e;
    out[i] = std::clamp(std::clamp(x_adv[i], lo, hi), 0.0, 1.0);
  }
  return out;
}

struct AttackResult {
  Tensor x_adv;
  std::vector<double> loss_trace;  // pre-update mean crop loss
  std::vector<Tensor> grad_trace;
  std::vector<std::vector<CropGradRecord>> crop_trace;
  std::uint64_t seed = 0;
};

/// Called with (iteration, iterate) after every projected update.
using IterateObserver = std::function<void(std::size_t, const Tensor&)>;

inline constexpr std::uint64_t kAttackStreamTag = 0xA77AC4;

/// Transformed-target kind for 1-based iteration i.
inline TargetTransform target_transform_at(const AttackConfig& cfg, std::size_t i) {
  if (cfg.target_schedule == TargetSchedule::mild) return TargetTransform::mild;
  return i % 2 == 1 ? TargetTransform::radical_crop : TargetTransform::identity;
}

inline AttackResult run_attack(const AttackConfig& cfg, const Tensor& x_clean, const TargetContext& base_ctx,
                               const IterateObserver& observer = {}) {
  cfg.validate();
  if (base_ctx.P() < cfg.P) {
    throw Error(Errc::invalid_argument, "attack needs P=" + std::to_string(cfg.P) + " aux images, context has " +
                                            std::to_string(base_ctx.P()));
  }
  TargetContext ctx = base_ctx;
  ctx.aux.resize(cfg.P);
  ctx.lambda = cfg.lambda;
  ctx.mild = cfg.mild_params;
  ctx.validate();
  if (x_clean.shape() != ctx.target.shape()) {
    throw Error(Errc::shape_mismatch, "clean image " + shape_str(x_clean.shape()) + " does not match target " +
                                          shape_str(ctx.target.shape()));
  }
  for (double v : x_clean.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error(Errc::out_of_range, "clean image pixels must lie in [0,1]");
  }

  AttackResult res;
  res.seed = cfg.seed;
  res.x_adv = project(x_clean, x_clean, cfg.epsilon);
  OptimizerState state(x_clean.shape());
  for (std::size_t i = 1; i <= cfg.iterations; ++i) {
    Rng rng(cfg.seed, stream_id(kAttackStreamTag, i));
    ctx.target_transform = target_transform_at(cfg, i);
    McaGradient mg = mca_ata_gradient(res.x_adv, ctx, cfg.K, cfg.crop_params, rng, cfg.threads);
    if (!mg.g.all_finite() || !std::isfinite(mg.mean_loss)) {
      std::size_t bad = 0;
      for (double v : mg.g.data()) bad += std::isfinite(v) ? 0 : 1;
      throw Error(Errc::divergence, "attack: non-finite gradient at iteration " + std::to_string(i) + " (seed " +
                                        std::to_string(cfg.seed) + ", loss " + std::to_string(mg.mean_loss) + ", " +
                                        std::to_string(bad) + " non-finite entries of " + std::to_string(mg.g.size()) +
                                        ")");
    }
    res.loss_trace.push_back(mg.mean_loss);
    Tensor step;
    switch (cfg.variant) {
      case Variant::adam: step = adam_step(state, mg.g, cfg); break;
      case Variant::mifgsm: step = mifgsm_step(state, mg.g, cfg); break;
      case Variant::vanilla: step = vanilla_step(state, mg.g, cfg); break;
    }
    axpy(-1.0, step, res.x_adv);
    res.x_adv = project(res.x_adv, x_clean, cfg.epsilon);
    if (observer) observer(i, res.x_adv);
    if (cfg.record_grads) res.grad_trace.push_back(std::move(mg.g));
    if (cfg.record_crops) res.crop_trace.push_back(std::move(mg.records));
  }
  return res;
}

struct MaskedGrad {
  Tensor mask;  // 0/1 per pixel
  Tensor grad;
};

/// Largest elementwise gap between the streaming EMA over masked gradients
/// and its unrolled geometric sum, over every iteration of the history.
inline double ema_unroll_check(std::span<const MaskedGrad> history, double beta) {
  if (history.empty()) return 0.0;
  const Shape& shape = history.front().grad.shape();
  for (const auto& h : history) {
    if (h.grad.shape() != shape || h.mask.shape() != shape) {
      throw Error(Errc::shape_mismatch, "ema_unroll_check: history entries must share one shape");
    }
  }
  Tensor m(shape);
  double worst = 0.0;
  for (std::size_t i = 0; i < history.size(); ++i) {
    for (std::size_t k = 0; k < m.size(); ++k) {
      m[k] = beta * m[k] + (1.0 - beta) * history[i].mask[k] * history[i].grad[k];
    }
    for (std::size_t k = 0; k < m.size(); ++k) {
      double unrolled = 0.0, w = 1.0;
      for (std::size_t j = 0; j <= i; ++j) {
        const auto& h = history[i - j];
        if (h.mask[k] != 0.0) unrolled += (1.0 - beta) * w * h.grad[k];
        w *= beta;
      }
      worst = std::max(worst, std::abs(m[k] - unrolled));
    }
  }
  return worst;
}

}  // namespace patchstorm
