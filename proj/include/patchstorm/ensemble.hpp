#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "patchstorm/attack.hpp"
#include "patchstorm/encoder.hpp"
#include "patchstorm/error.hpp"
#include "patchstorm/parallel.hpp"
#include "patchstorm/rng.hpp"
#include "patchstorm/tensor.hpp"

namespace patchstorm {

// ------------------------------------------------------------------ dataset

inline constexpr std::size_t kShapeKinds = 3;  // circle, square, triangle
inline constexpr std::size_t kColorKinds = 4;
inline constexpr std::size_t kShapeClasses = kShapeKinds * kColorKinds;

inline constexpr std::array<std::array<double, 3>, kColorKinds> kShapeColors = {{
    {0.92, 0.16, 0.12},  // red
    {0.12, 0.78, 0.22},  // green
    {0.16, 0.32, 0.95},  // blue
    {0.95, 0.86, 0.10},  // yellow
}};

inline std::string class_name(std::size_t label) {
  static const char* shapes[] = {"circle", "square", "triangle"};
  static const char* colors[] = {"red", "green", "blue", "yellow"};
  return std::string(colors[label % kColorKinds]) + "-" + shapes[label / kColorKinds];
}

struct ShapesDataset {
  std::size_t resolution = 0;
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
};

namespace detail {

inline bool inside_shape(std::size_t kind, double px, double py, double cx, double cy, double r) {
  const double dx = px - cx, dy = py - cy;
  switch (kind) {
    case 0:
      return dx * dx + dy * dy <= r * r;
    case 1: {
      const double h = r;
      return std::abs(dx) <= h && std::abs(dy) <= h;
    }
    default: {
      // Upright triangle with apex at (cx, cy - r) and base at cy + r/2.
      if (dy > 0.5 * r) return false;
      const double half_width = (dy + r) / 1.5 * 0.866;
      return dy >= -r && std::abs(dx) <= half_width;
    }
  }
}

inline Tensor render_shape(Rng& rng, std::size_t R, std::size_t label) {
  const std::size_t kind = label / kColorKinds;
  const auto& color = kShapeColors[label % kColorKinds];
  const double size = static_cast<double>(R);
  std::array<double, 3> bg;
  for (double& b : bg) b = rng.uniform(0.0, 0.3);
  const double r = rng.uniform(0.36, 0.40) * size;
  const double cx = rng.uniform(r, size - r), cy = rng.uniform(r, size - r);
  constexpr int kSuper = 4;
  Tensor img({3, R, R});
  for (std::size_t y = 0; y < R; ++y) {
    for (std::size_t x = 0; x < R; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / kSuper;
          const double py = static_cast<double>(y) + (sy + 0.5) / kSuper;
          hits += inside_shape(kind, px, py, cx, cy, r) ? 1 : 0;
        }
      const double cov = static_cast<double>(hits) / (kSuper * kSuper);
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = bg[c] * (1.0 - cov) + color[c] * cov;
    }
  }
  return img;
}

}  // namespace detail

/// n images of one anti-aliased filled shape on a dark background. With
/// `stratified`, labels cycle through every class in order.
inline ShapesDataset gen_shapes(std::size_t n, std::size_t R, std::uint64_t seed, bool stratified = false) {
  if (n == 0) throw Error(Errc::invalid_argument, "gen_shapes: n must be >= 1");
  if (R < 4) throw Error(Errc::invalid_argument, "gen_shapes: resolution must be >= 4");
  ShapesDataset ds;
  ds.resolution = R;
  ds.images.resize(n);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(seed, stream_id(0xDA7A, i));
    const std::size_t label = stratified ? i % kShapeClasses : rng.below(kShapeClasses);
    ds.labels[i] = label;
    ds.images[i] = detail::render_shape(rng, R, label);
  }
  return ds;
}

// --------------------------------------------------------------------- zoo

struct ZooEntry {
  EncoderConfig config;
  std::uint64_t seed = 0;
};

struct TrainOptions {
  std::size_t epochs = 5;
  double lr = 0.02;
  std::size_t batch = 8;
  double logit_scale = 10.0;
  bool cosine_decay = true;
  unsigned threads = 1;
};

struct TrainLogRow {
  std::string id;
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct Zoo {
  std::vector<Encoder> encoders;
  std::vector<Tensor> heads;
  std::vector<TrainLogRow> log;
};

inline std::string zoo_id(const EncoderConfig& cfg, std::uint64_t seed) {
  return "vit-p" + std::to_string(cfg.patch_size) + "-s" + std::to_string(seed);
}

inline constexpr std::size_t kDefaultTrainImages = 2400;
inline constexpr std::uint64_t kDefaultTrainSeed = 7;

/// Patch sizes {4, 8, 16} x seeds {1, 2} at the default geometry.
inline std::vector<ZooEntry> default_zoo_spec() {
  std::vector<ZooEntry> spec;
  for (std::size_t p : {4, 8, 16})
    for (std::uint64_t s : {1, 2}) {
      EncoderConfig cfg;
      cfg.patch_size = p;
      spec.push_back({cfg, s});
    }
  return spec;
}

inline double classify_accuracy(const Encoder& enc, const Tensor& head, const ShapesDataset& ds) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const Tensor logits = head_logits(encode(enc, ds.images[i]), head);
    const auto best = std::max_element(logits.data().begin(), logits.data().end()) - logits.data().begin();
    correct += static_cast<std::size_t>(best) == ds.labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.images.size());
}

/// Trains each spec entry independently (minibatch descent, zero-initialized
/// head). Encoders are trained in parallel; each run is deterministic.
inline Zoo build_zoo(std::span<const ZooEntry> spec, const ShapesDataset& ds, const TrainOptions& opt) {
  if (spec.empty()) throw Error(Errc::invalid_argument, "build_zoo: empty zoo spec");
  if (ds.images.empty()) throw Error(Errc::invalid_argument, "build_zoo: empty dataset");
  if (opt.batch == 0) throw Error(Errc::invalid_argument, "build_zoo: batch must be >= 1");
  Zoo zoo;
  zoo.encoders.resize(spec.size());
  zoo.heads.resize(spec.size());
  std::vector<std::vector<TrainLogRow>> logs(spec.size());
  parallel_for(spec.size(), opt.threads, [&](std::size_t z) {
    const auto& entry = spec[z];
    if (entry.config.resolution != ds.resolution) {
      throw Error(Errc::shape_mismatch, "build_zoo: encoder resolution " + std::to_string(entry.config.resolution) +
                                            " does not match dataset resolution " + std::to_string(ds.resolution));
    }
    Encoder enc = encoder_init(entry.config, entry.seed, zoo_id(entry.config, entry.seed));
    Tensor head({entry.config.embed_dim, kShapeClasses});
    std::vector<std::size_t> order(ds.images.size());
    const std::size_t total_steps = std::max<std::size_t>(1, opt.epochs * ((order.size() + opt.batch - 1) / opt.batch));
    std::size_t step = 0;
    for (std::size_t e = 1; e <= opt.epochs; ++e) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(entry.seed, stream_id(0x7EA1, e));
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      double loss = 0.0;
      std::size_t batches = 0;
      std::vector<Tensor> images;
      std::vector<std::size_t> labels;
      for (std::size_t start = 0; start < order.size(); start += opt.batch) {
        images.clear();
        labels.clear();
        for (std::size_t i = start; i < std::min(order.size(), start + opt.batch); ++i) {
          images.push_back(ds.images[order[i]]);
          labels.push_back(ds.labels[order[i]]);
        }
        try {
          const double progress = static_cast<double>(step++) / static_cast<double>(total_steps);
          const double lr = opt.cosine_decay ? 0.5 * opt.lr * (1.0 + std::cos(std::numbers::pi * progress)) : opt.lr;
          loss += train_step(enc, head, images, labels, lr, opt.logit_scale);
        } catch (const Error& err) {
          if (err.code() != Errc::divergence) throw;
          throw Error(Errc::divergence, "training " + enc.id + " (patch " + std::to_string(entry.config.patch_size) +
                                            ", seed " + std::to_string(entry.seed) + ") diverged in epoch " +
                                            std::to_string(e));
        }
        ++batches;
      }
      logs[z].push_back({enc.id, e, loss / static_cast<double>(batches), classify_accuracy(enc, head, ds)});
    }
    zoo.encoders[z] = std::move(enc);
    zoo.heads[z] = std::move(head);
  });
  for (auto& l : logs) zoo.log.insert(zoo.log.end(), l.begin(), l.end());
  return zoo;
}

// ------------------------------------------------------------- transfer

struct TransferMatrix {
  std::vector<std::string> ids;
  std::vector<std::size_t> patch_sizes;
  /// entries[s][e]: mean CS gain on e of attacks crafted on s; diagonal absent.
  std::vector<std::vector<std::optional<double>>> entries;
  std::vector<double> self_gain;
  /// Mean over off-diagonal columns of each row.
  std::vector<double> row_average;
  /// group_average[p][s]: row mean restricted to columns with patch size p.
  std::map<std::size_t, std::vector<std::optional<double>>> group_average;

  std::size_t size() const { return ids.size(); }
};

/// Attack settings used for profiling: one full-frame view, no aux anchors,
/// sign steps without momentum.
inline AttackConfig profiling_attack(std::size_t steps, int epsilon, std::uint64_t seed) {
  AttackConfig c;
  c.epsilon = epsilon;
  c.iterations = steps;
  c.K = 1;
  c.P = 0;
  c.lambda = 0.0;
  c.variant = Variant::mifgsm;
  c.gamma = 0.0;
  c.step_size = 1.0;
  c.crop_params = {1.0, 1.0};
  c.target_schedule = TargetSchedule::mild;
  c.mild_params = MildTransformParams::identity();
  c.seed = seed;
  return c;
}

inline double embedding_cosine(const Encoder& enc, const Tensor& a, const Tensor& b) {
  return cosine_similarity(encode(enc, a).data(), encode(enc, b).data());
}

/// Fills the derived averages from entries and patch sizes.
inline void finalize_transfer_matrix(TransferMatrix& tm) {
  const std::size_t n = tm.size();
  tm.row_average.assign(n, 0.0);
  tm.group_average.clear();
  for (std::size_t s = 0; s < n; ++s) {
    double sum = 0.0;
    std::size_t cnt = 0;
    std::map<std::size_t, std::pair<double, std::size_t>> groups;
    for (std::size_t e = 0; e < n; ++e) {
      if (!tm.entries[s][e]) continue;
      sum += *tm.entries[s][e];
      ++cnt;
      auto& g = groups[tm.patch_sizes[e]];
      g.first += *tm.entries[s][e];
      ++g.second;
    }
    tm.row_average[s] = cnt ? sum / static_cast<double>(cnt) : 0.0;
    for (std::size_t p : tm.patch_sizes) {
      auto& col = tm.group_average[p];
      col.resize(n);
      auto it = groups.find(p);
      col[s] = it == groups.end() ? std::nullopt : std::optional<double>(it->second.first / static_cast<double>(it->second.second));
    }
  }
}

inline TransferMatrix transfer_matrix(std::span<const std::shared_ptr<const Encoder>> zoo, std::span<const Tensor> images,
                                      std::span<const Tensor> targets, std::size_t steps, int epsilon,
                                      unsigned threads = 1, std::uint64_t seed = 0) {
  if (zoo.size() < 2) throw Error(Errc::invalid_argument, "transfer_matrix: need at least two encoders");
  if (images.empty() || images.size() != targets.size()) {
    throw Error(Errc::invalid_argument, "transfer_matrix: need equally many (>=1) images and targets");
  }
  const std::size_t n = zoo.size(), N = images.size();
  TransferMatrix tm;
  for (const auto& e : zoo) {
    tm.ids.push_back(e->id);
    tm.patch_sizes.push_back(e->config.patch_size);
  }
  // gains[s][i][e]
  std::vector<std::vector<std::vector<double>>> gains(n, std::vector<std::vector<double>>(N));
  parallel_for(n * N, threads, [&](std::size_t job) {
    const std::size_t s = job / N, i = job % N;
    TargetContext ctx;
    ctx.target = targets[i];
    ctx.encoders = {zoo[s]};
    const AttackResult r = run_attack(profiling_attack(steps, epsilon, seed + i), images[i], ctx);
    auto& row = gains[s][i];
    row.resize(n);
    for (std::size_t e = 0; e < n; ++e) {
      row[e] = embedding_cosine(*zoo[e], r.x_adv, targets[i]) - embedding_cosine(*zoo[e], images[i], targets[i]);
    }
  });
  tm.entries.assign(n, std::vector<std::optional<double>>(n));
  tm.self_gain.assign(n, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t e = 0; e < n; ++e) {
      double sum = 0.0;
      for (std::size_t i = 0; i < N; ++i) sum += gains[s][i][e];
      const double mean = sum / static_cast<double>(N);
      if (s == e) {
        tm.self_gain[s] = mean;
      } else {
        tm.entries[s][e] = mean;
      }
    }
  }
  finalize_transfer_matrix(tm);
  return tm;
}

/// Greedy pick by (-row average, id) that still leaves room to cover
/// min(k, #distinct patch sizes) distinct patch sizes.
inline std::vector<std::string> select_pe_plus(const TransferMatrix& tm, std::size_t k) {
  const std::size_t n = tm.size();
  if (k == 0 || k > n) {
    throw Error(Errc::invalid_argument, "select_pe_plus: k=" + std::to_string(k) + " must lie in [1, " +
                                            std::to_string(n) + "]");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (tm.row_average[a] != tm.row_average[b]) return tm.row_average[a] > tm.row_average[b];
    return tm.ids[a] < tm.ids[b];
  });
  const std::size_t distinct =
      std::set<std::size_t>(tm.patch_sizes.begin(), tm.patch_sizes.end()).size();
  const std::size_t required = std::min(k, distinct);
  std::set<std::size_t> covered;
  std::vector<std::string> chosen;
  for (std::size_t idx : order) {
    if (chosen.size() == k) break;
    const bool fresh = !covered.contains(tm.patch_sizes[idx]);
    const std::size_t uncovered = required - std::min(required, covered.size());
    if (fresh || k - chosen.size() - 1 >= uncovered) {
      chosen.push_back(tm.ids[idx]);
      covered.insert(tm.patch_sizes[idx]);
    }
  }
  return chosen;
}

// -------------------------------------------------------------- retrieval

struct AuxRetrieval {
  std::vector<Tensor> aux;
  std::vector<std::size_t> indices;  // positions in the pool
  std::vector<double> similarities;
  double delta_hat = 0.0;
};

/// Top-P pool images by cosine similarity to the target under `enc`, with
/// bitwise copies of the target excluded. delta_hat = 2(1 - CS of the P-th).
inline AuxRetrieval retrieve_aux(std::span<const Tensor> pool, const Tensor& x_tar, const Encoder& enc, std::size_t P) {
  if (P == 0) throw Error(Errc::invalid_argument, "retrieve_aux: P must be >= 1");
  const Tensor zt = encode(enc, x_tar);
  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i] == x_tar) continue;
    ranked.emplace_back(cosine_similarity(encode(enc, pool[i]).data(), zt.data()), i);
  }
  if (ranked.size() < P) {
    throw Error(Errc::invalid_argument, "retrieve_aux: pool has " + std::to_string(ranked.size()) +
                                            " usable images, need P=" + std::to_string(P));
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  AuxRetrieval out;
  for (std::size_t p = 0; p < P; ++p) {
    out.aux.push_back(pool[ranked[p].second]);
    out.indices.push_back(ranked[p].second);
    out.similarities.push_back(ranked[p].first);
  }
  out.delta_hat = 2.0 * (1.0 - ranked[P - 1].first);
  return out;
}

}  // namespace patchstorm
