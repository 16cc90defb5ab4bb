#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "patchstorm/error.hpp"
#include "patchstorm/ops.hpp"
#include "patchstorm/rng.hpp"
#include "patchstorm/tensor.hpp"
#include "patchstorm/tensor_io.hpp"

namespace patchstorm {

/// Geometry of a tiny pre-LN vision transformer.
struct EncoderConfig {
  std::size_t resolution = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 8;
  std::size_t width = 32;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t embed_dim = 32;

  std::size_t grid() const { return resolution / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  /// Patch tokens plus the CLS token.
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t head_dim() const { return width / heads; }
  Shape image_shape() const { return {channels, resolution, resolution}; }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(Errc::invalid_argument, "encoder config: " + m); };
    if (resolution == 0 || channels == 0 || patch_size == 0 || width == 0 || heads == 0 || embed_dim == 0) {
      fail("all extents must be positive");
    }
    if (resolution % patch_size != 0) {
      fail("resolution " + std::to_string(resolution) + " is not a multiple of patch_size " + std::to_string(patch_size));
    }
    if (width % heads != 0) {
      fail("width " + std::to_string(width) + " is not a multiple of heads " + std::to_string(heads));
    }
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

using WeightMap = std::map<std::string, Tensor>;

struct Encoder {
  EncoderConfig config;
  WeightMap weights;
  std::string id;

  const Tensor& w(const std::string& name) const {
    auto it = weights.find(name);
    if (it == weights.end()) throw Error(Errc::invalid_argument, "encoder " + id + " has no weight '" + name + "'");
    return it->second;
  }
};

inline std::string block_key(std::size_t layer, const char* leaf) {
  return "blocks." + std::to_string(layer) + "." + leaf;
}

/// Every weight name with the shape implied by `cfg`.
inline std::map<std::string, Shape> weight_shapes(const EncoderConfig& cfg) {
  const std::size_t d = cfg.width;
  std::map<std::string, Shape> s;
  s["patch_embed.weight"] = {cfg.patch_dim(), d};
  s["patch_embed.bias"] = {d};
  s["cls_token"] = {1, d};
  s["pos_embed"] = {cfg.tokens(), d};
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    s[block_key(l, "ln1.gain")] = {d};
    s[block_key(l, "ln1.bias")] = {d};
    s[block_key(l, "attn.qkv.weight")] = {d, 3 * d};
    s[block_key(l, "attn.qkv.bias")] = {3 * d};
    s[block_key(l, "attn.proj.weight")] = {d, d};
    s[block_key(l, "attn.proj.bias")] = {d};
    s[block_key(l, "ln2.gain")] = {d};
    s[block_key(l, "ln2.bias")] = {d};
    s[block_key(l, "mlp.fc1.weight")] = {d, 4 * d};
    s[block_key(l, "mlp.fc1.bias")] = {4 * d};
    s[block_key(l, "mlp.fc2.weight")] = {4 * d, d};
    s[block_key(l, "mlp.fc2.bias")] = {d};
  }
  s["ln_final.gain"] = {d};
  s["ln_final.bias"] = {d};
  s["proj.weight"] = {d, cfg.embed_dim};
  return s;
}

inline void validate_weights(const Encoder& enc) {
  const auto shapes = weight_shapes(enc.config);
  for (const auto& [name, shape] : shapes) {
    auto it = enc.weights.find(name);
    if (it == enc.weights.end()) throw Error(Errc::invalid_argument, "missing weight '" + name + "'");
    if (it->second.shape() != shape) {
      throw Error(Errc::shape_mismatch, "weight '" + name + "' has shape " + shape_str(it->second.shape()) +
                                            ", expected " + shape_str(shape));
    }
    if (!it->second.all_finite()) throw Error(Errc::non_finite, "weight '" + name + "' is not finite");
  }
  if (enc.weights.size() != shapes.size()) throw Error(Errc::invalid_argument, "unexpected extra weights");
}

inline bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Weights ~ N(0, 0.02), biases zero, layernorm gains one. Deterministic in (cfg, seed).
inline Encoder encoder_init(const EncoderConfig& cfg, std::uint64_t seed, std::string id = {}) {
  cfg.validate();
  Encoder enc{cfg, {}, id.empty() ? "vit-p" + std::to_string(cfg.patch_size) + "-s" + std::to_string(seed) : id};
  Rng rng(seed, stream_id(0x1A17, 0));
  // std::map iteration order is fixed, so the draw order is too.
  for (const auto& [name, shape] : weight_shapes(cfg)) {
    Tensor t(shape);
    if (ends_with(name, ".gain")) {
      for (double& v : t.data()) v = 1.0;
    } else if (!ends_with(name, ".bias")) {
      for (double& v : t.data()) v = rng.normal(0.0, 0.02);
    }
    enc.weights.emplace(name, std::move(t));
  }
  return enc;
}

// ------------------------------------------------------------------ forward

namespace vit {

/// Flat pixel index for each patch element: patches in row-major grid
/// order, elements ordered (channel, dy, dx).
inline std::vector<std::size_t> patch_indices(const EncoderConfig& cfg) {
  const std::size_t p = cfg.patch_size, r = cfg.resolution, g = cfg.grid();
  std::vector<std::size_t> idx;
  idx.reserve(cfg.num_patches() * cfg.patch_dim());
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx) idx.push_back((c * r + gy * p + dy) * r + gx * p + dx);
  return idx;
}

struct HeadCache {
  Tensor q, k, v, kt, attn;
};

struct BlockCache {
  Tensor x_in, ln1, qkv;
  std::vector<HeadCache> heads;
  Tensor attn_cat, x_mid, ln2, h1, h1_act;
};

struct ForwardCache {
  Tensor pixels;   // [C*R*R, 1]
  std::vector<std::size_t> patch_idx;
  Tensor patches;  // [np, C*p*p]
  Tensor tokens;   // [N, d] before positional add
  std::vector<BlockCache> blocks;
  Tensor x_final;  // [N, d]
  Tensor cls, cls_ln, projected;
  Tensor embedding;  // [embed_dim]
};

inline void check_image(const EncoderConfig& cfg, const Tensor& image) {
  if (image.shape() != cfg.image_shape()) {
    throw Error(Errc::shape_mismatch, "encode: image " + shape_str(image.shape()) + " does not match encoder input " +
                                          shape_str(cfg.image_shape()));
  }
  for (double v : image.data()) {
    if (!std::isfinite(v)) throw Error(Errc::non_finite, "encode: image contains NaN or Inf");
    // Slack absorbs rounding from bilinear resampling of [0,1] images.
    if (v < -1e-9 || v > 1.0 + 1e-9) {
      throw Error(Errc::out_of_range, "encode: pixel value " + std::to_string(v) + " outside [0,1]");
    }
  }
}

inline ForwardCache forward(const Encoder& enc, const Tensor& image) {
  const auto& cfg = enc.config;
  check_image(cfg, image);
  const std::size_t d = cfg.width, dh = cfg.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardCache c;
  c.pixels = image.reshaped({image.size(), 1});
  c.patch_idx = patch_indices(cfg);
  c.patches = ops::reshape(ops::embedding_gather(c.pixels, c.patch_idx), {cfg.num_patches(), cfg.patch_dim()});
  const Tensor emb = ops::add(ops::matmul(c.patches, enc.w("patch_embed.weight")), enc.w("patch_embed.bias"));
  const Tensor parts[] = {enc.w("cls_token"), emb};
  c.tokens = ops::concat(parts, 0);
  Tensor x = ops::add(c.tokens, enc.w("pos_embed"));

  c.blocks.resize(cfg.depth);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    auto& b = c.blocks[l];
    b.x_in = std::move(x);
    b.ln1 = ops::layernorm_lastdim(b.x_in, enc.w(block_key(l, "ln1.gain")), enc.w(block_key(l, "ln1.bias")));
    b.qkv = ops::add(ops::matmul(b.ln1, enc.w(block_key(l, "attn.qkv.weight"))), enc.w(block_key(l, "attn.qkv.bias")));
    b.heads.resize(cfg.heads);
    std::vector<Tensor> outs(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      auto& hc = b.heads[h];
      hc.q = ops::slice(b.qkv, 1, h * dh, (h + 1) * dh);
      hc.k = ops::slice(b.qkv, 1, d + h * dh, d + (h + 1) * dh);
      hc.v = ops::slice(b.qkv, 1, 2 * d + h * dh, 2 * d + (h + 1) * dh);
      hc.kt = ops::transpose2d(hc.k);
      hc.attn = ops::softmax_lastdim(ops::scale(ops::matmul(hc.q, hc.kt), attn_scale));
      outs[h] = ops::matmul(hc.attn, hc.v);
    }
    b.attn_cat = ops::concat(outs, 1);
    b.x_mid = ops::add(b.x_in, ops::add(ops::matmul(b.attn_cat, enc.w(block_key(l, "attn.proj.weight"))),
                                        enc.w(block_key(l, "attn.proj.bias"))));
    b.ln2 = ops::layernorm_lastdim(b.x_mid, enc.w(block_key(l, "ln2.gain")), enc.w(block_key(l, "ln2.bias")));
    b.h1 = ops::add(ops::matmul(b.ln2, enc.w(block_key(l, "mlp.fc1.weight"))), enc.w(block_key(l, "mlp.fc1.bias")));
    b.h1_act = ops::gelu(b.h1);
    x = ops::add(b.x_mid, ops::add(ops::matmul(b.h1_act, enc.w(block_key(l, "mlp.fc2.weight"))),
                                   enc.w(block_key(l, "mlp.fc2.bias"))));
  }
  c.x_final = std::move(x);
  // Layernorm is row-wise, so normalizing only the CLS row is exact.
  c.cls = ops::slice(c.x_final, 0, 0, 1);
  c.cls_ln = ops::layernorm_lastdim(c.cls, enc.w("ln_final.gain"), enc.w("ln_final.bias"));
  c.projected = ops::matmul(c.cls_ln, enc.w("proj.weight"));
  c.embedding = ops::l2_normalize_lastdim(c.projected).reshaped({cfg.embed_dim});
  return c;
}

struct BackwardResult {
  Tensor image_grad;  // [C,R,R]
  WeightMap weight_grads;  // empty unless requested
};

inline BackwardResult backward(const Encoder& enc, const ForwardCache& c, const Tensor& embedding_grad,
                               bool want_weight_grads) {
  const auto& cfg = enc.config;
  if (embedding_grad.size() != cfg.embed_dim) {
    throw Error(Errc::shape_mismatch, "encode_vjp: embedding grad " + shape_str(embedding_grad.shape()) +
                                          " does not match embed_dim " + std::to_string(cfg.embed_dim));
  }
  const std::size_t d = cfg.width, dh = cfg.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool wg = want_weight_grads;
  BackwardResult out;
  auto put = [&](const std::string& name, Tensor g) {
    if (wg) out.weight_grads[name] = std::move(g);
  };

  const Tensor dproj = ops::l2_normalize_vjp(c.projected, embedding_grad.reshaped({1, cfg.embed_dim}));
  auto mg = ops::matmul_vjp(c.cls_ln, enc.w("proj.weight"), dproj, true, wg);
  put("proj.weight", std::move(mg.db));
  auto lg = ops::layernorm_vjp(c.cls, enc.w("ln_final.gain"), mg.da);
  put("ln_final.gain", std::move(lg.dgain));
  put("ln_final.bias", std::move(lg.dbias));
  Tensor dx = ops::slice_vjp(c.x_final, 0, 0, 1, lg.dx);

  for (std::size_t li = cfg.depth; li-- > 0;) {
    const auto& b = c.blocks[li];
    // x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
    auto g2 = ops::matmul_vjp(b.h1_act, enc.w(block_key(li, "mlp.fc2.weight")), dx, true, wg);
    put(block_key(li, "mlp.fc2.weight"), std::move(g2.db));
    if (wg) put(block_key(li, "mlp.fc2.bias"), ops::add_vjp(dx, enc.w(block_key(li, "mlp.fc2.bias")), dx)[1]);
    const Tensor dh1 = ops::gelu_vjp(b.h1, g2.da);
    auto g1 = ops::matmul_vjp(b.ln2, enc.w(block_key(li, "mlp.fc1.weight")), dh1, true, wg);
    put(block_key(li, "mlp.fc1.weight"), std::move(g1.db));
    if (wg) put(block_key(li, "mlp.fc1.bias"), ops::add_vjp(dh1, enc.w(block_key(li, "mlp.fc1.bias")), dh1)[1]);
    auto ln2g = ops::layernorm_vjp(b.x_mid, enc.w(block_key(li, "ln2.gain")), g1.da);
    put(block_key(li, "ln2.gain"), std::move(ln2g.dgain));
    put(block_key(li, "ln2.bias"), std::move(ln2g.dbias));
    Tensor dx_mid = ops::add(dx, ln2g.dx);

    // x_mid = x_in + proj(attention(ln1(x_in)))
    auto gp = ops::matmul_vjp(b.attn_cat, enc.w(block_key(li, "attn.proj.weight")), dx_mid, true, wg);
    put(block_key(li, "attn.proj.weight"), std::move(gp.db));
    if (wg) {
      put(block_key(li, "attn.proj.bias"), ops::add_vjp(dx_mid, enc.w(block_key(li, "attn.proj.bias")), dx_mid)[1]);
    }
    std::vector<Tensor> dq(cfg.heads), dk(cfg.heads), dv(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const auto& hc = b.heads[h];
      const Tensor dout = ops::slice(gp.da, 1, h * dh, (h + 1) * dh);
      auto ga = ops::matmul_vjp(hc.attn, hc.v, dout);
      dv[h] = std::move(ga.db);
      const Tensor dscores = ops::scale(ops::softmax_vjp_from_output(hc.attn, ga.da), attn_scale);
      auto gs = ops::matmul_vjp(hc.q, hc.kt, dscores);
      dq[h] = std::move(gs.da);
      dk[h] = ops::transpose2d(gs.db);
    }
    // The q/k/v slices partition the qkv columns in this order.
    std::vector<Tensor> parts;
    parts.reserve(3 * cfg.heads);
    for (auto* group : {&dq, &dk, &dv})
      for (auto& t : *group) parts.push_back(std::move(t));
    const Tensor dqkv = ops::concat(parts, 1);
    auto gq = ops::matmul_vjp(b.ln1, enc.w(block_key(li, "attn.qkv.weight")), dqkv, true, wg);
    put(block_key(li, "attn.qkv.weight"), std::move(gq.db));
    if (wg) put(block_key(li, "attn.qkv.bias"), ops::add_vjp(dqkv, enc.w(block_key(li, "attn.qkv.bias")), dqkv)[1]);
    auto ln1g = ops::layernorm_vjp(b.x_in, enc.w(block_key(li, "ln1.gain")), gq.da);
    put(block_key(li, "ln1.gain"), std::move(ln1g.dgain));
    put(block_key(li, "ln1.bias"), std::move(ln1g.dbias));
    dx = ops::add(dx_mid, ln1g.dx);
  }

  put("pos_embed", dx);
  const Tensor parts[] = {enc.w("cls_token"), Tensor({cfg.num_patches(), d})};
  auto dtok = ops::concat_vjp(parts, 0, dx);
  put("cls_token", std::move(dtok[0]));
  const Tensor& demb = dtok[1];
  auto gpe = ops::matmul_vjp(c.patches, enc.w("patch_embed.weight"), demb, true, wg);
  put("patch_embed.weight", std::move(gpe.db));
  if (wg) put("patch_embed.bias", ops::add_vjp(demb, enc.w("patch_embed.bias"), demb)[1]);
  const Tensor dpix = ops::embedding_gather_vjp(
      c.pixels, c.patch_idx, gpe.da.reshaped({cfg.num_patches() * cfg.patch_dim(), 1}));
  out.image_grad = dpix.reshaped(cfg.image_shape());
  return out;
}

}  // namespace vit

/// Unit-norm embedding of `image` [C,R,R] with pixels in [0,1].
inline Tensor encode(const Encoder& enc, const Tensor& image) { return vit::forward(enc, image).embedding; }

/// Pixel gradient of <embedding_grad, encode(image)>.
inline Tensor encode_vjp(const Encoder& enc, const Tensor& image, const Tensor& embedding_grad) {
  const auto cache = vit::forward(enc, image);
  return vit::backward(enc, cache, embedding_grad, false).image_grad;
}

// ----------------------------------------------------------------- training

/// Logits of a linear classification head on top of the embedding.
inline Tensor head_logits(const Tensor& embedding, const Tensor& head) {
  return ops::matmul(embedding.reshaped({1, embedding.size()}), head).reshaped({head.dim(1)});
}

/// One plain gradient-descent step on the mean softmax cross-entropy of the
/// batch; updates every encoder weight and the head. Logits are
/// logit_scale * head^T z. Returns the pre-update mean loss.
inline double train_step(Encoder& enc, Tensor& head, std::span<const Tensor> images,
                         std::span<const std::size_t> labels, double lr, double logit_scale = 1.0) {
  if (images.empty()) throw Error(Errc::invalid_argument, "train_step: empty batch");
  if (images.size() != labels.size()) throw Error(Errc::invalid_argument, "train_step: images/labels size mismatch");
  const std::size_t n_classes = head.dim(1);
  if (head.shape() != Shape{enc.config.embed_dim, n_classes}) {
    throw Error(Errc::shape_mismatch, "train_step: head " + shape_str(head.shape()) + " does not match embed_dim");
  }
  WeightMap grads;
  for (const auto& [name, w] : enc.weights) grads.emplace(name, Tensor(w.shape()));
  Tensor head_grad(head.shape());
  double loss = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (labels[i] >= n_classes) {
      throw Error(Errc::out_of_range, "train_step: label " + std::to_string(labels[i]) + " outside [0," +
                                          std::to_string(n_classes) + ")");
    }
    const auto cache = vit::forward(enc, images[i]);
    const Tensor& z = cache.embedding;
    const Tensor prob = ops::softmax_lastdim(ops::scale(head_logits(z, head), logit_scale));
    loss += -std::log(std::max(prob[labels[i]], 1e-300));
    Tensor dlogits = prob;
    dlogits[labels[i]] -= 1.0;
    scale_inplace(dlogits, logit_scale);
    Tensor dz({z.size()});
    for (std::size_t e = 0; e < z.size(); ++e) {
      for (std::size_t k = 0; k < n_classes; ++k) {
        head_grad[e * n_classes + k] += z[e] * dlogits[k];
        dz[e] += head[e * n_classes + k] * dlogits[k];
      }
    }
    auto back = vit::backward(enc, cache, dz, true);
    for (auto& [name, g] : back.weight_grads) axpy(1.0, g, grads.at(name));
  }
  const double inv_b = 1.0 / static_cast<double>(images.size());
  loss *= inv_b;
  if (!std::isfinite(loss)) throw Error(Errc::divergence, "train_step: non-finite loss for encoder " + enc.id);
  if (lr != 0.0) {
    for (auto& [name, w] : enc.weights) axpy(-lr * inv_b, grads.at(name), w);
    axpy(-lr * inv_b, head_grad, head);
  }
  return loss;
}

// ------------------------------------------------------------- weight files

inline constexpr std::string_view kEncoderMagic = "MAV2ENCW";
inline constexpr std::uint32_t kEncoderVersion = 1;

inline void write_encoder(std::ostream& os, const Encoder& enc) {
  os.write(kEncoderMagic.data(), static_cast<std::streamsize>(kEncoderMagic.size()));
  binio::put_u32(os, kEncoderVersion);
  const auto& c = enc.config;
  for (auto v : {c.resolution, c.channels, c.patch_size, c.width, c.depth, c.heads, c.embed_dim}) {
    binio::put_u32(os, static_cast<std::uint32_t>(v));
  }
  for (const auto& [name, t] : enc.weights) {
    binio::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
}

/// Parses a weight stream. Nothing is returned unless every weight implied by
/// the stored config is present with the right shape.
inline Encoder read_encoder(std::istream& is, std::string id) {
  binio::expect_magic(is, kEncoderMagic);
  const auto version = binio::get_u32(is, "encoder version");
  if (version != kEncoderVersion) {
    throw Error(Errc::bad_version, "encoder file version " + std::to_string(version) + " is not supported");
  }
  Encoder enc;
  enc.id = std::move(id);
  auto& c = enc.config;
  for (auto* field : {&c.resolution, &c.channels, &c.patch_size, &c.width, &c.depth, &c.heads, &c.embed_dim}) {
    *field = binio::get_u32(is, "encoder config");
  }
  c.validate();
  const auto expected = weight_shapes(c);
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto len = binio::get_u32(is, "weight name length");
    if (len > 256) throw Error(Errc::invalid_argument, "weight name length " + std::to_string(len) + " is implausible");
    std::string name(len, '\0');
    binio::get_bytes(is, name.data(), len, "weight name");
    if (!expected.contains(name)) throw Error(Errc::invalid_argument, "unexpected weight '" + name + "'");
    enc.weights[name] = read_tensor(is);
  }
  for (const auto& [name, shape] : expected) {
    if (!enc.weights.contains(name)) throw Error(Errc::truncated, "weight file ends before '" + name + "'");
  }
  validate_weights(enc);
  return enc;
}

inline void save_weights(const Encoder& enc, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(Errc::io, "cannot open " + path.string() + " for writing");
  write_encoder(os, enc);
  if (!os) throw Error(Errc::io, "write failed for " + path.string());
}

/// The encoder id is taken from the file stem.
inline Encoder load_weights(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(Errc::io, "cannot open " + path.string());
  return read_encoder(is, path.stem().string());
}

}  // namespace patchstorm
