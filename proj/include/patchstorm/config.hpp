#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "patchstorm/attack.hpp"
#include "patchstorm/error.hpp"

namespace patchstorm {

enum class KeyType { integer, real, boolean, string, list };

inline std::string_view to_string(KeyType t) {
  switch (t) {
    case KeyType::integer: return "integer";
    case KeyType::real: return "real";
    case KeyType::boolean: return "boolean";
    case KeyType::string: return "string";
    case KeyType::list: return "list";
  }
  return "?";
}

struct KeySpec {
  std::string name;
  KeyType type;
  std::string default_value;
  std::string help;
};

// Attack keys default to the v2-default preset; a preset only fills the
// attack keys that neither the file nor a flag set.
inline const std::vector<KeySpec>& key_registry() {
  using K = KeyType;
  static const std::vector<KeySpec> keys = {
      {"out_dir", K::string, "out", "output directory"},
      {"zoo_dir", K::string, "", "encoder weight directory (default <out_dir>/zoo)"},
      {"threads", K::integer, "1", "worker threads"},
      {"seed", K::integer, "0", "base attack seed; pair i uses seed + i"},

      {"dataset", K::string, "", "dataset directory for train-zoo (empty: generate)"},
      {"n_images", K::integer, "2400", "generated dataset size"},
      {"resolution", K::integer, "32", "image side length"},
      {"data_seed", K::integer, "7", "generated dataset seed"},
      {"stratified", K::boolean, "false", "cycle labels through every class"},

      {"zoo_patches", K::list, "4,8,16", "patch sizes of the zoo"},
      {"zoo_seeds", K::list, "1,2", "init seeds per patch size"},
      {"epochs", K::integer, "5", "training epochs"},
      {"lr", K::real, "0.02", "initial learning rate"},
      {"batch", K::integer, "8", "minibatch size"},
      {"logit_scale", K::real, "10", "multiplier on head logits during training"},
      {"cosine_decay", K::boolean, "true", "cosine learning-rate decay to zero"},

      {"pairs_dataset", K::string, "", "dataset directory supplying clean/target pairs (empty: generate)"},
      {"pair_pool", K::integer, "200", "generated pair-pool size"},
      {"pair_seed", K::integer, "11", "generated pair-pool seed"},
      {"num_pairs", K::integer, "20", "clean/target pairs per run"},
      {"clean", K::string, "", "single clean image (.png or .tensor); overrides the pair pool"},
      {"target", K::string, "", "single target image (.png or .tensor)"},

      {"aux_dataset", K::string, "", "aux retrieval pool directory (empty: generate)"},
      {"aux_pool", K::integer, "1000", "generated aux-pool size"},
      {"aux_seed", K::integer, "13", "generated aux-pool seed"},
      {"retrieval_encoder", K::string, "vit-p16-s1", "encoder id used for aux retrieval"},

      {"preset", K::string, "v2-default", "v2-default | v1-baseline | no-mca | no-ata | no-pm"},
      {"ensemble", K::list, "vit-p4-s1,vit-p8-s1,vit-p16-s1", "surrogate encoder ids"},
      {"epsilon", K::integer, "16", "l-inf budget in 1/255 units"},
      {"step_size", K::real, "1.275", "step size in 1/255 units"},
      {"iterations", K::integer, "300", "attack iterations"},
      {"K", K::integer, "10", "crops per iteration"},
      {"P", K::integer, "2", "aux anchors"},
      {"lambda", K::real, "0.3", "aux weight"},
      {"beta1", K::real, "0.9", "first-moment decay"},
      {"beta2", K::real, "0.99", "second-moment decay"},
      {"eta", K::real, "1e-08", "denominator stabilizer"},
      {"gamma", K::real, "1", "sign-momentum decay (mifgsm)"},
      {"variant", K::string, "adam", "adam | mifgsm | vanilla"},
      {"target_schedule", K::string, "mild", "mild | radical_alternate"},
      {"crop_scale_lo", K::real, "0.5", "source crop area fraction, low"},
      {"crop_scale_hi", K::real, "1", "source crop area fraction, high"},
      {"mild_scale_lo", K::real, "0.9", "target crop area fraction, low"},
      {"mild_scale_hi", K::real, "1", "target crop area fraction, high"},
      {"mild_flip_prob", K::real, "0.5", "target horizontal flip probability"},
      {"mild_max_rotation", K::real, "15", "target rotation range in degrees"},

      {"profile_images", K::integer, "8", "pairs used by profile-transfer"},
      {"profile_steps", K::integer, "20", "attack steps per profiling run"},
      {"pe_plus_k", K::integer, "3", "PE+ ensemble size"},

      {"attack_dir", K::string, "", "attack output to evaluate (default <out_dir>/attack)"},
      {"victim", K::string, "", "held-out victim encoder id (required by eval)"},

      {"diag_encoder", K::string, "vit-p8-s1", "encoder id used by diagnose"},
      {"iou_pairs", K::integer, "200", "crop pairs for the IoU study"},
      {"diag_runs", K::integer, "3", "seeded runs for the convergence and consecutive-gradient studies"},
      {"diag_iterations", K::integer, "100", "iterations per diagnostic run"},
      {"variance_K", K::integer, "10", "crops per variance sample"},
      {"drift_samples", K::integer, "500", "samples for the drift study"},
  };
  return keys;
}

inline const KeySpec* find_key(std::string_view name) {
  for (const auto& k : key_registry())
    if (k.name == name) return &k;
  return nullptr;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::optional<std::int64_t> parse_int(const std::string& s) {
  std::int64_t v = 0;
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || p != end || s.empty()) return std::nullopt;
  return v;
}

inline std::optional<double> parse_real(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::optional<bool> parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  return std::nullopt;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const std::string item = trim(std::string_view(s).substr(start, comma == std::string::npos ? std::string::npos
                                                                                                 : comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace detail

enum class ConfigSource { fallback, file, flag };

/// Typed key/value settings with provenance per key.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : key_registry()) values_[k.name] = {k.default_value, ConfigSource::fallback};
  }

  /// `where` is prefixed to error messages ("line 3", "flag --epsilon").
  void set(const std::string& key, const std::string& raw, ConfigSource src, const std::string& where) {
    const KeySpec* spec = find_key(key);
    if (!spec) throw Error(Errc::unknown_key, where + ": unknown key '" + key + "'");
    const std::string value = detail::trim(raw);
    bool ok = true;
    switch (spec->type) {
      case KeyType::integer: ok = detail::parse_int(value).has_value(); break;
      case KeyType::real: ok = detail::parse_real(value).has_value(); break;
      case KeyType::boolean: ok = detail::parse_bool(value).has_value(); break;
      case KeyType::string: break;
      case KeyType::list: break;
    }
    if (!ok) {
      throw Error(Errc::type_mismatch, where + ": key '" + key + "' expects " + std::string(to_string(spec->type)) +
                                           ", got '" + value + "'");
    }
    values_[key] = {value, src};
  }

  ConfigSource source(const std::string& key) const { return entry(key).second; }
  const std::string& raw(const std::string& key) const { return entry(key).first; }

  std::int64_t integer(const std::string& key) const { return *detail::parse_int(typed(key, KeyType::integer)); }
  double real(const std::string& key) const { return *detail::parse_real(typed(key, KeyType::real)); }
  bool boolean(const std::string& key) const { return *detail::parse_bool(typed(key, KeyType::boolean)); }
  std::string str(const std::string& key) const { return typed(key, KeyType::string); }
  std::vector<std::string> list(const std::string& key) const { return detail::split_list(typed(key, KeyType::list)); }

  /// Non-negative integer, with the key named on failure.
  std::size_t count(const std::string& key) const {
    const auto v = integer(key);
    if (v < 0) throw Error(Errc::invalid_argument, "key '" + key + "' must be >= 0, got " + std::to_string(v));
    return static_cast<std::size_t>(v);
  }

  /// Non-empty string or a missing_key error naming the command.
  std::string required(const std::string& key, std::string_view command) const {
    std::string v = str(key);
    if (v.empty()) throw Error(Errc::missing_key, std::string(command) + ": required key '" + key + "' is not set");
    return v;
  }

  std::filesystem::path out_dir() const { return str("out_dir"); }
  std::filesystem::path zoo_dir() const {
    const std::string z = str("zoo_dir");
    return z.empty() ? out_dir() / "zoo" : std::filesystem::path(z);
  }

  const std::map<std::string, std::pair<std::string, ConfigSource>>& values() const { return values_; }

 private:
  const std::pair<std::string, ConfigSource>& entry(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw Error(Errc::unknown_key, "unknown key '" + key + "'");
    return it->second;
  }

  const std::string& typed(const std::string& key, KeyType t) const {
    const KeySpec* spec = find_key(key);
    if (!spec) throw Error(Errc::unknown_key, "unknown key '" + key + "'");
    if (spec->type != t) {
      throw Error(Errc::type_mismatch, "key '" + key + "' is " + std::string(to_string(spec->type)) + ", read as " +
                                           std::string(to_string(t)));
    }
    return entry(key).first;
  }

  std::map<std::string, std::pair<std::string, ConfigSource>> values_;
};

/// Parses flat `key = value` text; `#` starts a comment.
inline void apply_config_text(RunConfig& rc, std::istream& in, const std::string& origin) {
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = detail::trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw Error(Errc::invalid_argument, where + ": expected 'key = value'");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    if (key.empty()) throw Error(Errc::invalid_argument, where + ": missing key before '='");
    if (auto it = seen.find(key); it != seen.end()) {
      throw Error(Errc::invalid_argument, where + ": key '" + key + "' already set on line " + std::to_string(it->second));
    }
    seen[key] = lineno;
    rc.set(key, body.substr(eq + 1), ConfigSource::file, where);
  }
}

/// Precedence: flag > file > preset > built-in default.
inline RunConfig load_config(const std::optional<std::filesystem::path>& path,
                             const std::vector<std::pair<std::string, std::string>>& flag_overrides) {
  RunConfig rc;
  if (path) {
    std::ifstream in(*path);
    if (!in) throw Error(Errc::io, "cannot open config file " + path->string());
    apply_config_text(rc, in, path->string());
  }
  for (const auto& [k, v] : flag_overrides) rc.set(k, v, ConfigSource::flag, "flag --" + k);
  return rc;
}

inline Variant parse_variant(const std::string& s) {
  if (s == "adam") return Variant::adam;
  if (s == "mifgsm") return Variant::mifgsm;
  if (s == "vanilla") return Variant::vanilla;
  throw Error(Errc::invalid_argument, "variant must be adam, mifgsm or vanilla, got '" + s + "'");
}

inline TargetSchedule parse_schedule(const std::string& s) {
  if (s == "mild") return TargetSchedule::mild;
  if (s == "radical_alternate") return TargetSchedule::radical_alternate;
  throw Error(Errc::invalid_argument, "target_schedule must be mild or radical_alternate, got '" + s + "'");
}

/// Preset values for attack keys left at their defaults, then explicit keys.
inline AttackConfig attack_config(const RunConfig& rc) {
  AttackConfig c = preset(rc.str("preset"));
  auto set = [&](const std::string& key) { return rc.source(key) == ConfigSource::file || rc.source(key) == ConfigSource::flag; };
  if (set("epsilon")) c.epsilon = static_cast<int>(rc.integer("epsilon"));
  if (set("step_size")) c.step_size = rc.real("step_size");
  if (set("iterations")) c.iterations = rc.count("iterations");
  if (set("K")) c.K = rc.count("K");
  if (set("P")) c.P = rc.count("P");
  if (set("lambda")) c.lambda = rc.real("lambda");
  if (set("beta1")) c.beta1 = rc.real("beta1");
  if (set("beta2")) c.beta2 = rc.real("beta2");
  if (set("eta")) c.eta = rc.real("eta");
  if (set("gamma")) c.gamma = rc.real("gamma");
  if (set("variant")) c.variant = parse_variant(rc.str("variant"));
  if (set("target_schedule")) c.target_schedule = parse_schedule(rc.str("target_schedule"));
  if (set("crop_scale_lo")) c.crop_params.scale_lo = rc.real("crop_scale_lo");
  if (set("crop_scale_hi")) c.crop_params.scale_hi = rc.real("crop_scale_hi");
  if (set("mild_scale_lo")) c.mild_params.scale_lo = rc.real("mild_scale_lo");
  if (set("mild_scale_hi")) c.mild_params.scale_hi = rc.real("mild_scale_hi");
  if (set("mild_flip_prob")) c.mild_params.flip_prob = rc.real("mild_flip_prob");
  if (set("mild_max_rotation")) c.mild_params.max_rotation = rc.real("mild_max_rotation");
  c.seed = static_cast<std::uint64_t>(rc.integer("seed"));
  c.threads = static_cast<unsigned>(std::max<std::int64_t>(1, rc.integer("threads")));
  c.validate();
  return c;
}

}  // namespace patchstorm
