#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "patchstorm/attack.hpp"
#include "patchstorm/config.hpp"
#include "patchstorm/diagnostics.hpp"
#include "patchstorm/encoder.hpp"
#include "patchstorm/ensemble.hpp"
#include "patchstorm/error.hpp"
#include "patchstorm/image_io.hpp"
#include "patchstorm/tensor_io.hpp"

namespace patchstorm::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"gen-data",         "train-zoo", "attack",
                                                 "profile-transfer", "diagnose",  "eval"};
  return names;
}

/// Files and directories created by a command; removed again unless the
/// command commits.
class OutputSet {
 public:
  OutputSet() = default;
  OutputSet(const OutputSet&) = delete;
  OutputSet& operator=(const OutputSet&) = delete;
  ~OutputSet() {
    if (committed_) return;
    std::error_code ec;
    for (auto it = files_.rbegin(); it != files_.rend(); ++it) fs::remove(*it, ec);
    for (auto it = dirs_.rbegin(); it != dirs_.rend(); ++it) {
      if (fs::is_directory(*it, ec) && fs::is_empty(*it, ec)) fs::remove(*it, ec);
    }
  }

  /// Registers `path` for writing, creating (and recording) missing parents.
  fs::path file(const fs::path& path) {
    make_dirs(path.parent_path());
    files_.push_back(path);
    return path;
  }

  void commit() { committed_ = true; }

 private:
  void make_dirs(const fs::path& dir) {
    if (dir.empty() || fs::exists(dir)) return;
    make_dirs(dir.parent_path());
    fs::create_directory(dir);
    dirs_.push_back(dir);
  }

  std::vector<fs::path> files_;
  std::vector<fs::path> dirs_;
  bool committed_ = false;
};

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text(OutputSet& out, const fs::path& path, const std::string& text) {
  std::ofstream os(out.file(path), std::ios::binary);
  os << text;
  if (!os) throw Error(Errc::io, "cannot write " + path.string());
}

inline void write_json(OutputSet& out, const fs::path& path, const json& j) { write_text(out, path, j.dump(2) + "\n"); }

// ----------------------------------------------------------- artifacts

/// Dataset directory: images.tensor ([n,3,R,R]) and index.csv.
inline void save_dataset(OutputSet& out, const fs::path& dir, const ShapesDataset& ds) {
  const std::size_t n = ds.images.size(), R = ds.resolution;
  Tensor all({n, 3, R, R});
  const std::size_t stride = 3 * R * R;
  for (std::size_t i = 0; i < n; ++i) std::copy_n(ds.images[i].data().begin(), stride, all.data().begin() + i * stride);
  save_tensor(out.file(dir / "images.tensor"), all);
  std::string csv = "index,label,class\n";
  for (std::size_t i = 0; i < n; ++i) {
    csv += std::to_string(i) + "," + std::to_string(ds.labels[i]) + "," + class_name(ds.labels[i]) + "\n";
  }
  write_text(out, dir / "index.csv", csv);
}

inline ShapesDataset load_dataset(const fs::path& dir) {
  const Tensor all = load_tensor(dir / "images.tensor");
  if (all.rank() != 4 || all.dim(1) != 3 || all.dim(2) != all.dim(3)) {
    throw Error(Errc::shape_mismatch, "dataset " + dir.string() + ": images.tensor must be [n,3,R,R], got " +
                                          shape_str(all.shape()));
  }
  ShapesDataset ds;
  ds.resolution = all.dim(2);
  const std::size_t n = all.dim(0), stride = 3 * ds.resolution * ds.resolution;
  std::ifstream in(dir / "index.csv");
  if (!in) throw Error(Errc::io, "dataset " + dir.string() + ": cannot open index.csv");
  std::string line;
  std::getline(in, line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string idx, label;
    std::getline(ls, idx, ',');
    std::getline(ls, label, ',');
    const auto v = detail::parse_int(label);
    if (!v || *v < 0 || static_cast<std::size_t>(*v) >= kShapeClasses) {
      throw Error(Errc::invalid_argument, "dataset index.csv:" + std::to_string(lineno) + ": bad label '" + label + "'");
    }
    ds.labels.push_back(static_cast<std::size_t>(*v));
  }
  if (ds.labels.size() != n) {
    throw Error(Errc::invalid_argument, "dataset " + dir.string() + ": " + std::to_string(n) + " images but " +
                                            std::to_string(ds.labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < n; ++i) {
    Tensor img({3, ds.resolution, ds.resolution});
    std::copy_n(all.data().begin() + i * stride, stride, img.data().begin());
    ds.images.push_back(std::move(img));
  }
  return ds;
}

inline ShapesDataset dataset_or_generate(const RunConfig& rc, const std::string& dir_key, const std::string& n_key,
                                         const std::string& seed_key) {
  const std::string dir = rc.str(dir_key);
  if (!dir.empty()) return load_dataset(dir);
  return gen_shapes(rc.count(n_key), rc.count("resolution"), static_cast<std::uint64_t>(rc.integer(seed_key)));
}

inline Tensor load_image(const fs::path& path) {
  if (path.extension() == ".png") return read_png(path);
  return load_tensor(path);
}

inline std::shared_ptr<const Encoder> load_zoo_encoder(const fs::path& dir, const std::string& id) {
  const fs::path p = dir / (id + ".weights");
  if (!fs::exists(p)) throw Error(Errc::io, "encoder '" + id + "' not found (" + p.string() + ")");
  return std::make_shared<const Encoder>(load_weights(p));
}

inline std::vector<std::shared_ptr<const Encoder>> load_zoo_encoders(const fs::path& dir,
                                                                    const std::vector<std::string>& ids) {
  if (ids.empty()) throw Error(Errc::invalid_argument, "empty encoder list");
  std::vector<std::shared_ptr<const Encoder>> out;
  for (const auto& id : ids) out.push_back(load_zoo_encoder(dir, id));
  return out;
}

/// Ids of the zoo described by zoo_patches x zoo_seeds.
inline std::vector<ZooEntry> zoo_spec(const RunConfig& rc) {
  std::vector<ZooEntry> spec;
  for (const auto& p : rc.list("zoo_patches")) {
    const auto pv = detail::parse_int(p);
    if (!pv || *pv <= 0) throw Error(Errc::type_mismatch, "zoo_patches: '" + p + "' is not a positive integer");
    for (const auto& s : rc.list("zoo_seeds")) {
      const auto sv = detail::parse_int(s);
      if (!sv || *sv < 0) throw Error(Errc::type_mismatch, "zoo_seeds: '" + s + "' is not a non-negative integer");
      EncoderConfig cfg;
      cfg.resolution = rc.count("resolution");
      cfg.patch_size = static_cast<std::size_t>(*pv);
      spec.push_back({cfg, static_cast<std::uint64_t>(*sv)});
    }
  }
  if (spec.empty()) throw Error(Errc::invalid_argument, "zoo_patches x zoo_seeds is empty");
  return spec;
}

struct ImagePair {
  Tensor clean, target;
  std::size_t clean_index = 0, target_index = 0;
};

/// Clean image i is pool[i]; its target is the next unused pool image at or
/// after n whose class differs.
inline std::vector<ImagePair> make_pairs(const ShapesDataset& pool, std::size_t n) {
  std::vector<ImagePair> pairs;
  std::vector<bool> used(pool.images.size(), false);
  for (std::size_t i = 0; i < n; ++i) {
    if (i >= pool.images.size()) throw Error(Errc::invalid_argument, "pair pool too small for " + std::to_string(n) + " pairs");
    std::size_t j = n;
    while (j < pool.images.size() && (used[j] || pool.labels[j] == pool.labels[i])) ++j;
    if (j >= pool.images.size()) {
      throw Error(Errc::invalid_argument, "pair pool too small for " + std::to_string(n) + " pairs");
    }
    used[j] = true;
    pairs.push_back({pool.images[i], pool.images[j], i, j});
  }
  return pairs;
}

inline std::vector<ImagePair> pairs_from_config(const RunConfig& rc, std::size_t n) {
  if (!rc.str("clean").empty() || !rc.str("target").empty()) {
    ImagePair p{load_image(rc.required("clean", "attack")), load_image(rc.required("target", "attack")), 0, 0};
    return {p};
  }
  return make_pairs(dataset_or_generate(rc, "pairs_dataset", "pair_pool", "pair_seed"), n);
}

inline json attack_config_json(const AttackConfig& c) {
  return json{{"epsilon", c.epsilon},
              {"step_size", c.step_size},
              {"iterations", c.iterations},
              {"K", c.K},
              {"P", c.P},
              {"lambda", c.lambda},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eta", c.eta},
              {"gamma", c.gamma},
              {"variant", to_string(c.variant)},
              {"target_schedule", to_string(c.target_schedule)},
              {"crop_scale", {c.crop_params.scale_lo, c.crop_params.scale_hi}},
              {"mild_scale", {c.mild_params.scale_lo, c.mild_params.scale_hi}},
              {"mild_flip_prob", c.mild_params.flip_prob},
              {"mild_max_rotation", c.mild_params.max_rotation},
              {"seed", c.seed}};
}

inline unsigned threads_of(const RunConfig& rc) {
  return static_cast<unsigned>(std::max<std::int64_t>(1, rc.integer("threads")));
}

// ------------------------------------------------------------- commands

inline void cmd_gen_data(const RunConfig& rc, OutputSet& out, std::ostream& log) {
  const auto ds = gen_shapes(rc.count("n_images"), rc.count("resolution"), static_cast<std::uint64_t>(rc.integer("data_seed")),
                             rc.boolean("stratified"));
  save_dataset(out, rc.out_dir() / "dataset", ds);
  log << "wrote " << ds.images.size() << " images to " << (rc.out_dir() / "dataset").string() << "\n";
}

inline void cmd_train_zoo(const RunConfig& rc, OutputSet& out, std::ostream& log) {
  const ShapesDataset ds = dataset_or_generate(rc, "dataset", "n_images", "data_seed");
  const auto spec = zoo_spec(rc);
  TrainOptions opt;
  opt.epochs = rc.count("epochs");
  opt.lr = rc.real("lr");
  opt.batch = rc.count("batch");
  opt.logit_scale = rc.real("logit_scale");
  opt.cosine_decay = rc.boolean("cosine_decay");
  opt.threads = threads_of(rc);
  const Zoo zoo = build_zoo(spec, ds, opt);
  const fs::path dir = rc.zoo_dir();
  for (std::size_t i = 0; i < zoo.encoders.size(); ++i) {
    save_weights(zoo.encoders[i], out.file(dir / (zoo.encoders[i].id + ".weights")));
    save_tensor(out.file(dir / (zoo.encoders[i].id + ".head.tensor")), zoo.heads[i]);
  }
  std::string csv = "id,epoch,loss,accuracy\n";
  for (const auto& r : zoo.log) csv += r.id + "," + std::to_string(r.epoch) + "," + num(r.loss) + "," + num(r.accuracy) + "\n";
  write_text(out, dir / "train_log.csv", csv);
  for (const auto& r : zoo.log) {
    if (r.epoch == opt.epochs) log << r.id << ": loss " << num(r.loss) << " accuracy " << num(r.accuracy) << "\n";
  }
}

inline fs::path attack_dir(const RunConfig& rc) {
  const std::string d = rc.str("attack_dir");
  return d.empty() ? rc.out_dir() / "attack" : fs::path(d);
}

inline std::string pair_dir_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "pair_%03zu", i);
  return buf;
}

inline void cmd_attack(const RunConfig& rc, OutputSet& out, std::ostream& log) {
  const AttackConfig base = attack_config(rc);
  const auto ids = rc.list("ensemble");
  const auto encoders = load_zoo_encoders(rc.zoo_dir(), ids);
  const auto pairs = pairs_from_config(rc, rc.count("num_pairs"));
  std::vector<AuxRetrieval> aux(pairs.size());
  if (base.P > 0) {
    const ShapesDataset pool = dataset_or_generate(rc, "aux_dataset", "aux_pool", "aux_seed");
    const auto retr = load_zoo_encoder(rc.zoo_dir(), rc.str("retrieval_encoder"));
    for (std::size_t i = 0; i < pairs.size(); ++i) aux[i] = retrieve_aux(pool.images, pairs[i].target, *retr, base.P);
  }
  const unsigned threads = threads_of(rc);
  std::vector<AttackResult> results(pairs.size());
  parallel_for(pairs.size(), pairs.size() > 1 ? threads : 1u, [&](std::size_t i) {
    AttackConfig cfg = base;
    cfg.seed = base.seed + i;
    cfg.threads = pairs.size() > 1 ? 1u : threads;
    TargetContext ctx;
    ctx.target = pairs[i].target;
    ctx.aux = aux[i].aux;
    ctx.encoders = encoders;
    results[i] = run_attack(cfg, pairs[i].clean, ctx);
  });

  const fs::path dir = attack_dir(rc);
  json pairs_json = json::array();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const fs::path pd = dir / pair_dir_name(i);
    const auto& r = results[i];
    write_png(out.file(pd / "adv.png"), r.x_adv);
    save_tensor(out.file(pd / "adv.tensor"), r.x_adv);
    save_tensor(out.file(pd / "clean.tensor"), pairs[i].clean);
    save_tensor(out.file(pd / "target.tensor"), pairs[i].target);
    std::string csv = "iter,loss\n";
    for (std::size_t t = 0; t < r.loss_trace.size(); ++t) csv += std::to_string(t + 1) + "," + num(r.loss_trace[t]) + "\n";
    write_text(out, pd / "loss.csv", csv);
    const double linf = max_abs_diff(r.x_adv, pairs[i].clean);
    json pj{{"pair", i},
            {"dir", pair_dir_name(i)},
            {"seed", r.seed},
            {"clean_index", pairs[i].clean_index},
            {"target_index", pairs[i].target_index},
            {"initial_loss", r.loss_trace.front()},
            {"final_loss", r.loss_trace.back()},
            {"linf_255", linf * 255.0},
            {"aux_indices", aux[i].indices},
            {"delta_hat", aux[i].delta_hat}};
    write_json(out, pd / "summary.json", pj);
    pairs_json.push_back(pj);
  }
  write_json(out, dir / "summary.json",
             json{{"preset", rc.str("preset")},
                  {"ensemble", ids},
                  {"config", attack_config_json(base)},
                  {"pairs", pairs_json}});
  log << "attacked " << pairs.size() << " pair(s) with " << ids.size() << " encoder(s) into " << dir.string() << "\n";
}

struct EvalRow {
  double cs_target = 0.0, cs_clean = 0.0, l1 = 0.0, l2 = 0.0;
  bool success = false;
};

/// Toy success: the victim embedding of x_adv is closer to the target than to the clean image.
inline EvalRow evaluate_pair(const Encoder& victim, const Tensor& adv, const Tensor& clean, const Tensor& target) {
  EvalRow r;
  const Tensor za = encode(victim, adv);
  r.cs_target = cosine_similarity(za.data(), encode(victim, target).data());
  r.cs_clean = cosine_similarity(za.data(), encode(victim, clean).data());
  r.success = r.cs_target > r.cs_clean;
  double s1 = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < adv.size(); ++i) {
    const double d = adv[i] - clean[i];
    s1 += std::abs(d);
    s2 += d * d;
  }
  const double n = static_cast<double>(adv.size());
  r.l1 = s1 / n;
  r.l2 = std::sqrt(s2 / n);
  return r;
}

inline void cmd_eval(const RunConfig& rc, OutputSet& out, std::ostream& log) {
  const std::string victim_id = rc.required("victim", "eval");
  const fs::path dir = attack_dir(rc);
  std::ifstream in(dir / "summary.json");
  if (!in) throw Error(Errc::io, "eval: cannot open " + (dir / "summary.json").string());
  json summary;
  try {
    summary = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, "eval: malformed " + (dir / "summary.json").string() + ": " + e.what());
  }
  const auto ensemble = summary.at("ensemble").get<std::vector<std::string>>();
  if (std::find(ensemble.begin(), ensemble.end(), victim_id) != ensemble.end()) {
    throw Error(Errc::invalid_argument, "eval: victim '" + victim_id + "' is part of the attack ensemble");
  }
  const auto victim = load_zoo_encoder(rc.zoo_dir(), victim_id);
  std::string csv = "pair,cs_target,cs_clean,success,l1,l2\n";
  std::size_t wins = 0, n = 0;
  double l1 = 0.0, l2 = 0.0;
  for (const auto& p : summary.at("pairs")) {
    const fs::path pd = dir / p.at("dir").get<std::string>();
    const EvalRow r = evaluate_pair(*victim, load_tensor(pd / "adv.tensor"), load_tensor(pd / "clean.tensor"),
                                    load_tensor(pd / "target.tensor"));
    csv += std::to_string(n) + "," + num(r.cs_target) + "," + num(r.cs_clean) + "," + (r.success ? "1" : "0") + "," +
           num(r.l1) + "," + num(r.l2) + "\n";
    wins += r.success ? 1 : 0;
    l1 += r.l1;
    l2 += r.l2;
    ++n;
  }
  if (n == 0) throw Error(Errc::invalid_argument, "eval: attack summary lists no pairs");
  const fs::path ed = dir / ("eval-" + victim_id);
  write_text(out, ed / "eval.csv", csv);
  const double asr = static_cast<double>(wins) / static_cast<double>(n);
  write_json(out, ed / "eval.json",
             json{{"victim", victim_id},
                  {"ensemble", ensemble},
                  {"pairs", n},
                  {"toy_asr", asr},
                  {"mean_l1", l1 / static_cast<double>(n)},
                  {"mean_l2", l2 / static_cast<double>(n)}});
  log << "victim " << victim_id << ": toy-ASR " << num(asr) << " over " << n << " pairs\n";
}

inline void cmd_profile_transfer(const RunConfig& rc, OutputSet& out, std::ostream& log) {
  std::vector<std::string> ids;
  const std::string victim = rc.str("victim");
  for (const auto& e : zoo_spec(rc)) {
    const std::string id = zoo_id(e.config, e.seed);
    if (id != victim) ids.push_back(id);
  }
  const auto zoo = load_zoo_encoders(rc.zoo_dir(), ids);
  const auto pairs = make_pairs(dataset_or_generate(rc, "pairs_dataset", "pair_pool", "pair_seed"), rc.count("profile_images"));
  std::vector<Tensor> images, targets;
  for (const auto& p : pairs) {
    images.push_back(p.clean);
    targets.push_back(p.target);
  }
  const TransferMatrix tm = transfer_matrix(zoo, images, targets, rc.count("profile_steps"),
                                            static_cast<int>(rc.integer("epsilon")), threads_of(rc),
                                            static_cast<std::uint64_t>(rc.integer("seed")));
  std::string csv = "attacked_with";
  for (const auto& id : tm.ids) csv += "," + id;
  csv += ",self_gain,row_average";
  for (const auto& [p, col] : tm.group_average) csv += ",avg_p" + std::to_string(p);
  csv += "\n";
  for (std::size_t s = 0; s < tm.size(); ++s) {
    csv += tm.ids[s];
    for (std::size_t e = 0; e < tm.size(); ++e) csv += "," + (tm.entries[s][e] ? num(*tm.entries[s][e]) : std::string("NA"));
    csv += "," + num(tm.self_gain[s]) + "," + num(tm.row_average[s]);
    for (const auto& [p, col] : tm.group_average) csv += "," + (col[s] ? num(*col[s]) : std::string("NA"));
    csv += "\n";
  }
  const fs::path dir = rc.out_dir() / "profile";
  write_text(out, dir / "transfer.csv", csv);
  const auto chosen = select_pe_plus(tm, rc.count("pe_plus_k"));
  json scores = json::object();
  for (std::size_t s = 0; s < tm.size(); ++s) scores[tm.ids[s]] = tm.row_average[s];
  write_json(out, dir / "pe_plus.json",
             json{{"k", rc.count("pe_plus_k")}, {"excluded", victim}, {"selected", chosen}, {"row_average", scores}});
  log << "PE+ selection:";
  for (const auto& c : chosen) log << " " << c;
  log << "\n";
}

inline void cmd_diagnose(const RunConfig& rc, OutputSet& out, std::ostream& log) {
  const auto enc = load_zoo_encoder(rc.zoo_dir(), rc.str("diag_encoder"));
  const unsigned threads = threads_of(rc);
  const std::size_t runs = std::max<std::size_t>(1, rc.count("diag_runs"));
  const auto pairs = make_pairs(dataset_or_generate(rc, "pairs_dataset", "pair_pool", "pair_seed"), runs);
  const std::uint64_t seed = static_cast<std::uint64_t>(rc.integer("seed"));
  const fs::path dir = rc.out_dir() / "diagnose";

  // Gradient cosine against crop overlap.
  std::string iou_csv = "run,iou,cosine\n";
  std::vector<IouRow> all_rows;
  std::size_t skipped = 0;
  for (std::size_t r = 0; r < runs; ++r) {
    Rng rng(seed + r, stream_id(0x10C, r));
    const auto study = grad_similarity_vs_iou(*enc, pairs[r].clean, encode(*enc, pairs[r].target),
                                              rc.count("iou_pairs"), rng, {}, threads);
    for (const auto& row : study.rows) iou_csv += std::to_string(r) + "," + num(row.iou) + "," + num(row.cosine) + "\n";
    all_rows.insert(all_rows.end(), study.rows.begin(), study.rows.end());
    skipped += study.skipped;
  }
  write_text(out, dir / "iou.csv", iou_csv);
  std::string bucket_csv = "iou_lo,iou_hi,mean_cosine\n";
  for (auto [lo, hi] : {std::pair{0.9, 1.0}, {0.7, 0.9}, {0.4, 0.6}}) {
    const auto m = bucket_mean(all_rows, lo, hi);
    bucket_csv += num(lo) + "," + num(hi) + "," + (m ? num(*m) : std::string("NA")) + "\n";
  }
  write_text(out, dir / "iou_buckets.csv", bucket_csv);

  // Consecutive-gradient cosine and loss traces at K = 1 and K = variance_K.
  const std::size_t k_many = std::max<std::size_t>(2, rc.count("variance_K"));
  std::string cons_csv = "K,run,iter,cos_consecutive\n", conv_csv = "K,run,iter,loss\n";
  for (std::size_t K : {std::size_t{1}, k_many}) {
    std::vector<AttackResult> res(runs);
    parallel_for(runs, threads, [&](std::size_t r) {
      AttackConfig cfg = preset("no-ata");
      cfg.K = K;
      cfg.iterations = rc.count("diag_iterations");
      cfg.seed = seed + r;
      cfg.record_grads = true;
      TargetContext ctx;
      ctx.target = pairs[r].target;
      ctx.encoders = {enc};
      res[r] = run_attack(cfg, pairs[r].clean, ctx);
    });
    for (std::size_t r = 0; r < runs; ++r) {
      const auto series = consecutive_grad_similarity(res[r]);
      for (std::size_t t = 0; t < series.size(); ++t) {
        cons_csv += std::to_string(K) + "," + std::to_string(r) + "," + std::to_string(t + 1) + "," + num(series[t]) + "\n";
      }
      for (std::size_t t = 0; t < res[r].loss_trace.size(); ++t) {
        conv_csv += std::to_string(K) + "," + std::to_string(r) + "," + std::to_string(t + 1) + "," +
                    num(res[r].loss_trace[t]) + "\n";
      }
    }
  }
  write_text(out, dir / "consecutive.csv", cons_csv);
  write_text(out, dir / "convergence.csv", conv_csv);

  // Averaged-crop variance at the clean image, against a 20x larger crop sample mean.
  TargetContext vctx;
  vctx.target = pairs[0].target;
  vctx.encoders = {enc};
  vctx.mild = MildTransformParams::identity();
  Rng vrng(seed, stream_id(0x7A2, 0));
  const McaGradient ref = mca_ata_gradient(pairs[0].clean, vctx, 20 * k_many, {}, vrng, threads);
  const McaGradient sample = mca_ata_gradient(pairs[0].clean, vctx, k_many, {}, vrng, threads);
  const VarianceReport vr = variance_stats(std::span<const CropGradRecord>(sample.records), &ref.g);
  const std::string pbar = vr.p_bar_hat ? num(*vr.p_bar_hat) : std::string("NA");
  write_text(out, dir / "variance.csv",
             "K,sigma2_hat,p_bar_hat,var_mean,var_mean_expansion,bound\n" + std::to_string(vr.K) + "," +
                 num(vr.sigma2_hat) + "," + pbar + "," + num(vr.var_mean) + "," + num(vr.var_mean_expansion) + "," +
                 num(vr.bound) + "\n");
  write_json(out, dir / "variance.json",
             json{{"K", vr.K},
                  {"sigma2_hat", vr.sigma2_hat},
                  {"p_bar_hat", vr.p_bar_hat ? json(*vr.p_bar_hat) : json(nullptr)},
                  {"var_mean", vr.var_mean},
                  {"var_mean_expansion", vr.var_mean_expansion},
                  {"bound", vr.bound}});

  // Embedding drift: radical crops of the target vs mild views of retrieved aux anchors.
  const ShapesDataset pool = dataset_or_generate(rc, "aux_dataset", "aux_pool", "aux_seed");
  const auto retr = load_zoo_encoder(rc.zoo_dir(), rc.str("retrieval_encoder"));
  const std::size_t P = std::max<std::size_t>(1, rc.count("P"));
  const AuxRetrieval aux = retrieve_aux(pool.images, pairs[0].target, *retr, P);
  Rng drng(seed, stream_id(0xD21F7, 0));
  const DriftReport dr = drift_stats(*enc, pairs[0].target, aux.aux, {0.5, 1.0}, {}, rc.count("drift_samples"), drng, threads);
  write_text(out, dir / "drift.csv",
             "samples,drift_radical,drift_mild_aux,delta_hat\n" + std::to_string(dr.samples) + "," +
                 num(dr.drift_radical) + "," + num(dr.drift_mild_aux) + "," + num(dr.delta_hat) + "\n");
  write_json(out, dir / "drift.json",
             json{{"samples", dr.samples},
                  {"drift_radical", dr.drift_radical},
                  {"drift_mild_aux", dr.drift_mild_aux},
                  {"delta_hat", dr.delta_hat}});

  // Cost model over the configured zoo.
  std::vector<EncoderConfig> configs;
  std::set<std::size_t> seen;
  for (const auto& e : zoo_spec(rc))
    if (seen.insert(e.config.patch_size).second) configs.push_back(e.config);
  EncoderConfig reference;
  reference.resolution = rc.count("resolution");
  std::string flops_csv = "patch_size,tokens,width,layer_flops\n";
  for (const auto& c : configs) {
    flops_csv += std::to_string(c.patch_size) + "," + std::to_string(c.tokens()) + "," + std::to_string(c.width) + "," +
                 num(layer_flops(c)) + "\n";
  }
  flops_csv += "\nK,P,rho,total\n";
  for (std::size_t p = 0; p <= 3; ++p) {
    const auto est = flops_estimate(configs, k_many, p, reference);
    flops_csv += std::to_string(k_many) + "," + std::to_string(p) + "," + num(est.rho) + "," + num(est.total) + "\n";
  }
  write_text(out, dir / "flops.csv", flops_csv);
  log << "diagnostics written to " << dir.string() << " (" << all_rows.size() << " IoU rows, " << skipped
      << " skipped)\n";
}

/// Runs one command in-process. Outputs are removed if it throws.
inline void run_command(const std::string& name, const RunConfig& rc, std::ostream& log) {
  OutputSet out;
  if (name == "gen-data") {
    cmd_gen_data(rc, out, log);
  } else if (name == "train-zoo") {
    cmd_train_zoo(rc, out, log);
  } else if (name == "attack") {
    cmd_attack(rc, out, log);
  } else if (name == "profile-transfer") {
    cmd_profile_transfer(rc, out, log);
  } else if (name == "diagnose") {
    cmd_diagnose(rc, out, log);
  } else if (name == "eval") {
    cmd_eval(rc, out, log);
  } else {
    throw Error(Errc::invalid_argument, "unknown command '" + name + "'");
  }
  out.commit();
}

/// 1 for problems with the user's input, 2 for failures inside the engine.
inline int exit_code_for(Errc code) {
  switch (code) {
    case Errc::divergence:
    case Errc::non_finite: return 2;
    default: return 1;
  }
}

}  // namespace patchstorm::cli
