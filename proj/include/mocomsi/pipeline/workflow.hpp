#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <iostream>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "mocomsi/core/checkpoint.hpp"
#include "mocomsi/datasets/balanced_subset.hpp"
#include "mocomsi/datasets/manifest.hpp"
#include "mocomsi/datasets/synthetic.hpp"
#include "mocomsi/pipeline/config.hpp"
#include "mocomsi/pipeline/evaluate.hpp"
#include "mocomsi/pipeline/plot.hpp"

namespace mocomsi {

enum class Method { kGrouped, kBaseline };

inline std::string to_string(Method m) { return m == Method::kGrouped ? "grouped" : "baseline"; }
inline Method parse_method(const std::string& s) {
  if (s == "grouped" || s == "ours") return Method::kGrouped;
  if (s == "baseline") return Method::kBaseline;
  throw ConfigError("unknown method '" + s + "' (expected grouped or baseline)");
}

// Artifact layout under output_dir. Every stage directory carries the stage's
// content hash so a config change never reuses stale files.
class Workspace {
 public:
  explicit Workspace(RunConfig cfg) : cfg_(std::move(cfg)), hashes_(compute_hashes(cfg_)) {}

  const RunConfig& config() const { return cfg_; }
  const StageHashes& hashes() const { return hashes_; }
  fs::path root() const { return cfg_.output_dir; }

  fs::path data_dir() const { return root() / ("data-" + hashes_.data); }
  fs::path stage1_dir() const { return root() / ("stage1-" + hashes_.stage1); }
  fs::path embed_dir() const { return root() / ("embed-" + hashes_.embed); }
  fs::path head_dir(std::uint64_t seed) const { return root() / ("head-" + hashes_.head) / seed_dir(seed); }
  fs::path baseline_dir(std::uint64_t seed) const {
    return root() / ("baseline-" + hashes_.baseline) / seed_dir(seed);
  }
  fs::path eval_root() const { return root() / ("eval-" + hashes_.eval); }
  fs::path eval_dir(std::uint64_t seed, Method m, bool balanced) const {
    return eval_root() / seed_dir(seed) / (to_string(m) + (balanced ? "-balanced" : ""));
  }
  fs::path compare_dir(bool balanced) const { return eval_root() / (balanced ? "compare-balanced" : "compare"); }

  fs::path manifest_path() const { return cfg_.manifest.empty() ? data_dir() / "manifest.tsv" : fs::path(cfg_.manifest); }
  fs::path encoder_path() const { return stage1_dir() / "encoder.ckpt"; }
  fs::path store_prefix(Split s) const { return embed_dir() / std::string(to_string(s)); }
  fs::path head_path(std::uint64_t seed) const { return head_dir(seed) / "head.ckpt"; }
  fs::path baseline_path(std::uint64_t seed) const { return baseline_dir(seed) / "baseline.ckpt"; }
  fs::path report_path(std::uint64_t seed, Method m, bool balanced) const {
    return eval_dir(seed, m, balanced) / "report.json";
  }

  static std::string seed_dir(std::uint64_t seed) { return "seed-" + std::to_string(seed); }

 private:
  static StageHashes compute_hashes(const RunConfig& c) {
    // The manifest content hash needs the file; a missing one surfaces later
    // as a dependency error from the stage that reads it.
    if (!c.manifest.empty() && !fs::exists(c.manifest)) throw DependencyError("manifest not found: " + c.manifest);
    return stage_hashes(c);
  }

  RunConfig cfg_;
  StageHashes hashes_;
};

using Logger = std::function<void(const std::string&)>;

inline Logger stderr_logger() {
  return [](const std::string& s) { std::cerr << s << '\n'; };
}

namespace workflow_detail {

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IngestError("cannot create directory " + p.string() + ": " + ec.message());
}

inline void require_file(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) throw DependencyError("missing upstream artifact " + p.string() + " (run " + producer + " first)");
}

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IngestError("cannot write " + p.string());
  out << s;
}

inline void write_log(const fs::path& dir, const std::string& command, const Workspace& ws,
                      std::optional<std::uint64_t> seed, double seconds, nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json j = {{"command", command},
                      {"config_hash", config_hash(ws.config())},
                      {"seed", seed ? nlohmann::json(*seed) : nlohmann::json(nullptr)},
                      {"wall_time_s", seconds}};
  for (auto& [k, v] : extra.items()) j[k] = v;
  write_text(dir / "run_log.json", j.dump(2) + "\n");
}

inline void write_epoch_curve(const fs::path& p, const std::vector<EpochStats>& curve) {
  std::ofstream out(p);
  if (!out) throw IngestError("cannot write " + p.string());
  out << "#epoch train_loss train_accuracy val_accuracy\n";
  char buf[128];
  for (const auto& s : curve) {
    std::snprintf(buf, sizeof buf, "%d %.9g %.9g %.9g\n", s.epoch, s.train_loss, s.train_accuracy, s.val_accuracy);
    out << buf;
  }
}

inline void write_roc(const fs::path& p, const std::vector<RocPoint>& pts) {
  std::ofstream out(p);
  if (!out) throw IngestError("cannot write " + p.string());
  out << "#fpr tpr\n";
  char buf[96];
  for (const auto& r : pts) {
    std::snprintf(buf, sizeof buf, "%.9g %.9g\n", r.fpr, r.tpr);
    out << buf;
  }
}

inline void write_units(const fs::path& p, const std::vector<UnitProbability>& units) {
  std::ofstream out(p);
  if (!out) throw IngestError("cannot write " + p.string());
  out << "unit_id\tpatient_id\tp_msi\n";
  char buf[48];
  for (const auto& u : units) {
    std::snprintf(buf, sizeof buf, "%.9g", u.p_msi);
    out << u.unit_id << '\t' << u.patient_id << '\t' << buf << '\n';
  }
}

inline void write_patients(const fs::path& p, const std::vector<PatientPrediction>& preds) {
  std::ofstream out(p);
  if (!out) throw IngestError("cannot write " + p.string());
  out << "patient_id\tp_w\tprediction\n";
  char buf[48];
  for (const auto& r : preds) {
    std::snprintf(buf, sizeof buf, "%.9g", r.p_w);
    out << r.patient_id << '\t' << buf << '\t' << to_string(r.c_w) << '\n';
  }
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace workflow_detail

inline DatasetManifest open_manifest(const Workspace& ws) {
  const auto path = ws.manifest_path();
  workflow_detail::require_file(path, ws.config().manifest.empty() ? "synth" : "data preparation");
  return load_manifest(path);
}

// synth: writes the synthetic dataset into the content-addressed data dir.
inline fs::path run_synth(const Workspace& ws, const Logger& log = {}) {
  if (!ws.config().manifest.empty()) throw ConfigError("synth: dataset.manifest is set; nothing to synthesize");
  workflow_detail::Stopwatch sw;
  const auto ds = generate_synthetic(ws.config().synthetic, ws.data_dir());
  workflow_detail::write_log(ws.data_dir(), "synth", ws, std::nullopt, sw.seconds(),
                             {{"synthetic", synthetic_json(ws.config().synthetic)}});
  if (log) {
    const auto& m = ds.manifest;
    char buf[256];
    std::snprintf(buf, sizeof buf, "train: %zu MSS / %zu MSI patients, validation: %zu MSS / %zu MSI patients, %zu patches",
                  m.tally(Split::kTrain, Label::kMss).patients, m.tally(Split::kTrain, Label::kMsi).patients,
                  m.tally(Split::kValidation, Label::kMss).patients, m.tally(Split::kValidation, Label::kMsi).patients,
                  m.entries.size());
    log(buf);
  }
  return ds.manifest_path;
}

inline Stage1Result run_stage1(const Workspace& ws, const Logger& log = {}) {
  workflow_detail::Stopwatch sw;
  const auto& c = ws.config();
  const auto manifest = open_manifest(ws);
  const auto train = load_patients(manifest, Split::kTrain);
  auto result = train_moco(train, c.encoder, c.stage1, c.augment, [&](int epoch, double loss) {
    if (log) log("stage1 epoch " + std::to_string(epoch) + "/" + std::to_string(c.stage1.epochs) + " loss " + std::to_string(loss));
  });
  workflow_detail::ensure_dir(ws.stage1_dir());
  write_checkpoint(ws.encoder_path(), result.checkpoint);
  std::string curve = "#epoch mean_loss\n";
  for (std::size_t i = 0; i < result.loss_curve.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%zu %.9g\n", i + 1, result.loss_curve[i]);
    curve += buf;
  }
  workflow_detail::write_text(ws.stage1_dir() / "loss_curve.tsv", curve);
  workflow_detail::write_log(ws.stage1_dir(), "train-stage1", ws, c.stage1.seed, sw.seconds(),
                             {{"best_epoch", result.best_epoch}, {"encoder_fingerprint", result.checkpoint.fingerprint()}});
  return result;
}

// extract: frozen encoder over both splits.
inline void run_extract(const Workspace& ws, const Logger& log = {}) {
  workflow_detail::Stopwatch sw;
  workflow_detail::require_file(ws.encoder_path(), "train-stage1");
  const auto ckpt = read_checkpoint(ws.encoder_path());
  const auto manifest = open_manifest(ws);
  auto encoder = load_encoder(ckpt);
  const auto before = Sha256().update_values(std::span<const float>(ckpt.values)).hex();
  workflow_detail::ensure_dir(ws.embed_dir());
  for (Split s : {Split::kTrain, Split::kValidation}) {
    const auto store = extract_embeddings(encoder, ckpt.fingerprint(), load_patients(manifest, s),
                                          ws.config().augment.output_size, ws.config().augment);
    write_store(store, ws.store_prefix(s));
    if (log) log("extract " + std::string(to_string(s)) + ": " + std::to_string(store.total_rows()) + " embeddings");
  }
  auto after_state = encoder_state(encoder);
  if (Sha256().update_values(std::span<const float>(after_state)).hex() != before) {
    throw IntegrityError("encoder weights changed during extraction");
  }
  workflow_detail::write_log(ws.embed_dir(), "extract", ws, std::nullopt, sw.seconds(),
                             {{"encoder_fingerprint", ckpt.fingerprint()}});
}

inline EmbeddingStore open_store(const Workspace& ws, Split s) {
  const auto prefix = ws.store_prefix(s);
  workflow_detail::require_file(StorePaths::at(prefix).index, "extract");
  workflow_detail::require_file(StorePaths::at(prefix).matrix, "extract");
  return read_store(prefix);
}

// Validation groups are fixed: no shuffling, remainder per config.
inline GroupingPolicy validation_policy(const RunConfig& c) {
  GroupingPolicy p = c.grouping;
  p.remainder = c.validation_remainder;
  p.shuffle_each_epoch = false;
  return p;
}

inline GroupingPolicy training_policy(const RunConfig& c, std::uint64_t seed) {
  GroupingPolicy p = c.grouping;
  p.seed = seed;
  return p;
}

struct HeadRun {
  Checkpoint checkpoint;
  std::vector<EpochStats> curve;
};

inline HeadRun run_train_head(const Workspace& ws, std::uint64_t seed, const Logger& log = {}) {
  workflow_detail::Stopwatch sw;
  const auto& c = ws.config();
  const auto train = open_store(ws, Split::kTrain);
  const auto val = open_store(ws, Split::kValidation);
  if (train.dim != c.encoder.output_dim) {
    throw IntegrityError("embedding width " + std::to_string(train.dim) + " differs from encoder.output_dim " +
                         std::to_string(c.encoder.output_dim));
  }
  HeadConfig hc = c.head;
  hc.seed = seed;
  GroupHead head(hc);
  const auto policy = training_policy(c, seed);
  const auto val_groups = make_groups(val, validation_policy(c), 0);
  auto result = train_head(head, [&](int epoch) { return make_groups(train, policy, epoch); }, val_groups);
  HeadRun run{make_head_checkpoint(head, policy, train.dim, train.encoder_fingerprint, result.curve), result.curve};
  workflow_detail::ensure_dir(ws.head_dir(seed));
  write_checkpoint(ws.head_path(seed), run.checkpoint);
  workflow_detail::write_epoch_curve(ws.head_dir(seed) / "curve.tsv", run.curve);
  workflow_detail::write_log(ws.head_dir(seed), "train-head", ws, seed, sw.seconds());
  if (log && !run.curve.empty()) {
    log("head seed " + std::to_string(seed) + ": final train loss " + std::to_string(run.curve.back().train_loss) +
        ", validation group accuracy " + std::to_string(run.curve.back().val_accuracy));
  }
  return run;
}

struct BaselineRun {
  Checkpoint checkpoint;
  std::vector<EpochStats> curve;
};

inline BaselineRun run_train_baseline(const Workspace& ws, std::uint64_t seed, const Logger& log = {}) {
  workflow_detail::Stopwatch sw;
  const auto& c = ws.config();
  const auto manifest = open_manifest(ws);
  const auto train = load_patients(manifest, Split::kTrain);
  const auto val = load_patients(manifest, Split::kValidation);
  BaselineConfig bc = c.baseline;
  bc.seed = seed;
  PatchClassifier model(c.encoder, seed);
  auto result = train_baseline(model, train, bc, c.augment.output_size, c.augment, val);
  BaselineRun run{make_baseline_checkpoint(model, bc, result.curve), result.curve};
  workflow_detail::ensure_dir(ws.baseline_dir(seed));
  write_checkpoint(ws.baseline_path(seed), run.checkpoint);
  workflow_detail::write_epoch_curve(ws.baseline_dir(seed) / "curve.tsv", run.curve);
  workflow_detail::write_log(ws.baseline_dir(seed), "train-baseline", ws, seed, sw.seconds());
  if (log && !run.curve.empty()) {
    log("baseline seed " + std::to_string(seed) + ": final train loss " + std::to_string(run.curve.back().train_loss) +
        ", validation patch accuracy " + std::to_string(run.curve.back().val_accuracy));
  }
  return run;
}

// Patient ids of the balanced validation subset.
inline std::unordered_set<std::string> balanced_patients(const Workspace& ws, const DatasetManifest& manifest) {
  const auto subset = build_balanced_subset(manifest, static_cast<std::size_t>(ws.config().eval.balanced_per_class));
  std::unordered_set<std::string> ids;
  for (const auto& e : subset.entries) ids.insert(e.patient_id);
  return ids;
}

inline void write_evaluation(const fs::path& dir, const Evaluation& ev) {
  workflow_detail::ensure_dir(dir);
  write_report(ev.report, dir / "report.json");
  workflow_detail::write_units(dir / "predictions.tsv", ev.units);
  workflow_detail::write_units(dir / "patch_predictions.tsv", ev.patches);
  workflow_detail::write_patients(dir / "patients.tsv", ev.patients);
  workflow_detail::write_roc(dir / "roc_patch.tsv", ev.report.roc_patch);
  workflow_detail::write_roc(dir / "roc_patient.tsv", ev.report.roc_patient);
}

inline EvalReport run_eval(const Workspace& ws, std::uint64_t seed, Method method, bool balanced, const Logger& log = {}) {
  workflow_detail::Stopwatch sw;
  const auto& c = ws.config();
  std::optional<std::unordered_set<std::string>> keep;
  if (balanced) keep = balanced_patients(ws, open_manifest(ws));

  Evaluation ev;
  if (method == Method::kGrouped) {
    workflow_detail::require_file(ws.head_path(seed), "train-head");
    const auto ckpt = read_checkpoint(ws.head_path(seed));
    auto head = load_head(ckpt);
    auto val = open_store(ws, Split::kValidation);
    if (ckpt.header.value("encoder_fingerprint", "") != val.encoder_fingerprint) {
      throw IntegrityError("head was trained on embeddings from a different encoder");
    }
    if (keep) std::erase_if(val.patients, [&](const PatientEmbeddings& p) { return !keep->count(p.patient_id); });
    const auto groups = make_groups(val, validation_policy(c), 0);
    ev = evaluate_grouped(head, groups, labels_of(val), c.eval.threshold, c.eval.aggregation, c.eval.patient_from_patches,
                          seed);
  } else {
    workflow_detail::require_file(ws.baseline_path(seed), "train-baseline");
    auto model = load_baseline(read_checkpoint(ws.baseline_path(seed)));
    auto manifest = open_manifest(ws);
    if (keep) manifest = restrict_to(manifest, *keep);
    const auto val = load_patients(manifest, Split::kValidation);
    ev = evaluate_baseline(model, val, c.augment.output_size, c.augment, c.eval.threshold, c.eval.aggregation, seed);
  }
  ev.report.balanced = balanced;
  const auto dir = ws.eval_dir(seed, method, balanced);
  write_evaluation(dir, ev);
  workflow_detail::write_log(dir, "eval", ws, seed, sw.seconds(), {{"method", to_string(method)}, {"balanced", balanced}});
  if (log) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "%s seed %llu: A_patient %.4f  A_patch %.4f  AUC_patient %.4f", to_string(method).c_str(),
                  static_cast<unsigned long long>(seed), ev.report.a_patient, ev.report.a_patch, ev.report.auc_patient);
    log(buf);
  }
  return ev.report;
}

inline std::vector<EvalReport> read_reports(const std::vector<fs::path>& paths) {
  std::vector<EvalReport> out;
  for (const auto& p : paths) {
    workflow_detail::require_file(p, "eval");
    out.push_back(read_report(p));
  }
  return out;
}

// Mean ROC over runs on a common fpr grid (step interpolation upward).
inline Series mean_roc(const std::string& name, const std::vector<EvalReport>& reports, bool patient_level) {
  Series s;
  s.name = name;
  constexpr int kGrid = 101;
  for (int i = 0; i < kGrid; ++i) {
    const double f = static_cast<double>(i) / (kGrid - 1);
    double sum = 0.0;
    for (const auto& r : reports) {
      const auto& pts = patient_level ? r.roc_patient : r.roc_patch;
      double tpr = 0.0;
      for (const auto& p : pts)
        if (p.fpr <= f + 1e-12) tpr = std::max(tpr, p.tpr);
      sum += tpr;
    }
    s.x.push_back(f);
    s.y.push_back(reports.empty() ? 0.0 : sum / static_cast<double>(reports.size()));
  }
  return s;
}

// Reads the validation-accuracy column of a curve.tsv file.
inline Series accuracy_curve(const std::string& name, const fs::path& curve_tsv) {
  auto cols = read_columns(curve_tsv);
  if (cols.size() < 3) throw ParseError("curve file has no validation column: " + curve_tsv.string());
  auto s = cols[2];
  s.name = name;
  return s;
}

struct CompareOutputs {
  MultiRunSummary summary;
  std::string table;
  std::vector<fs::path> plots;
};

// Writes summary.json, comparison.txt and the overlay plots into `out_dir`.
// `curves_a`/`curves_b` may be empty when the training curves are unknown.
inline CompareOutputs compare_reports(const std::vector<EvalReport>& a, const std::vector<EvalReport>& b, const fs::path& out_dir,
                                      const std::vector<fs::path>& curves_a = {}, const std::vector<fs::path>& curves_b = {}) {
  CompareOutputs out;
  out.summary = summarize_runs(a, b);
  out.table = format_comparison(out.summary);
  workflow_detail::ensure_dir(out_dir);
  workflow_detail::write_text(out_dir / "summary.json", nlohmann::json(out.summary).dump(2) + "\n");
  workflow_detail::write_text(out_dir / "comparison.txt", out.table);
  const auto& na = out.summary.method_a;
  const auto& nb = out.summary.method_b;
  for (bool patient : {true, false}) {
    const auto p = out_dir / (patient ? "roc_patient.svg" : "roc_patch.svg");
    write_line_plot(p, patient ? "Patient-level ROC (mean over runs)" : "Patch-level ROC (mean over runs)",
                    "false positive rate", "true positive rate", {mean_roc(na, a, patient), mean_roc(nb, b, patient)}, true);
    out.plots.push_back(p);
  }
  std::vector<Series> curves;
  for (std::size_t i = 0; i < curves_a.size(); ++i)
    if (fs::exists(curves_a[i])) curves.push_back(accuracy_curve(na + " #" + std::to_string(i), curves_a[i]));
  for (std::size_t i = 0; i < curves_b.size(); ++i)
    if (fs::exists(curves_b[i])) curves.push_back(accuracy_curve(nb + " #" + std::to_string(i), curves_b[i]));
  if (!curves.empty()) {
    const auto p = out_dir / "accuracy_curves.svg";
    write_line_plot(p, "Validation accuracy per epoch", "epoch", "accuracy", curves);
    out.plots.push_back(p);
  }
  return out;
}

// compare over the configured seeds: grouped vs baseline.
inline CompareOutputs run_compare(const Workspace& ws, bool balanced) {
  std::vector<fs::path> ra, rb, ca, cb;
  for (auto seed : ws.config().seeds) {
    ra.push_back(ws.report_path(seed, Method::kGrouped, balanced));
    rb.push_back(ws.report_path(seed, Method::kBaseline, balanced));
    ca.push_back(ws.head_dir(seed) / "curve.tsv");
    cb.push_back(ws.baseline_dir(seed) / "curve.tsv");
  }
  return compare_reports(read_reports(ra), read_reports(rb), ws.compare_dir(balanced), ca, cb);
}

}  // namespace mocomsi
