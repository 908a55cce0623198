#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mocomsi/augment/augment.hpp"
#include "mocomsi/classifier/aggregate.hpp"
#include "mocomsi/classifier/baseline.hpp"
#include "mocomsi/classifier/head.hpp"
#include "mocomsi/core/error.hpp"
#include "mocomsi/core/hash.hpp"
#include "mocomsi/datasets/synthetic.hpp"
#include "mocomsi/embeddings/groups.hpp"
#include "mocomsi/moco/moco.hpp"

namespace mocomsi {

struct EvalConfig {
  double threshold = 0.5;
  Aggregation aggregation = Aggregation::kMeanProb;
  // Grouped method: aggregate extrapolated patch probabilities instead of
  // group probabilities.
  bool patient_from_patches = false;
  int balanced_per_class = 15;
};

struct RunConfig {
  std::string manifest;  // empty: use the synthetic dataset under output_dir
  SyntheticConfig synthetic;
  AugmentConfig augment;
  EncoderConfig encoder;
  Stage1Config stage1;
  GroupingPolicy grouping;  // training groups; validation always tiles with `validation_remainder`
  Remainder validation_remainder = Remainder::kDrop;
  HeadConfig head;
  bool head_input_dim_set = false;
  BaselineConfig baseline;
  EvalConfig eval;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs";

  int group_length() const { return grouping.group_length(encoder.output_dim); }

  // Cross-section checks; runs before any compute.
  void validate() const {
    synthetic.validate();
    augment.validate();
    encoder.validate();
    stage1.validate();
    grouping.validate();
    head.validate();
    baseline.validate();
    if (head.input_dim != group_length()) {
      throw ConfigError("head.input_dim = " + std::to_string(head.input_dim) + " but group_size * output_dim = " +
                        std::to_string(grouping.group_size) + " * " + std::to_string(encoder.output_dim) + " = " +
                        std::to_string(group_length()));
    }
    if (!(eval.threshold >= 0.0 && eval.threshold <= 1.0)) throw ConfigError("eval.threshold must lie in [0, 1]");
    if (eval.balanced_per_class < 1) throw ConfigError("eval.balanced_per_class must be positive");
    if (seeds.empty()) throw ConfigError("run.seeds must not be empty");
  }
};

namespace config_detail {

template <typename T>
std::vector<T> parse_list(const std::string& s) {
  std::vector<T> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    std::istringstream is(item);
    T v;
    if (!(is >> v) || !is.eof()) throw ConfigError("bad list element '" + item + "'");
    out.push_back(v);
  }
  return out;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("bad boolean '" + s + "'");
}

template <typename T>
T parse_scalar(const std::string& key, const std::string& s) {
  std::istringstream is(s);
  T v;
  if (!(is >> v) || !(is >> std::ws).eof()) throw ConfigError("config key " + key + ": cannot parse '" + s + "'");
  return v;
}

}  // namespace config_detail

// Applies one "section.key = value" assignment. Unknown keys are errors.
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  using namespace config_detail;
  auto num = [&](auto& field) { field = parse_scalar<std::remove_reference_t<decltype(field)>>(key, value); };
  auto flag = [&](bool& field) { field = parse_bool(value); };

  if (key == "dataset.manifest") c.manifest = value;
  else if (key == "dataset.train_patients_per_class") num(c.synthetic.train_patients_per_class);
  else if (key == "dataset.validation_patients_per_class") num(c.synthetic.validation_patients_per_class);
  else if (key == "dataset.min_patches") num(c.synthetic.min_patches);
  else if (key == "dataset.max_patches") num(c.synthetic.max_patches);
  else if (key == "dataset.patch_size") num(c.synthetic.patch_size);
  else if (key == "dataset.signal_fraction") num(c.synthetic.signal_fraction);
  else if (key == "dataset.noise_level") num(c.synthetic.noise_level);
  else if (key == "dataset.texture_strength") num(c.synthetic.texture_strength);
  else if (key == "dataset.seed") num(c.synthetic.seed);
  else if (key == "augment.crop_scale") {
    auto v = parse_list<double>(value);
    if (v.size() != 2) throw ConfigError("augment.crop_scale expects lo,hi");
    c.augment.crop_scale_lo = v[0];
    c.augment.crop_scale_hi = v[1];
  } else if (key == "augment.output_size") num(c.augment.output_size);
  else if (key == "augment.jitter_strength") num(c.augment.jitter_strength);
  else if (key == "augment.jitter_prob") num(c.augment.jitter_prob);
  else if (key == "augment.grayscale_prob") num(c.augment.grayscale_prob);
  else if (key == "augment.blur_prob") num(c.augment.blur_prob);
  else if (key == "augment.hflip_prob") num(c.augment.hflip_prob);
  else if (key == "augment.mean" || key == "augment.std") {
    auto v = parse_list<double>(value);
    if (v.size() != 3) throw ConfigError(key + " expects three values");
    auto& dst = key == "augment.mean" ? c.augment.mean : c.augment.std;
    std::copy(v.begin(), v.end(), dst.begin());
  } else if (key == "augment.seed") num(c.augment.seed);
  else if (key == "encoder.backbone") c.encoder.backbone = parse_backbone(value);
  else if (key == "encoder.output_dim") num(c.encoder.output_dim);
  else if (key == "encoder.projection_dim") num(c.encoder.projection_dim);
  else if (key == "encoder.mlp_projection") flag(c.encoder.mlp_projection);
  else if (key == "encoder.tiny_widths") c.encoder.tiny_widths = parse_list<int>(value);
  else if (key == "encoder.resnet_width") num(c.encoder.resnet_width);
  else if (key == "stage1.queue_size") num(c.stage1.queue_size);
  else if (key == "stage1.momentum") num(c.stage1.momentum);
  else if (key == "stage1.temperature") num(c.stage1.temperature);
  else if (key == "stage1.batch_size") num(c.stage1.batch_size);
  else if (key == "stage1.epochs") num(c.stage1.epochs);
  else if (key == "stage1.base_lr") num(c.stage1.base_lr);
  else if (key == "stage1.weight_decay") num(c.stage1.weight_decay);
  else if (key == "stage1.sgd_momentum") num(c.stage1.sgd_momentum);
  else if (key == "stage1.seed") num(c.stage1.seed);
  else if (key == "grouping.group_size") num(c.grouping.group_size);
  else if (key == "grouping.remainder") c.grouping.remainder = parse_remainder(value);
  else if (key == "grouping.validation_remainder") c.validation_remainder = parse_remainder(value);
  else if (key == "grouping.shuffle_each_epoch") flag(c.grouping.shuffle_each_epoch);
  else if (key == "head.input_dim") {
    num(c.head.input_dim);
    c.head_input_dim_set = true;
  } else if (key == "head.hidden_dims") c.head.hidden_dims = parse_list<int>(value);
  else if (key == "head.dropout") num(c.head.dropout);
  else if (key == "head.standardize_inputs") flag(c.head.standardize_inputs);
  else if (key == "head.epochs") num(c.head.epochs);
  else if (key == "head.batch_size") num(c.head.batch_size);
  else if (key == "head.base_lr") num(c.head.base_lr);
  else if (key == "head.weight_decay") num(c.head.weight_decay);
  else if (key == "head.sgd_momentum") num(c.head.sgd_momentum);
  else if (key == "baseline.epochs") num(c.baseline.epochs);
  else if (key == "baseline.batch_size") num(c.baseline.batch_size);
  else if (key == "baseline.base_lr") num(c.baseline.base_lr);
  else if (key == "baseline.weight_decay") num(c.baseline.weight_decay);
  else if (key == "baseline.sgd_momentum") num(c.baseline.sgd_momentum);
  else if (key == "baseline.hflip_prob") num(c.baseline.hflip_prob);
  else if (key == "eval.threshold") num(c.eval.threshold);
  else if (key == "eval.aggregation") c.eval.aggregation = parse_aggregation(value);
  else if (key == "eval.patient_from_patches") flag(c.eval.patient_from_patches);
  else if (key == "eval.balanced_per_class") num(c.eval.balanced_per_class);
  else if (key == "run.seeds") c.seeds = parse_list<std::uint64_t>(value);
  else if (key == "run.output_dir") c.output_dir = value;
  else throw ConfigError("unknown config key '" + key + "'");
}

// Fills derived fields: head.input_dim follows n_g * n_o unless set explicitly.
inline void finalize(RunConfig& c) {
  if (!c.head_input_dim_set) c.head.input_dim = c.group_length();
}

// INI-style file: [section] headers and key = value lines; ';' or '#' comments.
inline RunConfig load_run_config(const std::filesystem::path& path,
                                 const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  RunConfig c;
  if (!path.empty()) {
    if (!std::filesystem::exists(path)) throw IngestError("config file not found: " + path.string());
    boost::property_tree::ptree tree;
    try {
      boost::property_tree::ini_parser::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ParseError(std::string("config: ") + e.what());
    }
    for (const auto& [section, body] : tree) {
      if (body.empty()) throw ConfigError("config: top-level key '" + section + "' outside a section");
      for (const auto& [key, value] : body) apply_setting(c, section + "." + key, value.data());
    }
    // Relative manifest paths are relative to the config file.
    if (!c.manifest.empty() && std::filesystem::path(c.manifest).is_relative()) {
      c.manifest = (path.parent_path() / c.manifest).string();
    }
  }
  for (const auto& [k, v] : overrides) apply_setting(c, k, v);
  if (const char* root = std::getenv("MOCOMSI_OUTPUT_ROOT"); root && *root) {
    bool flag_override = false;
    for (const auto& kv : overrides) flag_override |= kv.first == "run.output_dir";
    if (!flag_override) c.output_dir = root;
  }
  finalize(c);
  c.validate();
  return c;
}

inline nlohmann::json augment_json(const AugmentConfig& a) {
  return {{"crop_scale", {a.crop_scale_lo, a.crop_scale_hi}},
          {"crop_ratio", {a.crop_ratio_lo, a.crop_ratio_hi}},
          {"output_size", a.output_size},
          {"jitter_strength", a.jitter_strength},
          {"jitter_prob", a.jitter_prob},
          {"grayscale_prob", a.grayscale_prob},
          {"blur_prob", a.blur_prob},
          {"blur_sigma", {a.blur_sigma_lo, a.blur_sigma_hi}},
          {"hflip_prob", a.hflip_prob},
          {"mean", a.mean},
          {"std", a.std},
          {"seed", a.seed}};
}

inline nlohmann::json synthetic_json(const SyntheticConfig& s) {
  return {{"train_patients_per_class", s.train_patients_per_class},
          {"validation_patients_per_class", s.validation_patients_per_class},
          {"min_patches", s.min_patches},
          {"max_patches", s.max_patches},
          {"patch_size", s.patch_size},
          {"signal_fraction", s.signal_fraction},
          {"noise_level", s.noise_level},
          {"texture_strength", s.texture_strength},
          {"seed", s.seed},
          {"generator_version", kSyntheticGeneratorVersion}};
}

inline nlohmann::json eval_json(const EvalConfig& e) {
  return {{"threshold", e.threshold},
          {"aggregation", to_string(e.aggregation)},
          {"patient_from_patches", e.patient_from_patches},
          {"balanced_per_class", e.balanced_per_class}};
}

// Content hashes for each stage. Each hash folds in its upstream hash, so a
// change anywhere upstream moves every downstream artifact directory.
struct StageHashes {
  std::string data, stage1, embed, head, baseline, eval;
};

inline std::string short_hash(const nlohmann::json& j) { return sha256_hex(j.dump()).substr(0, 12); }

inline StageHashes stage_hashes(const RunConfig& c) {
  StageHashes h;
  h.data = c.manifest.empty() ? short_hash({{"synthetic", synthetic_json(c.synthetic)}})
                              : short_hash({{"manifest", std::filesystem::absolute(c.manifest).string()},
                                            {"content", sha256_file(c.manifest)}});
  h.stage1 = short_hash({{"data", h.data}, {"encoder", c.encoder}, {"stage1", c.stage1}, {"augment", augment_json(c.augment)}});
  h.embed = short_hash({{"stage1", h.stage1}});
  nlohmann::json grouping = c.grouping;
  grouping.erase("seed");
  h.head = short_hash({{"embed", h.embed}, {"grouping", grouping}, {"validation_remainder", to_string(c.validation_remainder)},
                       {"head", [&] { nlohmann::json j = c.head; j.erase("seed"); return j; }()}});
  h.baseline = short_hash({{"data", h.data}, {"encoder", c.encoder}, {"input_size", c.augment.output_size},
                           {"norm", {c.augment.mean, c.augment.std}},
                           {"baseline", [&] { nlohmann::json j = c.baseline; j.erase("seed"); return j; }()}});
  h.eval = short_hash({{"head", h.head}, {"baseline", h.baseline}, {"eval", eval_json(c.eval)}});
  return h;
}

inline std::string config_hash(const RunConfig& c) {
  return short_hash({{"stages", {stage_hashes(c).eval}}, {"seeds", c.seeds}});
}

}  // namespace mocomsi
