#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "mocomsi/augment/augment.hpp"
#include "mocomsi/classifier/aggregate.hpp"
#include "mocomsi/classifier/head.hpp"
#include "mocomsi/core/checkpoint.hpp"
#include "mocomsi/datasets/manifest.hpp"
#include "mocomsi/moco/moco.hpp"
#include "mocomsi/nn/backbone.hpp"
#include "mocomsi/nn/optim.hpp"

namespace mocomsi {

// Supervised per-patch classifier trained on inherited patient labels.
struct BaselineConfig {
  int epochs = 100;
  int batch_size = 64;
  double base_lr = 0.03;
  double weight_decay = 1e-4;
  double sgd_momentum = 0.9;
  double hflip_prob = 0.5;  // the only training-time augmentation
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0) throw ConfigError("baseline: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("baseline: batch_size must be positive");
    if (!(base_lr > 0.0)) throw ConfigError("baseline: base_lr must be positive");
    if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) throw ConfigError("baseline: hflip_prob must lie in [0, 1]");
  }
};

inline void to_json(nlohmann::json& j, const BaselineConfig& c) {
  j = {{"epochs", c.epochs},       {"batch_size", c.batch_size},     {"base_lr", c.base_lr},
       {"weight_decay", c.weight_decay}, {"sgd_momentum", c.sgd_momentum}, {"hflip_prob", c.hflip_prob},
       {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, BaselineConfig& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("base_lr").get_to(c.base_lr);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("sgd_momentum").get_to(c.sgd_momentum);
  j.at("hflip_prob").get_to(c.hflip_prob);
  j.at("seed").get_to(c.seed);
}

// Same backbone family as the contrastive encoder, randomly initialized, with
// a linear 2-way classifier on top.
class PatchClassifier {
 public:
  PatchClassifier(const EncoderConfig& enc, std::uint64_t seed)
      : enc_(enc), backbone_(Encoder<float>(enc, seed).backbone()) {
    auto gen = RngStream(seed).split(0x636c66).engine();
    classifier_.emplace<nn::Linear<float>>(enc.output_dim, 2, gen);
  }

  const EncoderConfig& encoder_config() const { return enc_; }

  nn::Tensor<float> forward(const nn::Tensor<float>& x, nn::Pass pass) {
    return classifier_.forward(backbone_.forward(x, pass), pass);
  }
  void backward(const nn::Tensor<float>& g) { backbone_.backward(classifier_.backward(g)); }
  std::vector<nn::Parameter<float>*> parameters() {
    auto p = nn::parameters_of(backbone_);
    classifier_.parameters(p);
    return p;
  }
  void zero_grad() {
    nn::zero_grad(backbone_);
    nn::zero_grad(classifier_);
  }
  std::vector<float> state() {
    auto s = nn::flatten_state(backbone_);
    auto c = nn::flatten_state(classifier_);
    s.insert(s.end(), c.begin(), c.end());
    return s;
  }
  void load(const std::vector<float>& flat) {
    const auto nb = nn::flatten_state(backbone_).size();
    if (flat.size() < nb) throw IntegrityError("baseline state too short");
    nn::load_state(backbone_, std::vector<float>(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(nb)));
    nn::load_state(classifier_, std::vector<float>(flat.begin() + static_cast<std::ptrdiff_t>(nb), flat.end()));
  }

 private:
  EncoderConfig enc_;
  nn::Sequential<float> backbone_;
  nn::Sequential<float> classifier_;
};

// Per-patch MSI probability for every patch of the given patients.
inline std::vector<PatchProbability> predict_patches(PatchClassifier& model, const std::vector<PatientRecord>& patients,
                                                     int input_size, const AugmentConfig& norm, int batch_size = 64) {
  std::vector<PatchProbability> out;
  for (const auto& p : patients) {
    for (std::size_t b = 0; b < p.patches.size(); b += static_cast<std::size_t>(batch_size)) {
      const auto e = std::min(p.patches.size(), b + static_cast<std::size_t>(batch_size));
      std::vector<View> views;
      for (std::size_t i = b; i < e; ++i) views.push_back(eval_transform(p.patches[i], input_size, norm));
      const auto logits = model.forward(nn::stack(views), nn::Pass::eval());
      for (std::size_t i = b; i < e; ++i) {
        out.push_back({p.patches[i].patch_id, p.patient_id, nn::positive_probability(logits.item(static_cast<int>(i - b)))});
      }
    }
  }
  return out;
}

inline double patch_label_accuracy(const std::vector<PatchProbability>& probs, const std::vector<PatientRecord>& patients,
                                   double t = 0.5) {
  std::unordered_map<std::string, Label> label;
  for (const auto& p : patients) label[p.patient_id] = p.label;
  std::size_t correct = 0;
  for (const auto& pp : probs) correct += (pp.p_msi >= t) == (label.at(pp.patient_id) == Label::kMsi);
  return probs.empty() ? std::numeric_limits<double>::quiet_NaN()
                       : static_cast<double>(correct) / static_cast<double>(probs.size());
}

struct BaselineTrainResult {
  std::vector<EpochStats> curve;
};

inline BaselineTrainResult train_baseline(PatchClassifier& model, const std::vector<PatientRecord>& train,
                                          const BaselineConfig& cfg, int input_size, const AugmentConfig& norm,
                                          const std::vector<PatientRecord>& validation = {}) {
  cfg.validate();
  struct Item {
    const Raster* image;
    int label;
  };
  std::vector<Item> items;
  for (const auto& p : train)
    for (const auto& patch : p.patches) items.push_back({&patch.image, index_of(patch.label)});
  if (items.empty()) throw ConfigError("baseline: no training patches");

  AugmentConfig flip = norm;
  flip.output_size = input_size;
  flip.crop_scale_lo = flip.crop_scale_hi = 1.0;
  flip.jitter_strength = 0.0;
  flip.grayscale_prob = flip.blur_prob = 0.0;
  flip.hflip_prob = cfg.hflip_prob;

  nn::Sgd<float> opt(cfg.sgd_momentum, cfg.weight_decay);
  auto params = model.parameters();
  const RngStream root = RngStream(cfg.seed).split(0x62617365);
  BaselineTrainResult result;
  std::vector<std::size_t> order(items.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto epoch_stream = root.split(static_cast<std::uint64_t>(epoch));
    auto gen = epoch_stream.engine();
    shuffle(order.begin(), order.end(), gen);
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < items.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const auto e = std::min(items.size(), b + static_cast<std::size_t>(cfg.batch_size));
      std::vector<View> views;
      std::vector<int> y;
      for (std::size_t i = b; i < e; ++i) {
        views.push_back(augment_view(*items[order[i]].image, flip, epoch_stream.split(i + 1)));
        y.push_back(items[order[i]].label);
      }
      const auto logits = model.forward(nn::stack(views), nn::Pass::train());
      auto lg = nn::softmax_cross_entropy(logits, y);
      if (!std::isfinite(lg.loss)) throw TrainingFault("non-finite baseline loss", epoch);
      for (int i = 0; i < logits.dim(0); ++i)
        correct += (nn::positive_probability(logits.item(i)) >= 0.5) == (y[static_cast<std::size_t>(i)] == 1);
      loss_sum += lg.loss * static_cast<double>(e - b);
      model.zero_grad();
      model.backward(lg.grad);
      opt.step(params, lr);
    }
    EpochStats st{epoch + 1, loss_sum / static_cast<double>(items.size()),
                  static_cast<double>(correct) / static_cast<double>(items.size())};
    if (!validation.empty()) st.val_accuracy = patch_label_accuracy(predict_patches(model, validation, input_size, norm), validation);
    result.curve.push_back(st);
  }
  return result;
}

inline Checkpoint make_baseline_checkpoint(PatchClassifier& model, const BaselineConfig& cfg,
                                           const std::vector<EpochStats>& curve) {
  Checkpoint c;
  c.header = {{"kind", "baseline"}, {"encoder", model.encoder_config()}, {"baseline", cfg}, {"curve", curve}};
  c.values = model.state();
  return c;
}

inline PatchClassifier load_baseline(const Checkpoint& ckpt) {
  if (ckpt.header.value("kind", "") != "baseline") throw IntegrityError("checkpoint is not a baseline checkpoint");
  PatchClassifier model(ckpt.header.at("encoder").get<EncoderConfig>(), 0);
  model.load(ckpt.values);
  return model;
}

}  // namespace mocomsi
