#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mocomsi/augment/augment.hpp"
#include "mocomsi/core/checkpoint.hpp"
#include "mocomsi/core/error.hpp"
#include "mocomsi/core/rng.hpp"
#include "mocomsi/datasets/manifest.hpp"
#include "mocomsi/moco/infonce.hpp"
#include "mocomsi/nn/backbone.hpp"
#include "mocomsi/nn/optim.hpp"

namespace mocomsi {

struct Stage1Config {
  int queue_size = 4096;  // K
  double momentum = 0.999;  // m
  double temperature = 0.2;  // tau
  int batch_size = 64;
  int epochs = 200;
  double base_lr = 0.03;
  double weight_decay = 1e-4;
  double sgd_momentum = 0.9;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw ConfigError("stage1: batch_size must be positive");
    if (queue_size < 1 || queue_size % batch_size != 0) {
      throw ConfigError("stage1: queue_size (" + std::to_string(queue_size) + ") must be a positive multiple of batch_size (" +
                        std::to_string(batch_size) + ")");
    }
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("stage1: momentum must lie in [0, 1]");
    if (!(temperature > 0.0)) throw ConfigError("stage1: temperature must be positive");
    if (epochs < 1) throw ConfigError("stage1: epochs must be >= 1");
    if (!(base_lr > 0.0)) throw ConfigError("stage1: base_lr must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("stage1: weight_decay must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"backbone", to_string(c.backbone)}, {"output_dim", c.output_dim}, {"projection_dim", c.projection_dim},
       {"mlp_projection", c.mlp_projection}, {"tiny_widths", c.tiny_widths}, {"resnet_width", c.resnet_width}};
}
inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.backbone = parse_backbone(j.at("backbone").get<std::string>());
  j.at("output_dim").get_to(c.output_dim);
  j.at("projection_dim").get_to(c.projection_dim);
  j.at("mlp_projection").get_to(c.mlp_projection);
  j.at("tiny_widths").get_to(c.tiny_widths);
  j.at("resnet_width").get_to(c.resnet_width);
}
inline void to_json(nlohmann::json& j, const Stage1Config& c) {
  j = {{"queue_size", c.queue_size}, {"momentum", c.momentum}, {"temperature", c.temperature},
       {"batch_size", c.batch_size}, {"epochs", c.epochs},       {"base_lr", c.base_lr},
       {"weight_decay", c.weight_decay}, {"sgd_momentum", c.sgd_momentum}, {"seed", c.seed}};
}

// lr = base_lr * (1 + cos(pi * epoch / total)) / 2
inline double cosine_lr(int epoch, int total_epochs, double base_lr) {
  if (total_epochs <= 0) throw DomainError("cosine_lr: total_epochs must be positive");
  if (epoch < 0 || epoch > total_epochs) throw DomainError("cosine_lr: epoch outside [0, total_epochs]");
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * epoch / total_epochs));
}

template <typename T>
struct MoCoState {
  Encoder<T> query;
  Encoder<T> key;
  nn::Tensor<T> queue;  // K x projection_dim, unit rows
  int queue_ptr = 0;
  double momentum = 0.999;
  double temperature = 0.2;
  long step = 0;
};

// theta_k <- m * theta_k + (1 - m) * theta_q, elementwise; theta_q is untouched.
template <typename T>
void momentum_update(const std::vector<nn::Parameter<T>*>& query, const std::vector<nn::Parameter<T>*>& key,
                     double m) {
  require(query.size() == key.size(), "momentum_update: encoders differ in structure");
  for (std::size_t i = 0; i < query.size(); ++i) {
    require(query[i]->value.size() == key[i]->value.size(), "momentum_update: parameter shape mismatch");
  }
  const T mk = static_cast<T>(m), mq = static_cast<T>(1.0 - m);
  for (std::size_t i = 0; i < query.size(); ++i) {
    auto& k = key[i]->value;
    const auto& q = query[i]->value;
    for (std::size_t j = 0; j < k.size(); ++j) k[j] = mk * k[j] + mq * q[j];
  }
}

template <typename T>
void momentum_update(MoCoState<T>& s) {
  momentum_update(s.query.parameters(), s.key.parameters(), s.momentum);
}

// Writes keys into rows [ptr, ptr + B) modulo K and advances the pointer.
template <typename T>
void enqueue(MoCoState<T>& s, const nn::Tensor<T>& keys) {
  const int k = s.queue.dim(0), d = s.queue.dim(1);
  require(keys.rank() == 2 && keys.dim(1) == d, "enqueue: key width must match the queue");
  const int b = keys.dim(0);
  require(b <= k, "enqueue: batch larger than the queue");
  require_unit_rows(keys, "enqueue keys");
  for (int i = 0; i < b; ++i) {
    const int row = (s.queue_ptr + i) % k;
    std::copy_n(keys.item(i), d, s.queue.item(row));
  }
  s.queue_ptr = (s.queue_ptr + b) % k;
}

// Key encoder starts as an exact copy of the query encoder; the queue holds
// random unit vectors.
template <typename T>
MoCoState<T> init_moco(const EncoderConfig& enc, const Stage1Config& cfg, std::uint64_t seed) {
  enc.validate();
  cfg.validate();
  Encoder<T> query(enc, seed);
  MoCoState<T> s{query, query, nn::Tensor<T>({cfg.queue_size, enc.projection_dim}), 0, cfg.momentum,
                 cfg.temperature, 0};
  auto gen = RngStream(seed).split(0x7175657565).engine();
  for (int i = 0; i < cfg.queue_size; ++i) {
    T* row = s.queue.item(i);
    double norm = 0.0;
    for (int j = 0; j < enc.projection_dim; ++j) {
      row[j] = static_cast<T>(normal(gen));
      norm += static_cast<double>(row[j]) * row[j];
    }
    norm = std::sqrt(norm);
    for (int j = 0; j < enc.projection_dim; ++j) row[j] = static_cast<T>(row[j] / norm);
  }
  return s;
}

// Owns the state plus optimizer momentum buffers for stage-1 training.
template <typename T>
class MoCoTrainer {
 public:
  MoCoTrainer(MoCoState<T> state, const Stage1Config& cfg, const AugmentConfig& aug)
      : state_(std::move(state)), cfg_(cfg), aug_(aug), opt_(cfg.sgd_momentum, cfg.weight_decay) {
    aug.validate();
  }

  MoCoState<T>& state() { return state_; }
  const MoCoState<T>& state() const { return state_; }

  // Forward both views, InfoNCE against the current queue, gradient step on
  // the query encoder, momentum update of the key encoder, enqueue the new
  // keys. Returns the loss measured before the step.
  double train_step(std::span<const Raster* const> batch, RngStream draw, double lr) {
    require(static_cast<int>(batch.size()) == cfg_.batch_size,
            "train_step: batch of " + std::to_string(batch.size()) + ", config expects " + std::to_string(cfg_.batch_size));
    std::vector<nn::Tensor<T>> vq, vk;
    vq.reserve(batch.size());
    vk.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto [a, b] = two_view_augment(*batch[i], aug_, draw.split(i));
      vq.push_back(cast(a));
      vk.push_back(cast(b));
    }
    return train_step_on_views(nn::stack(vq), nn::stack(vk), lr);
  }

  double train_step_on_views(const nn::Tensor<T>& xq, const nn::Tensor<T>& xk, double lr) {
    auto& s = state_;
    const auto zq = l2_normalize_rows(s.query.forward(xq, nn::Pass::train()));
    const auto zk = l2_normalize_rows(s.key.forward(xk, nn::Pass::train_no_grad()));
    auto res = infonce_loss_and_grad(zq.unit, zk.unit, s.queue, s.temperature);
    if (!std::isfinite(res.loss)) throw TrainingFault("non-finite InfoNCE loss", s.step);
    s.query.zero_grad();
    s.query.backward(l2_normalize_backward(res.grad_q, zq));
    opt_.step(s.query.parameters(), lr);
    momentum_update(s);
    enqueue(s, zk.unit);
    ++s.step;
    return res.loss;
  }

 private:
  static nn::Tensor<T> cast(const View& v) {
    if constexpr (std::is_same_v<T, float>) {
      return v;
    } else {
      return nn::Tensor<T>(v.shape, std::vector<T>(v.data.begin(), v.data.end()));
    }
  }

  MoCoState<T> state_;
  Stage1Config cfg_;
  AugmentConfig aug_;
  nn::Sgd<T> opt_;
};

template <typename T>
std::vector<T> encoder_state(Encoder<T>& e) {
  auto flat = nn::flatten_state(e.backbone());
  auto proj = nn::flatten_state(e.projection());
  flat.insert(flat.end(), proj.begin(), proj.end());
  return flat;
}

template <typename T>
void load_encoder_state(Encoder<T>& e, const std::vector<T>& flat) {
  const auto nb = nn::flatten_state(e.backbone()).size();
  if (flat.size() < nb) throw IntegrityError("encoder state too short");
  nn::load_state(e.backbone(), std::vector<T>(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(nb)));
  nn::load_state(e.projection(), std::vector<T>(flat.begin() + static_cast<std::ptrdiff_t>(nb), flat.end()));
}

struct Stage1Result {
  Checkpoint checkpoint;  // query encoder at the lowest-loss epoch
  std::vector<double> loss_curve;  // mean loss per epoch
  int best_epoch = 0;  // 1-based
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

inline Checkpoint make_encoder_checkpoint(const EncoderConfig& enc, std::vector<float> state,
                                          const std::vector<double>& curve, int best_epoch) {
  Checkpoint c;
  c.header = {{"kind", "encoder"}, {"encoder", enc}, {"loss_curve", curve}, {"best_epoch", best_epoch}};
  c.values = std::move(state);
  return c;
}

inline Encoder<float> load_encoder(const Checkpoint& ckpt) {
  if (ckpt.header.value("kind", "") != "encoder") throw IntegrityError("checkpoint is not an encoder checkpoint");
  const auto enc = ckpt.header.at("encoder").get<EncoderConfig>();
  Encoder<float> e(enc, 0);
  load_encoder_state(e, ckpt.values);
  return e;
}

// Stage-1 pretraining on the train split only. The checkpoint keeps the query
// encoder from the epoch with the lowest mean training loss.
inline Stage1Result train_moco(const std::vector<PatientRecord>& train_patients, const EncoderConfig& enc,
                               const Stage1Config& cfg, const AugmentConfig& aug, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  std::vector<const Raster*> images;
  for (const auto& p : train_patients) {
    if (p.split != Split::kTrain) throw ContractViolation("train_moco: validation patient passed to stage 1");
    for (const auto& patch : p.patches) images.push_back(&patch.image);
  }
  if (static_cast<int>(images.size()) < cfg.batch_size) {
    throw ConfigError("stage1: " + std::to_string(images.size()) + " training patches, fewer than batch_size " +
                      std::to_string(cfg.batch_size));
  }
  MoCoTrainer<float> trainer(init_moco<float>(enc, cfg, cfg.seed), cfg, aug);
  const RngStream root = RngStream(cfg.seed).split(0x6d6f636f);
  Stage1Result result;
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(images.size());
  std::vector<const Raster*> batch(static_cast<std::size_t>(cfg.batch_size));
  const std::size_t steps = images.size() / static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto gen = root.split(static_cast<std::uint64_t>(epoch)).engine();
    shuffle(order.begin(), order.end(), gen);
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr);
    double sum = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = images[order[s * batch.size() + i]];
      sum += trainer.train_step(batch, root.split(static_cast<std::uint64_t>(epoch)).split(s + 1), lr);
    }
    const double mean = sum / static_cast<double>(steps);
    result.loss_curve.push_back(mean);
    if (mean < best) {
      best = mean;
      result.best_epoch = epoch + 1;
      result.checkpoint.values = encoder_state(trainer.state().query);
    }
    if (on_epoch) on_epoch(epoch + 1, mean);
  }
  result.checkpoint = make_encoder_checkpoint(enc, std::move(result.checkpoint.values), result.loss_curve,
                                              result.best_epoch);
  return result;
}

}  // namespace mocomsi
