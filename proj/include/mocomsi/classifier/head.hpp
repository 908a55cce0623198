#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "mocomsi/classifier/aggregate.hpp"
#include "mocomsi/core/checkpoint.hpp"
#include "mocomsi/core/error.hpp"
#include "mocomsi/core/rng.hpp"
#include "mocomsi/embeddings/groups.hpp"
#include "mocomsi/moco/moco.hpp"
#include "mocomsi/nn/layers.hpp"
#include "mocomsi/nn/optim.hpp"

namespace mocomsi {

struct HeadConfig {
  int input_dim = 2048;  // must equal l_g = n_g * n_o
  std::vector<int> hidden_dims{512, 128};
  double dropout = 0.25;
  bool standardize_inputs = true;  // z-score each input feature with training-set statistics
  int epochs = 100;
  int batch_size = 32;
  double base_lr = 0.01;
  double weight_decay = 1e-4;
  double sgd_momentum = 0.9;
  std::uint64_t seed = 0;

  void validate() const {
    if (input_dim < 1) throw ConfigError("head: input_dim must be positive");
    for (int h : hidden_dims)
      if (h < 1) throw ConfigError("head: hidden_dims must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("head: dropout must lie in [0, 1)");
    if (epochs < 0) throw ConfigError("head: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("head: batch_size must be positive");
    if (!(base_lr > 0.0)) throw ConfigError("head: base_lr must be positive");
  }
};

inline void to_json(nlohmann::json& j, const HeadConfig& c) {
  j = {{"input_dim", c.input_dim}, {"hidden_dims", c.hidden_dims}, {"dropout", c.dropout},
       {"standardize_inputs", c.standardize_inputs}, {"epochs", c.epochs},       {"batch_size", c.batch_size},   {"base_lr", c.base_lr},
       {"weight_decay", c.weight_decay}, {"sgd_momentum", c.sgd_momentum}, {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, HeadConfig& c) {
  j.at("input_dim").get_to(c.input_dim);
  j.at("hidden_dims").get_to(c.hidden_dims);
  j.at("dropout").get_to(c.dropout);
  c.standardize_inputs = j.value("standardize_inputs", false);
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("base_lr").get_to(c.base_lr);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("sgd_momentum").get_to(c.sgd_momentum);
  j.at("seed").get_to(c.seed);
}

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();
};

inline void to_json(nlohmann::json& j, const EpochStats& s) {
  j = {{"epoch", s.epoch}, {"train_loss", s.train_loss}, {"train_accuracy", s.train_accuracy},
       {"val_accuracy", std::isnan(s.val_accuracy) ? nlohmann::json(nullptr) : nlohmann::json(s.val_accuracy)}};
}
inline void from_json(const nlohmann::json& j, EpochStats& s) {
  j.at("epoch").get_to(s.epoch);
  j.at("train_loss").get_to(s.train_loss);
  j.at("train_accuracy").get_to(s.train_accuracy);
  s.val_accuracy = j.at("val_accuracy").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                  : j.at("val_accuracy").get<double>();
}

// MLP over concatenated group embeddings: input -> hidden... -> 2 logits.
class GroupHead {
 public:
  explicit GroupHead(const HeadConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    auto gen = RngStream(cfg.seed).split(0x68656164).engine();
    int in = cfg.input_dim;
    if (cfg.standardize_inputs) net_.emplace<nn::Standardize<float>>(in);
    std::uint64_t dropout_index = 0;
    for (int h : cfg.hidden_dims) {
      net_.emplace<nn::Linear<float>>(in, h, gen);
      net_.emplace<nn::ReLU<float>>();
      if (cfg.dropout > 0.0) net_.emplace<nn::Dropout<float>>(cfg.dropout, RngStream(cfg.seed).split(++dropout_index).key());
      in = h;
    }
    net_.emplace<nn::Linear<float>>(in, 2, gen);
  }

  const HeadConfig& config() const { return cfg_; }
  nn::Sequential<float>& net() { return net_; }
  int first_layer_fan_in() { return dynamic_cast<nn::Linear<float>&>(net_.at(cfg_.standardize_inputs ? 1 : 0)).in_features(); }
  nn::Standardize<float>* standardizer() {
    return cfg_.standardize_inputs ? &dynamic_cast<nn::Standardize<float>&>(net_.at(0)) : nullptr;
  }
  nn::Linear<float>& final_layer() { return dynamic_cast<nn::Linear<float>&>(net_.back()); }

 private:
  HeadConfig cfg_;
  nn::Sequential<float> net_;
};

inline nn::Tensor<float> stack_groups(const std::vector<GroupSample>& groups, std::size_t begin, std::size_t end,
                                      const std::vector<std::size_t>& order, int input_dim) {
  nn::Tensor<float> x({static_cast<int>(end - begin), input_dim});
  for (std::size_t i = begin; i < end; ++i) {
    const auto& g = groups[order[i]];
    if (static_cast<int>(g.vector.size()) != input_dim) {
      throw ContractViolation("head: group vector length " + std::to_string(g.vector.size()) + " != input_dim " +
                              std::to_string(input_dim));
    }
    std::copy(g.vector.begin(), g.vector.end(), x.item(static_cast<int>(i - begin)));
  }
  return x;
}

// Softmax MSI probability per group.
inline std::vector<double> predict_groups(GroupHead& head, const std::vector<GroupSample>& groups,
                                          int batch_size = 256) {
  std::vector<double> out;
  out.reserve(groups.size());
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t b = 0; b < groups.size(); b += static_cast<std::size_t>(batch_size)) {
    const auto e = std::min(groups.size(), b + static_cast<std::size_t>(batch_size));
    const auto logits = head.net().forward(stack_groups(groups, b, e, order, head.config().input_dim), nn::Pass::eval());
    for (int i = 0; i < logits.dim(0); ++i) out.push_back(nn::positive_probability(logits.item(i)));
  }
  return out;
}

inline double group_accuracy(const std::vector<double>& probs, const std::vector<GroupSample>& groups, double t = 0.5) {
  if (groups.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < groups.size(); ++i) correct += (probs[i] >= t) == (groups[i].label == Label::kMsi);
  return static_cast<double>(correct) / static_cast<double>(groups.size());
}

using GroupSource = std::function<std::vector<GroupSample>(int epoch)>;

struct HeadTrainResult {
  std::vector<EpochStats> curve;
};

// Cross-entropy training of the head. `train_groups` is asked for a fresh set
// of groups each epoch; validation groups, when given, are scored after every
// epoch. The head only ever sees embedding vectors.
inline HeadTrainResult train_head(GroupHead& head, const GroupSource& train_groups,
                                  const std::vector<GroupSample>& validation = {}) {
  const auto& cfg = head.config();
  nn::Sgd<float> opt(cfg.sgd_momentum, cfg.weight_decay);
  auto params = nn::parameters_of(head.net());
  HeadTrainResult result;
  const RngStream root = RngStream(cfg.seed).split(0x747261696e);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto groups = train_groups(epoch);
    if (groups.empty()) throw ConfigError("head: no training groups");
    if (epoch == 0 && head.standardizer()) {
      std::vector<const float*> rows;
      for (const auto& g : groups) {
        require(static_cast<int>(g.vector.size()) == cfg.input_dim, "head: group vector length != input_dim");
        rows.push_back(g.vector.data());
      }
      head.standardizer()->fit(rows);
    }
    std::vector<std::size_t> order(groups.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto gen = root.split(static_cast<std::uint64_t>(epoch)).engine();
    shuffle(order.begin(), order.end(), gen);
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < groups.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const auto e = std::min(groups.size(), b + static_cast<std::size_t>(cfg.batch_size));
      const auto x = stack_groups(groups, b, e, order, cfg.input_dim);
      std::vector<int> y;
      for (std::size_t i = b; i < e; ++i) y.push_back(index_of(groups[order[i]].label));
      const auto logits = head.net().forward(x, nn::Pass::train());
      auto lg = nn::softmax_cross_entropy(logits, y);
      if (!std::isfinite(lg.loss)) throw TrainingFault("non-finite head loss", epoch);
      for (int i = 0; i < logits.dim(0); ++i)
        correct += (nn::positive_probability(logits.item(i)) >= 0.5) == (y[static_cast<std::size_t>(i)] == 1);
      loss_sum += lg.loss * static_cast<double>(e - b);
      nn::zero_grad(head.net());
      head.net().backward(lg.grad);
      opt.step(params, lr);
    }
    EpochStats st{epoch + 1, loss_sum / static_cast<double>(groups.size()),
                  static_cast<double>(correct) / static_cast<double>(groups.size())};
    if (!validation.empty()) st.val_accuracy = group_accuracy(predict_groups(head, validation), validation);
    result.curve.push_back(st);
  }
  return result;
}

inline HeadTrainResult train_head(GroupHead& head, const std::vector<GroupSample>& fixed_groups,
                                  const std::vector<GroupSample>& validation = {}) {
  return train_head(head, [&fixed_groups](int) { return fixed_groups; }, validation);
}

inline Checkpoint make_head_checkpoint(GroupHead& head, const GroupingPolicy& policy, int embedding_dim,
                                       const std::string& encoder_fingerprint, const std::vector<EpochStats>& curve) {
  Checkpoint c;
  c.header = {{"kind", "head"},
              {"head", head.config()},
              {"grouping", policy},
              {"embedding_dim", embedding_dim},
              {"encoder_fingerprint", encoder_fingerprint},
              {"curve", curve}};
  c.values = nn::flatten_state(head.net());
  return c;
}

inline GroupHead load_head(const Checkpoint& ckpt) {
  if (ckpt.header.value("kind", "") != "head") throw IntegrityError("checkpoint is not a head checkpoint");
  GroupHead head(ckpt.header.at("head").get<HeadConfig>());
  nn::load_state(head.net(), ckpt.values);
  return head;
}

}  // namespace mocomsi
