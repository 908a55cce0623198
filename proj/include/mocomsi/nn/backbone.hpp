#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mocomsi/core/error.hpp"
#include "mocomsi/core/rng.hpp"
#include "mocomsi/nn/layers.hpp"

namespace mocomsi {

enum class Backbone { kTinyConv, kResNet18 };

inline std::string to_string(Backbone b) { return b == Backbone::kTinyConv ? "tiny_conv" : "resnet18"; }

inline Backbone parse_backbone(const std::string& s) {
  if (s == "tiny_conv") return Backbone::kTinyConv;
  if (s == "resnet18") return Backbone::kResNet18;
  throw ConfigError("unknown backbone '" + s + "' (expected tiny_conv or resnet18)");
}

struct EncoderConfig {
  Backbone backbone = Backbone::kTinyConv;
  int output_dim = 512;      // n_o, the embedding width used downstream
  int projection_dim = 128;  // contrastive space
  bool mlp_projection = true;
  // tiny_conv: one 3x3 conv + group norm + relu per entry; all but the first stride 2.
  std::vector<int> tiny_widths{16, 32, 64};
  // resnet18: width of the first stage (64 reproduces the standard network).
  int resnet_width = 64;

  void validate() const {
    if (output_dim <= 0) throw ConfigError("encoder: output_dim must be positive");
    if (projection_dim <= 0) throw ConfigError("encoder: projection_dim must be positive");
    if (backbone == Backbone::kTinyConv) {
      if (tiny_widths.empty()) throw ConfigError("encoder: tiny_widths must not be empty");
      for (int w : tiny_widths)
        if (w <= 0) throw ConfigError("encoder: tiny_widths must be positive");
    } else if (resnet_width <= 0) {
      throw ConfigError("encoder: resnet_width must be positive");
    }
  }
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

namespace detail {

inline int norm_groups(int channels) {
  for (int g : {8, 4, 2})
    if (channels % g == 0 && channels / g >= 2) return g;
  return 1;
}

template <typename T>
nn::Sequential<T> tiny_conv(const EncoderConfig& cfg, std::mt19937_64& gen) {
  nn::Sequential<T> s;
  int in = 3;
  for (std::size_t i = 0; i < cfg.tiny_widths.size(); ++i) {
    const int w = cfg.tiny_widths[i];
    s.template emplace<nn::Conv2d<T>>(in, w, 3, i == 0 ? 1 : 2, 1, false, gen);
    s.template emplace<nn::GroupNorm<T>>(norm_groups(w), w);
    s.template emplace<nn::ReLU<T>>();
    in = w;
  }
  s.template emplace<nn::GlobalAvgPool<T>>();
  s.template emplace<nn::Linear<T>>(in, cfg.output_dim, gen);
  s.template emplace<nn::ReLU<T>>();
  return s;
}

template <typename T>
std::unique_ptr<nn::Layer<T>> basic_block(int in, int out, int stride, std::mt19937_64& gen) {
  nn::Sequential<T> body, shortcut;
  body.template emplace<nn::Conv2d<T>>(in, out, 3, stride, 1, false, gen);
  body.template emplace<nn::BatchNorm2d<T>>(out);
  body.template emplace<nn::ReLU<T>>();
  body.template emplace<nn::Conv2d<T>>(out, out, 3, 1, 1, false, gen);
  body.template emplace<nn::BatchNorm2d<T>>(out);
  if (stride != 1 || in != out) {
    shortcut.template emplace<nn::Conv2d<T>>(in, out, 1, stride, 0, false, gen);
    shortcut.template emplace<nn::BatchNorm2d<T>>(out);
  }
  return std::make_unique<nn::Residual<T>>(std::move(body), std::move(shortcut));
}

template <typename T>
nn::Sequential<T> resnet18(const EncoderConfig& cfg, std::mt19937_64& gen) {
  const int w = cfg.resnet_width;
  nn::Sequential<T> s;
  s.template emplace<nn::Conv2d<T>>(3, w, 7, 2, 3, false, gen);
  s.template emplace<nn::BatchNorm2d<T>>(w);
  s.template emplace<nn::ReLU<T>>();
  s.template emplace<nn::MaxPool2d<T>>(3, 2, 1);
  int in = w;
  for (int stage = 0; stage < 4; ++stage) {
    const int out = w << stage;
    s.push(basic_block<T>(in, out, stage == 0 ? 1 : 2, gen));
    s.push(basic_block<T>(out, out, 1, gen));
    in = out;
  }
  s.template emplace<nn::GlobalAvgPool<T>>();
  if (in != cfg.output_dim) s.template emplace<nn::Linear<T>>(in, cfg.output_dim, gen);
  return s;
}

}  // namespace detail

// Backbone (images -> n_o features) followed by the projection head used only
// by the contrastive objective.
template <typename T>
class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    auto gen = RngStream(seed).split(0x656e63).engine();
    backbone_ = cfg.backbone == Backbone::kTinyConv ? detail::tiny_conv<T>(cfg, gen) : detail::resnet18<T>(cfg, gen);
    if (cfg.mlp_projection) {
      projection_.template emplace<nn::Linear<T>>(cfg.output_dim, cfg.output_dim, gen);
      projection_.template emplace<nn::ReLU<T>>();
    }
    projection_.template emplace<nn::Linear<T>>(cfg.output_dim, cfg.projection_dim, gen);
  }

  const EncoderConfig& config() const { return cfg_; }
  nn::Sequential<T>& backbone() { return backbone_; }
  nn::Sequential<T>& projection() { return projection_; }

  nn::Tensor<T> features(const nn::Tensor<T>& x, nn::Pass pass) { return backbone_.forward(x, pass); }
  nn::Tensor<T> forward(const nn::Tensor<T>& x, nn::Pass pass) {
    return projection_.forward(backbone_.forward(x, pass), pass);
  }
  void backward(const nn::Tensor<T>& grad_projection) { backbone_.backward(projection_.backward(grad_projection)); }

  // Backbone parameters first, then projection parameters.
  std::vector<nn::Parameter<T>*> parameters() {
    auto out = nn::parameters_of(backbone_);
    projection_.parameters(out);
    return out;
  }
  void zero_grad() {
    nn::zero_grad(backbone_);
    nn::zero_grad(projection_);
  }

 private:
  EncoderConfig cfg_;
  nn::Sequential<T> backbone_, projection_;
};

}  // namespace mocomsi
