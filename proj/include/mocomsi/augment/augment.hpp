#pragma once

#include <algorithm>
#include <array>
#include <functional>
#include <cmath>
#include <random>
#include <utility>

#include "mocomsi/core/error.hpp"
#include "mocomsi/core/raster.hpp"
#include "mocomsi/core/rng.hpp"
#include "mocomsi/datasets/manifest.hpp"
#include "mocomsi/nn/tensor.hpp"

namespace mocomsi {

using View = nn::Tensor<float>;  // 3 x S x S

// Two-view recipe: random resized crop, color jitter, random grayscale,
// gaussian blur, horizontal flip, per-channel normalization. Defaults follow
// the standard MoCo v2 augmentation pipeline.
struct AugmentConfig {
  double crop_scale_lo = 0.2;
  double crop_scale_hi = 1.0;
  double crop_ratio_lo = 3.0 / 4.0;
  double crop_ratio_hi = 4.0 / 3.0;
  int output_size = 224;
  // Scales the (brightness, contrast, saturation, hue) = (0.4, 0.4, 0.4, 0.1) jitter.
  double jitter_strength = 1.0;
  double jitter_prob = 0.8;
  double grayscale_prob = 0.2;
  double blur_prob = 0.5;
  double blur_sigma_lo = 0.1;
  double blur_sigma_hi = 2.0;
  double hflip_prob = 0.5;
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> std{0.229, 0.224, 0.225};
  std::uint64_t seed = 0;

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!(crop_scale_lo > 0.0 && crop_scale_lo <= crop_scale_hi && crop_scale_hi <= 1.0)) {
      throw ConfigError("augment: crop_scale must satisfy 0 < lo <= hi <= 1");
    }
    if (!(crop_ratio_lo > 0.0 && crop_ratio_lo <= crop_ratio_hi)) throw ConfigError("augment: bad crop ratio");
    if (output_size < 1) throw ConfigError("augment: output_size must be positive");
    if (!(jitter_strength >= 0.0)) throw ConfigError("augment: jitter_strength must be >= 0");
    if (!prob(jitter_prob) || !prob(grayscale_prob) || !prob(blur_prob) || !prob(hflip_prob)) {
      throw ConfigError("augment: probabilities must lie in [0, 1]");
    }
    if (!(blur_sigma_lo > 0.0 && blur_sigma_lo <= blur_sigma_hi)) throw ConfigError("augment: bad blur sigma range");
    for (double s : std)
      if (!(s > 0.0)) throw ConfigError("augment: normalization std must be positive");
  }

  // Kernel size is 10% of the output size, rounded to the nearest odd integer >= 3.
  int blur_kernel_size() const {
    const int k = static_cast<int>(std::lround(0.1 * output_size));
    return std::max(3, k % 2 == 0 ? k + 1 : k);
  }
};

namespace augment_detail {

struct Planar {
  int h = 0, w = 0;
  std::vector<float> v;  // 3 planes
  float& at(int c, int y, int x) { return v[(static_cast<std::size_t>(c) * h + y) * w + x]; }
  float at(int c, int y, int x) const { return v[(static_cast<std::size_t>(c) * h + y) * w + x]; }
};

inline Planar to_planar(const Raster& img) {
  if (img.channels != 3) throw FormatError("augment: expected a 3-channel raster, got " + std::to_string(img.channels));
  Planar p{img.height, img.width, std::vector<float>(static_cast<std::size_t>(3) * img.height * img.width)};
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) p.at(c, y, x) = static_cast<float>(img.at(y, x, c)) / 255.0f;
  return p;
}

// Bilinear resample of the window [top, top+ch) x [left, left+cw) to size x size
// using half-pixel centers.
inline Planar resized_crop(const Planar& src, double top, double left, double ch, double cw, int size) {
  Planar out{size, size, std::vector<float>(static_cast<std::size_t>(3) * size * size)};
  if (top == 0.0 && left == 0.0 && ch == src.h && cw == src.w && size == src.h && size == src.w) {
    out.v = src.v;
    return out;
  }
  const double sy = ch / size, sx = cw / size;
  for (int y = 0; y < size; ++y) {
    const double fy = std::clamp(top + (y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < size; ++x) {
      const double fx = std::clamp(left + (x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.w - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top_v = src.at(c, y0, x0) * (1 - wx) + src.at(c, y0, x1) * wx;
        const double bot_v = src.at(c, y1, x0) * (1 - wx) + src.at(c, y1, x1) * wx;
        out.at(c, y, x) = static_cast<float>(top_v * (1 - wy) + bot_v * wy);
      }
    }
  }
  return out;
}

inline float luminance(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

inline void blend_with(Planar& p, float factor, const std::function<float(int, int)>& other) {
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x) {
      const float o = other(y, x);
      for (int c = 0; c < 3; ++c) p.at(c, y, x) = std::clamp(factor * p.at(c, y, x) + (1 - factor) * o, 0.0f, 1.0f);
    }
}

inline void adjust_brightness(Planar& p, float f) { blend_with(p, f, [](int, int) { return 0.0f; }); }

inline void adjust_contrast(Planar& p, float f) {
  double mean = 0.0;
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x) mean += luminance(p.at(0, y, x), p.at(1, y, x), p.at(2, y, x));
  const float m = static_cast<float>(mean / (static_cast<double>(p.h) * p.w));
  blend_with(p, f, [m](int, int) { return m; });
}

inline void adjust_saturation(Planar& p, float f) {
  Planar gray = p;
  blend_with(p, f, [&gray](int y, int x) { return luminance(gray.at(0, y, x), gray.at(1, y, x), gray.at(2, y, x)); });
}

inline void adjust_hue(Planar& p, float shift) {
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x) {
      const float r = p.at(0, y, x), g = p.at(1, y, x), b = p.at(2, y, x);
      const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
      const float d = mx - mn;
      float h = 0.0f;
      if (d > 0.0f) {
        if (mx == r) h = std::fmod((g - b) / d, 6.0f);
        else if (mx == g) h = (b - r) / d + 2.0f;
        else h = (r - g) / d + 4.0f;
        h /= 6.0f;
      }
      const float s = mx > 0.0f ? d / mx : 0.0f;
      const float v = mx;
      h = h + shift;
      h -= std::floor(h);
      const float hh = h * 6.0f;
      const int i = static_cast<int>(hh) % 6;
      const float f = hh - std::floor(hh);
      const float pp = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
      float rgb[6][3] = {{v, t, pp}, {q, v, pp}, {pp, v, t}, {pp, q, v}, {t, pp, v}, {v, pp, q}};
      for (int c = 0; c < 3; ++c) p.at(c, y, x) = std::clamp(rgb[i][c], 0.0f, 1.0f);
    }
}

inline void to_grayscale(Planar& p) {
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x) {
      const float l = luminance(p.at(0, y, x), p.at(1, y, x), p.at(2, y, x));
      for (int c = 0; c < 3; ++c) p.at(c, y, x) = l;
    }
}

inline int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

inline void gaussian_blur(Planar& p, int ksize, double sigma) {
  const int r = ksize / 2;
  std::vector<double> k(static_cast<std::size_t>(ksize));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  Planar tmp = p;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < p.h; ++y)
      for (int x = 0; x < p.w; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * p.at(c, y, reflect(x + i, p.w));
        tmp.at(c, y, x) = static_cast<float>(acc);
      }
    for (int y = 0; y < p.h; ++y)
      for (int x = 0; x < p.w; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * tmp.at(c, reflect(y + i, p.h), x);
        p.at(c, y, x) = static_cast<float>(acc);
      }
  }
}

inline void hflip(Planar& p) {
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < p.h; ++y)
      for (int x = 0; x < p.w / 2; ++x) std::swap(p.at(c, y, x), p.at(c, y, p.w - 1 - x));
}

inline View normalize(const Planar& p, const AugmentConfig& cfg) {
  View out({3, p.h, p.w});
  const std::size_t plane = static_cast<std::size_t>(p.h) * p.w;
  for (int c = 0; c < 3; ++c) {
    const double m = cfg.mean[static_cast<std::size_t>(c)], s = cfg.std[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < plane; ++i) {
      out.data[c * plane + i] = static_cast<float>((p.v[c * plane + i] - m) / s);
    }
  }
  return out;
}

// Crop window selection as in torchvision's RandomResizedCrop.
inline std::array<double, 4> sample_crop(int h, int w, const AugmentConfig& cfg, std::mt19937_64& gen) {
  if (cfg.crop_scale_lo == 1.0 && cfg.crop_scale_hi == 1.0 && h == w) return {0.0, 0.0, double(h), double(w)};
  const double area = static_cast<double>(h) * w;
  const double log_lo = std::log(cfg.crop_ratio_lo), log_hi = std::log(cfg.crop_ratio_hi);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * uniform(gen, cfg.crop_scale_lo, cfg.crop_scale_hi);
    const double ratio = std::exp(uniform(gen, log_lo, log_hi));
    const int cw = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int ch = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (cw > 0 && ch > 0 && cw <= w && ch <= h) {
      const int top = static_cast<int>(uniform_index(gen, static_cast<std::uint64_t>(h - ch + 1)));
      const int left = static_cast<int>(uniform_index(gen, static_cast<std::uint64_t>(w - cw + 1)));
      return {double(top), double(left), double(ch), double(cw)};
    }
  }
  // Fallback: central crop clamped to the allowed aspect-ratio range.
  const double in_ratio = static_cast<double>(w) / h;
  double cw = w, ch = h;
  if (in_ratio < cfg.crop_ratio_lo) ch = std::round(w / cfg.crop_ratio_lo);
  else if (in_ratio > cfg.crop_ratio_hi) cw = std::round(h * cfg.crop_ratio_hi);
  return {std::floor((h - ch) / 2), std::floor((w - cw) / 2), ch, cw};
}

inline View one_view(const Planar& src, const AugmentConfig& cfg, RngStream stream) {
  auto gen = stream.engine();
  const auto crop = sample_crop(src.h, src.w, cfg, gen);
  Planar p = resized_crop(src, crop[0], crop[1], crop[2], crop[3], cfg.output_size);

  if (cfg.jitter_strength > 0.0 && uniform01(gen) < cfg.jitter_prob) {
    const double b = 0.4 * cfg.jitter_strength, c = 0.4 * cfg.jitter_strength;
    const double s = 0.4 * cfg.jitter_strength, hue = std::min(0.5, 0.1 * cfg.jitter_strength);
    std::array<int, 4> order{0, 1, 2, 3};
    shuffle(order.begin(), order.end(), gen);
    for (int op : order) {
      switch (op) {
        case 0: adjust_brightness(p, static_cast<float>(uniform(gen, std::max(0.0, 1 - b), 1 + b))); break;
        case 1: adjust_contrast(p, static_cast<float>(uniform(gen, std::max(0.0, 1 - c), 1 + c))); break;
        case 2: adjust_saturation(p, static_cast<float>(uniform(gen, std::max(0.0, 1 - s), 1 + s))); break;
        default: adjust_hue(p, static_cast<float>(uniform(gen, -hue, hue))); break;
      }
    }
  }
  if (uniform01(gen) < cfg.grayscale_prob) to_grayscale(p);
  if (uniform01(gen) < cfg.blur_prob) gaussian_blur(p, cfg.blur_kernel_size(), uniform(gen, cfg.blur_sigma_lo, cfg.blur_sigma_hi));
  if (uniform01(gen) < cfg.hflip_prob) hflip(p);
  return normalize(p, cfg);
}

}  // namespace augment_detail

// Two independently augmented views of one patch. The views come from sibling
// sub-streams of `draw`, so (patch, config, draw) fully determines the pair.
inline std::pair<View, View> two_view_augment(const Raster& image, const AugmentConfig& cfg, RngStream draw) {
  const auto src = augment_detail::to_planar(image);
  return {augment_detail::one_view(src, cfg, draw.split(0)), augment_detail::one_view(src, cfg, draw.split(1))};
}

inline std::pair<View, View> two_view_augment(const PatchRecord& patch, const AugmentConfig& cfg, RngStream draw) {
  return two_view_augment(patch.image, cfg, draw);
}

// Single augmented view, used by supervised training.
inline View augment_view(const Raster& image, const AugmentConfig& cfg, RngStream draw) {
  return augment_detail::one_view(augment_detail::to_planar(image), cfg, draw);
}

// Deterministic inference path: full-frame resize then normalization.
inline View eval_transform(const Raster& image, int output_size, const AugmentConfig& norm = {}) {
  const auto src = augment_detail::to_planar(image);
  const auto p = augment_detail::resized_crop(src, 0.0, 0.0, src.h, src.w, output_size);
  return augment_detail::normalize(p, norm);
}

inline View eval_transform(const PatchRecord& patch, int output_size, const AugmentConfig& norm = {}) {
  return eval_transform(patch.image, output_size, norm);
}

}  // namespace mocomsi
