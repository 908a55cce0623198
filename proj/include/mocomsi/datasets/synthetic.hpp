#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "mocomsi/core/error.hpp"
#include "mocomsi/core/raster.hpp"
#include "mocomsi/core/rng.hpp"
#include "mocomsi/datasets/manifest.hpp"

namespace mocomsi {

// Desk-scale stand-in for a tiled slide cohort. MSI patients carry a planted
// horizontal stripe texture on a fixed fraction of their patches; MSS patients
// never do. Everything else (stain tint, smooth field, nuclei, pixel noise) is
// shared between the classes.
struct SyntheticConfig {
  int train_patients_per_class = 20;
  int validation_patients_per_class = 10;
  int min_patches = 32;
  int max_patches = 32;
  int patch_size = 32;
  double signal_fraction = 0.3;
  double noise_level = 0.05;
  double texture_strength = 0.2;
  std::uint64_t seed = 7;

  void validate() const {
    if (train_patients_per_class < 0 || validation_patients_per_class < 0 ||
        train_patients_per_class + validation_patients_per_class <= 0) {
      throw ConfigError("synthetic: patient counts must be positive");
    }
    if (min_patches < 1 || max_patches < min_patches) {
      throw ConfigError("synthetic: patches_per_patient range must satisfy 1 <= min <= max");
    }
    if (patch_size < 16) throw ConfigError("synthetic: patch_size must be >= 16");
    if (!(signal_fraction > 0.0 && signal_fraction <= 1.0)) {
      throw ConfigError("synthetic: signal_fraction must lie in (0, 1]");
    }
    if (!(noise_level >= 0.0)) throw ConfigError("synthetic: noise_level must be >= 0");
    if (!(texture_strength > 0.0 && texture_strength < 1.0)) {
      throw ConfigError("synthetic: texture_strength must lie in (0, 1)");
    }
  }
};

struct SyntheticDataset {
  DatasetManifest manifest;
  fs::path manifest_path;
  std::set<std::string> textured_patch_ids;
};

inline double stripe_period(int patch_size) { return std::max(4.0, patch_size / 6.0); }

// Bumped whenever render_patch changes, so cached datasets are not reused.
inline constexpr int kSyntheticGeneratorVersion = 2;

namespace detail {

struct Tint {
  double r, g, b;
};

inline Raster render_patch(int size, const Tint& tint, bool textured, double texture_strength,
                           double noise_level, RngStream stream) {
  auto gen = stream.engine();
  std::vector<double> px(static_cast<std::size_t>(size) * size * 3);
  auto at = [&](int y, int x, int c) -> double& {
    return px[(static_cast<std::size_t>(y) * size + x) * 3 + c];
  };

  // Per-patch tissue character: how crowded, how large and how dark the
  // nuclei are, and how strong the background undulation is.
  const double density = uniform(gen, 0.4, 2.2);
  const double r_lo = uniform(gen, 0.9, 1.6);
  const double r_hi = r_lo + uniform(gen, 0.5, 1.8);
  const double depth_lo = uniform(gen, 0.4, 0.7);
  const double wave_amp = uniform(gen, 0.02, 0.10);

  // Smooth background field.
  struct Wave {
    double kx, ky, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) {
    const double theta = uniform(gen, 0.0, 3.141592653589793);
    const double period = uniform(gen, 8.0, 40.0);
    const double k = 6.283185307179586 / period;
    waves.push_back({k * std::cos(theta), k * std::sin(theta), uniform(gen, 0.0, 6.283185307179586),
                     wave_amp * uniform(gen, 0.5, 1.0)});
  }
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double f = 0.0;
      for (const auto& w : waves) f += w.amp * std::sin(w.kx * x + w.ky * y + w.phase);
      at(y, x, 0) = tint.r + f;
      at(y, x, 1) = tint.g + f;
      at(y, x, 2) = tint.b + f;
    }
  }

  // Nuclei: soft dark purple discs.
  const int n_nuclei = std::max(1, static_cast<int>(density * size * size / 90.0));
  for (int i = 0; i < n_nuclei; ++i) {
    const double cx = uniform(gen, 0.0, size);
    const double cy = uniform(gen, 0.0, size);
    const double radius = uniform(gen, r_lo, r_hi);
    const double depth = uniform(gen, depth_lo, depth_lo + 0.25);
    for (int y = std::max(0, int(cy - radius - 2)); y < std::min(size, int(cy + radius + 2)); ++y) {
      for (int x = std::max(0, int(cx - radius - 2)); x < std::min(size, int(cx + radius + 2)); ++x) {
        const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
        const double w = depth * std::clamp(radius + 0.5 - d, 0.0, 1.0);
        at(y, x, 0) += w * (0.32 - at(y, x, 0));
        at(y, x, 1) += w * (0.18 - at(y, x, 1));
        at(y, x, 2) += w * (0.45 - at(y, x, 2));
      }
    }
  }

  // Planted texture: global horizontal stripes, invariant to horizontal flips
  // and present in any sizeable crop.
  if (textured) {
    const double period = stripe_period(size);
    const double phase = uniform(gen, 0.0, 6.283185307179586);
    for (int y = 0; y < size; ++y) {
      const double s = 1.0 - texture_strength * (0.5 + 0.5 * std::sin(6.283185307179586 * y / period + phase));
      for (int x = 0; x < size; ++x)
        for (int c = 0; c < 3; ++c) at(y, x, c) *= s;
    }
  }

  Raster img(size, size, 3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = at(y, x, c) + noise_level * normal(gen);
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  return img;
}

inline std::string numbered(const std::string& prefix, int i, int width = 3) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*d", width, i);
  return prefix + buf;
}

}  // namespace detail

// Writes out_dir/<patient_id>/<patch_id>.png for every patch plus
// out_dir/manifest.tsv. Identical configs produce byte-identical output.
inline SyntheticDataset generate_synthetic(const SyntheticConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IngestError("cannot create output directory: " + out_dir.string());

  SyntheticDataset ds;
  ds.manifest.root = out_dir;
  ds.manifest.patch_size = cfg.patch_size;
  const RngStream root(cfg.seed);

  int patient_serial = 0;
  for (Split split : {Split::kTrain, Split::kValidation}) {
    const int per_class =
        split == Split::kTrain ? cfg.train_patients_per_class : cfg.validation_patients_per_class;
    for (Label label : {Label::kMss, Label::kMsi}) {
      for (int i = 0; i < per_class; ++i) {
        const auto pstream = root.split(static_cast<std::uint64_t>(patient_serial++));
        const std::string pid = detail::numbered(
            std::string(split == Split::kTrain ? "tr" : "va") + (label == Label::kMsi ? "-msi-" : "-mss-"), i);
        auto gen = pstream.split(0).engine();
        const int n = cfg.min_patches +
                      static_cast<int>(uniform_index(gen, static_cast<std::uint64_t>(cfg.max_patches - cfg.min_patches + 1)));
        const detail::Tint tint{0.82 + uniform(gen, -0.05, 0.05), 0.56 + uniform(gen, -0.05, 0.05),
                                0.74 + uniform(gen, -0.05, 0.05)};
        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        shuffle(order.begin(), order.end(), gen);
        const long n_textured = label == Label::kMsi ? std::lround(cfg.signal_fraction * n) : 0;
        std::vector<bool> textured(static_cast<std::size_t>(n), false);
        for (long k = 0; k < n_textured; ++k) textured[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = true;

        fs::create_directories(out_dir / pid, ec);
        if (ec) throw IngestError("cannot create " + (out_dir / pid).string());
        for (int j = 0; j < n; ++j) {
          const std::string patch_id = detail::numbered(pid + "_p", j);
          const auto rel = fs::path(pid) / (patch_id + ".png");
          const Raster img = detail::render_patch(cfg.patch_size, tint, textured[static_cast<std::size_t>(j)],
                                                  cfg.texture_strength, cfg.noise_level,
                                                  pstream.split(static_cast<std::uint64_t>(j) + 1));
          write_png((out_dir / rel).string(), img);
          ds.manifest.entries.push_back({pid, rel.generic_string(), label, split});
          if (textured[static_cast<std::size_t>(j)]) ds.textured_patch_ids.insert(patch_id);
        }
      }
    }
  }
  ds.manifest.class_counts = recompute_counts(ds.manifest.entries);
  ds.manifest_path = out_dir / "manifest.tsv";
  write_manifest(ds.manifest, ds.manifest_path);
  return ds;
}

}  // namespace mocomsi
