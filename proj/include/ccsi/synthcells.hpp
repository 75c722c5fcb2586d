#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ccsi/dataset.hpp"
#include "ccsi/tensor.hpp"

namespace ccsi {

// Procedural stained-smear style dataset: 8 cell classes distinguished by
// color, lobe count, and ring/filled morphology, with strong positional and
// photometric jitter so a class mean image is a poor stand-in for samples.
// Fully deterministic given the seed.
struct SynthCellsConfig {
  int classes = 8;
  int train_per_class = 500;
  int val_per_class = 60;
  int test_per_class = 120;
  std::uint64_t seed = 7;
  std::size_t image_size = 28;
  std::size_t pad_to = 32;
  double jitter = 1.0;
};

namespace detail {

inline void render_cell(unsigned char* dst, std::size_t side, int cls,
                        Rng& rng, double jitter) {
  static const double palette[8][3] = {
      {0.85, 0.25, 0.25}, {0.25, 0.60, 0.85}, {0.30, 0.75, 0.35},
      {0.85, 0.70, 0.25}, {0.70, 0.30, 0.75}, {0.25, 0.75, 0.70},
      {0.90, 0.45, 0.15}, {0.55, 0.55, 0.85}};
  const int lobes = 1 + cls % 3;
  const bool ring = (cls % 2) == 1;
  const double base_r = 4.5 + 0.7 * double(cls % 4);

  double color[3];
  for (int c = 0; c < 3; ++c) {
    color[c] = palette[cls][c] * (1.0 + 0.10 * jitter * rng.normal());
    color[c] = std::min(1.0, std::max(0.0, color[c]));
  }

  const double half = double(side) / 2.0;
  const double cx = half + rng.uniform(-5.0, 5.0) * jitter;
  const double cy = half + rng.uniform(-5.0, 5.0) * jitter;
  const double phi0 = rng.uniform(0.0, 6.2831853);
  const double spread = lobes == 1 ? 0.0 : base_r * 1.15;

  double bx[3], by[3], br[3];
  for (int i = 0; i < lobes; ++i) {
    const double a = phi0 + 6.2831853 * double(i) / double(lobes);
    bx[i] = cx + spread * std::cos(a);
    by[i] = cy + spread * std::sin(a);
    br[i] = base_r * (1.0 + 0.15 * jitter * rng.normal());
    if (br[i] < 1.5) br[i] = 1.5;
  }

  const double bg[3] = {0.95, 0.90, 0.92};
  const double noise_sigma = 0.015 + 0.02 * jitter;

  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      double alpha = 0.0;
      for (int i = 0; i < lobes; ++i) {
        const double dx = double(x) + 0.5 - bx[i];
        const double dy = double(y) + 0.5 - by[i];
        const double d = std::sqrt(dx * dx + dy * dy);
        double a;
        if (ring) {
          const double t = (d - br[i]) / 1.2;
          a = std::exp(-t * t);
        } else {
          a = 1.0 / (1.0 + std::exp(-(br[i] - d) / 0.8));
        }
        alpha = std::max(alpha, a);
      }
      for (int c = 0; c < 3; ++c) {
        double v = bg[c] * (1.0 - alpha) + color[c] * alpha;
        v += noise_sigma * rng.normal();
        v = std::min(1.0, std::max(0.0, v));
        dst[(y * side + x) * 3 + c] = (unsigned char)std::lround(v * 255.0);
      }
    }
  }
}

}  // namespace detail

template <typename T = float>
DatasetBundle<T> make_synthcells(const SynthCellsConfig& cfg) {
  DatasetBundle<T> bundle;
  bundle.manifest["name"] = "synthcells";
  bundle.manifest["classes"] = std::to_string(cfg.classes);

  const std::size_t side = cfg.image_size;
  const int per_split[3] = {cfg.train_per_class, cfg.val_per_class,
                            cfg.test_per_class};
  for (int s = 0; s < 3; ++s) {
    auto& set = bundle.split(SplitTag(s));
    set.split_tag = SplitTag(s);
    set.num_classes = cfg.classes;
    const std::size_t n = std::size_t(per_split[s]) * std::size_t(cfg.classes);
    std::vector<unsigned char> raw(n * side * side * 3);
    set.labels.reserve(n);
    std::size_t i = 0;
    for (int cls = 0; cls < cfg.classes; ++cls) {
      for (int idx = 0; idx < per_split[s]; ++idx) {
        const std::uint64_t sub =
            cfg.seed ^ (std::uint64_t(s + 1) << 56) ^
            (std::uint64_t(cls + 1) << 40) ^ std::uint64_t(idx + 1);
        Rng rng(sub);
        detail::render_cell(raw.data() + i * side * side * 3, side, cls, rng,
                            cfg.jitter);
        set.labels.push_back(cls);
        ++i;
      }
    }
    set.images = pad_and_scale<T>(raw, n, side, side, 3, cfg.pad_to);
    set.validate();
  }
  return bundle;
}

}  // namespace ccsi
