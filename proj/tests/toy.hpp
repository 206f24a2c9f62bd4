#pragma once

#include <cmath>
#include <cstdint>

#include "fundus/data.hpp"
#include "fundus/degrade.hpp"
#include "fundus/image.hpp"
#include "fundus/rng.hpp"

// Synthetic fundus-like images for benchmark tests: a warm circular field of
// view on a near-black background, a few smooth vessel curves and a bright
// optic-disk spot. The variant seed perturbs geometry and colors.
namespace toy {

inline fundus::FundusImage fundus_image(int side, std::uint64_t variant) {
  using fundus::Rng;
  Rng rng(Rng::derive(0x70facade, {variant}));
  fundus::FundusImage img(side, side, 0.02);
  const double cx = side / 2.0, cy = side / 2.0;
  const double fov_r = 0.45 * side;
  const double base_r = 0.50 + 0.10 * rng.uniform01();
  const double base_g = 0.28 + 0.08 * rng.uniform01();
  const double base_b = 0.14 + 0.06 * rng.uniform01();
  auto& px = img.pixels;
  const int plane = side * side;
  for (int i = 0; i < side; ++i) {
    for (int j = 0; j < side; ++j) {
      const double d = std::hypot(i - cy, j - cx);
      if (d >= fov_r) continue;
      const double fall = 1.0 - 0.35 * (d / fov_r) * (d / fov_r);
      px[0 * plane + i * side + j] = base_r * fall;
      px[1 * plane + i * side + j] = base_g * fall;
      px[2 * plane + i * side + j] = base_b * fall;
    }
  }
  for (int v = 0; v < 3; ++v) {
    const double row0 = cy + (v - 1) * 0.22 * side + 2.0 * (rng.uniform01() - 0.5);
    const double amp = 0.08 * side * (0.5 + rng.uniform01());
    const double phase = 6.28318530717958647 * rng.uniform01();
    const double freq = (1.0 + rng.uniform01()) * 6.28318530717958647 / side;
    for (int j = 0; j < side; ++j) {
      const double ri = row0 + amp * std::sin(freq * j + phase);
      for (int i = static_cast<int>(ri) - 1; i <= static_cast<int>(ri) + 2; ++i) {
        if (i < 0 || i >= side) continue;
        if (std::hypot(i - cy, j - cx) >= fov_r - 1.0) continue;
        const double w = std::exp(-0.5 * (i - ri) * (i - ri) / 0.49);
        double* r = &px[0 * plane + i * side + j];
        double* g = &px[1 * plane + i * side + j];
        double* b = &px[2 * plane + i * side + j];
        *r = *r * (1 - w) + 0.30 * w;
        *g = *g * (1 - w) + 0.08 * w;
        *b = *b * (1 - w) + 0.06 * w;
      }
    }
  }
  const double ox = cx + 0.22 * side * (rng.uniform01() < 0.5 ? -1 : 1);
  const double oy = cy + 0.08 * side * (rng.uniform01() - 0.5);
  const double odr = 0.07 * side;
  for (int i = 0; i < side; ++i) {
    for (int j = 0; j < side; ++j) {
      const double d = std::hypot(i - oy, j - ox);
      if (d >= odr) continue;
      const double w = 1.0 - (d / odr) * (d / odr);
      double* r = &px[0 * plane + i * side + j];
      double* g = &px[1 * plane + i * side + j];
      double* b = &px[2 * plane + i * side + j];
      *r = *r * (1 - w) + 0.88 * w;
      *g = *g * (1 - w) + 0.78 * w;
      *b = *b * (1 - w) + 0.52 * w;
    }
  }
  clip01(img);
  return img;
}

// Vessel pixels recovered from the drawn curves: red-dominant and dark.
inline fundus::data::Plane vessel_plane(const fundus::FundusImage& img) {
  fundus::data::Plane p;
  p.height = img.height;
  p.width = img.width;
  p.v.assign(static_cast<std::size_t>(img.height) * img.width, 0.0);
  const int plane = img.height * img.width;
  for (int i = 0; i < plane; ++i) {
    const double r = img.pixels[i], g = img.pixels[plane + i];
    if (r > 0.2 && r < 0.45 && g < 0.15) p.v[i] = 1.0;
  }
  return p;
}

// Fixed degradation for the overfit benchmark: a family of consistent
// uneven-exposure disturbances plus mild blur and sensor noise, with small
// per-image parameter jitter indexed by k.
inline fundus::degrade::DegradationRecord overfit_record(int side, int k) {
  fundus::degrade::DegradationRecord rec;
  rec.seed = 9000 + static_cast<std::uint64_t>(k);
  fundus::degrade::LightParams l;
  l.alpha = 0.22 + 0.03 * (k % 4);
  l.beta = -0.12 - 0.015 * (k % 4);
  l.saturation = -0.18 - 0.02 * (k % 4);
  l.bias_amplitude = -0.28 - 0.02 * (k % 4);
  l.center_x = side * (0.48 + 0.02 * (k % 4));
  l.center_y = side * (0.55 - 0.02 * (k % 4));
  l.bias_radius = side * 0.42;
  l.smooth_sigma = 0.65 * l.bias_radius;
  l.mode = fundus::degrade::LightMode::kUnevenExposure;
  rec.light = l;
  fundus::degrade::BlurParams b;
  b.kernel_radius = 1;
  b.sigma = 0.03 * side;
  b.noise_std = 0.01;
  rec.blur = b;
  return rec;
}

}  // namespace toy
