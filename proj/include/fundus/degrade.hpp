#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "fundus/image.hpp"
#include "fundus/rng.hpp"

namespace fundus::degrade {

// Three-factor fundus degradation model: light transmission disturbance,
// image blurring, retinal artifacts. Every operation is a pure function of
// its inputs; a DegradationRecord replays bit-exactly.

// ---------------------------------------------------------------------------
// Parameter types

enum class LightMode { kLeak, kUnevenExposure };

struct LightParams {
  double alpha = 0.0;        // contrast perturbation about identity (multiplier 1+alpha)
  double beta = 0.0;         // brightness offset
  double saturation = 0.0;   // saturation perturbation (scale 1+saturation in HSV)
  double bias_amplitude = 0.0;  // n_l, intensity of the illumination bias disk
  double center_x = 0.0;     // a (column), pixels
  double center_y = 0.0;     // b (row), pixels
  double bias_radius = 1.0;  // r_L, pixels
  double smooth_sigma = 1.0; // sigma_L, pixels
  LightMode mode = LightMode::kUnevenExposure;
  bool literal_alpha = false;  // multiplier alpha instead of 1+alpha (and saturation likewise)

  void validate(int height, int width) const;
};

struct BlurParams {
  int kernel_radius = 1;     // r_B, pixels
  double sigma = 1.0;        // sigma_B, pixels
  double noise_std = 0.0;    // additive Gaussian noise std, intensity units

  void validate() const;
};

struct ArtifactObject {
  double radius = 1.0;  // r_k, pixels
  double center_x = 0.0;
  double center_y = 0.0;
};

struct ArtifactParams {
  std::vector<ArtifactObject> objects;

  void validate(int height, int width) const;
};

// Derived per-object quantities (sigma_k = 5 + 0.8 r_k and the amplitude
// o_k = 1 - exp(-(0.5 + 0.04 r_k) * 0.012 r_k)).
double artifact_sigma(double radius);
double artifact_amplitude(double radius);

// One sampled degradation. Replaying a record on the same input reproduces
// the degraded image bit-exactly; the seed drives the blur noise stream.
struct DegradationRecord {
  std::uint64_t seed = 0;
  std::optional<LightParams> light;
  std::optional<BlurParams> blur;
  std::optional<ArtifactParams> artifacts;
  // Factors always compose in this fixed order.
  static constexpr const char* kOrder = "light,blur,artifacts";

  void validate(int height, int width) const;

  std::string to_json() const;
  static DegradationRecord from_json(const std::string& text);
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

// Sampling ranges for every degradation quantity. Radius/size quantities are
// fractions of the image size w (the smaller image side).
struct SamplerConfig {
  Range alpha{-0.5, 0.5};
  Range beta{-0.5, 0.5};
  Range saturation{-0.5, 0.5};
  Range bias_amplitude{-0.5, 0.5};   // n_l
  Range center_frac{0.375, 0.625};   // each center coordinate, fraction of its image side
  Range leak_radius_frac{0.75, 1.0};     // r_L/w, light-leak mode
  Range uneven_radius_frac{0.3, 0.5};    // r_L/w, uneven-exposure mode
  Range smooth_sigma_ratio{0.55, 0.75};  // sigma_L/r_L, both modes
  double blur_sigma_frac = 0.03;         // sigma_B/w (fixed, not sampled)
  Range blur_radius_frac{0.01, 0.015};   // r_B/w
  double blur_noise_std = 0.01;
  long artifact_count_lo = 10;  // K range, inclusive
  long artifact_count_hi = 30;
  Range artifact_radius_frac{0.025, 0.05};  // r_k/w
  double enable_prob = 0.5;  // per-factor enable probability
  bool literal_alpha = false;

  void validate() const;
};

// JSON round trip for the sampler ranges (config files, run snapshots).
// Absent keys keep their defaults.
std::string sampler_to_json(const SamplerConfig& cfg);
SamplerConfig sampler_from_json(const std::string& text);

// ---------------------------------------------------------------------------
// Kernel / field primitives (exposed for direct testing on small arrays)

// Square 2-D Gaussian kernel of side 2*radius+1, entries proportional to
// exp(-(di^2+dj^2)/(2 sigma^2)), renormalized to sum exactly 1 (so heavily
// truncated kernels remain valid filters).
std::vector<double> gaussian_kernel(int radius, double sigma);

// Matching 1-D kernel; the normalized 2-D kernel is its outer product.
std::vector<double> gaussian_kernel_1d(int radius, double sigma);

// Mirror-with-edge-duplication index fold (x[-1] == x[0], x[n] == x[n-1]),
// iterated until in range. All reflect-padded convolutions use this map.
int reflect_index(int i, int n);

// Direct 2-D convolution of a single plane with a square kernel of given
// radius, reflect padding.
std::vector<double> convolve_plane(const std::vector<double>& plane, int height, int width,
                                   const std::vector<double>& kernel, int radius);

// Separable convolution with a Gaussian; numerically identical to
// convolve_plane with gaussian_kernel up to floating-point roundoff.
std::vector<double> convolve_plane_gaussian(const std::vector<double>& plane, int height,
                                            int width, int radius, double sigma);

// Illumination bias field: bias_amplitude strictly inside the disk of radius
// bias_radius around (center_x, center_y), zero elsewhere.
std::vector<double> make_illumination_bias(int height, int width, double center_x,
                                           double center_y, double bias_radius,
                                           double bias_amplitude);

// ---------------------------------------------------------------------------
// Degradation factors

FundusImage apply_light_disturbance(const FundusImage& img, const LightParams& p);
FundusImage apply_blur(const FundusImage& img, const BlurParams& p, Rng& rng);
FundusImage apply_artifacts(const FundusImage& img, const ArtifactParams& p);

// Samples a record for an image of the given extent. Draw order (fixed):
//   1. record seed (one raw draw)
//   2. three enable draws (light, blur, artifacts); if none hit, one more
//      draw forces a factor uniformly
//   3. light: alpha, beta, saturation, bias amplitude, mode, radius fraction,
//      sigma ratio, center-x fraction, center-y fraction
//   4. blur: radius fraction
//   5. artifacts: count, then per object radius fraction and center fractions
//      (center redrawn until inside fov_mask when one is supplied)
DegradationRecord sample_degradation(Rng& rng, const SamplerConfig& cfg, int width, int height,
                                     const std::vector<std::uint8_t>* fov_mask = nullptr);

// Applies the enabled factors in the fixed order light -> blur -> artifacts.
FundusImage apply(const FundusImage& img, const DegradationRecord& rec);

}  // namespace fundus::degrade
