#include "fundus/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include <json.hpp>

#include "fundus/common.hpp"

namespace fundus::degrade {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Validation

void LightParams::validate(int height, int width) const {
  if (!std::isfinite(alpha) || !std::isfinite(beta) || !std::isfinite(saturation) ||
      !std::isfinite(bias_amplitude)) {
    throw ParamError("light parameters must be finite");
  }
  if (!(bias_radius > 0.0)) throw ParamError("light bias_radius must be > 0");
  if (!(smooth_sigma > 0.0)) throw ParamError("light smooth_sigma must be > 0");
  if (!(center_x >= 0.0 && center_x < width && center_y >= 0.0 && center_y < height)) {
    throw ParamError("light bias center outside image");
  }
}

void BlurParams::validate() const {
  if (kernel_radius < 1) throw ParamError("blur kernel_radius must be >= 1");
  if (!(sigma > 0.0)) throw ParamError("blur sigma must be > 0");
  if (!(noise_std >= 0.0)) throw ParamError("blur noise_std must be >= 0");
}

void ArtifactParams::validate(int height, int width) const {
  for (const ArtifactObject& o : objects) {
    if (!(o.radius > 0.0)) throw ParamError("artifact radius must be > 0");
    if (!(o.center_x >= 0.0 && o.center_x < width && o.center_y >= 0.0 && o.center_y < height)) {
      throw ParamError("artifact center outside image");
    }
  }
}

void DegradationRecord::validate(int height, int width) const {
  if (!light && !blur && !artifacts) throw ParamError("record must enable at least one factor");
  if (light) light->validate(height, width);
  if (blur) blur->validate();
  if (artifacts) artifacts->validate(height, width);
}

void SamplerConfig::validate() const {
  auto check = [](const Range& r, const char* name) {
    if (!(std::isfinite(r.lo) && std::isfinite(r.hi)) || r.lo > r.hi) {
      throw ParamError(std::string("sampler range '") + name + "' is degenerate");
    }
  };
  check(alpha, "alpha");
  check(beta, "beta");
  check(saturation, "saturation");
  check(bias_amplitude, "bias_amplitude");
  check(center_frac, "center_frac");
  check(leak_radius_frac, "leak_radius_frac");
  check(uneven_radius_frac, "uneven_radius_frac");
  check(smooth_sigma_ratio, "smooth_sigma_ratio");
  check(blur_radius_frac, "blur_radius_frac");
  check(artifact_radius_frac, "artifact_radius_frac");
  if (!(leak_radius_frac.lo > 0.0) || !(uneven_radius_frac.lo > 0.0) ||
      !(smooth_sigma_ratio.lo > 0.0) || !(blur_radius_frac.lo > 0.0) ||
      !(artifact_radius_frac.lo > 0.0)) {
    throw ParamError("radius and sigma-ratio ranges must be positive");
  }
  if (!(blur_sigma_frac > 0.0)) throw ParamError("blur_sigma_frac must be > 0");
  if (!(blur_noise_std >= 0.0)) throw ParamError("blur_noise_std must be >= 0");
  if (artifact_count_lo < 0 || artifact_count_lo > artifact_count_hi) {
    throw ParamError("artifact count range is degenerate");
  }
  if (!(enable_prob >= 0.0 && enable_prob <= 1.0)) throw ParamError("enable_prob must be in [0,1]");
}

double artifact_sigma(double radius) { return 5.0 + 0.8 * radius; }

double artifact_amplitude(double radius) {
  return 1.0 - std::exp(-(0.5 + 0.04 * radius) * (0.012 * radius));
}

// ---------------------------------------------------------------------------
// Kernels and convolution

std::vector<double> gaussian_kernel_1d(int radius, double sigma) {
  if (radius < 1) throw ParamError("gaussian kernel radius must be >= 1");
  if (!(sigma > 0.0)) throw ParamError("gaussian kernel sigma must be > 0");
  const int n = 2 * radius + 1;
  std::vector<double> k(n);
  double sum = 0.0;
  for (int d = -radius; d <= radius; ++d) {
    const double v = std::exp(-(static_cast<double>(d) * d) / (2.0 * sigma * sigma));
    k[d + radius] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

std::vector<double> gaussian_kernel(int radius, double sigma) {
  if (radius < 1) throw ParamError("gaussian kernel radius must be >= 1");
  if (!(sigma > 0.0)) throw ParamError("gaussian kernel sigma must be > 0");
  const int n = 2 * radius + 1;
  std::vector<double> k(static_cast<std::size_t>(n) * n);
  double sum = 0.0;
  for (int di = -radius; di <= radius; ++di) {
    for (int dj = -radius; dj <= radius; ++dj) {
      const double v =
          std::exp(-(static_cast<double>(di) * di + static_cast<double>(dj) * dj) /
                   (2.0 * sigma * sigma));
      k[(di + radius) * n + (dj + radius)] = v;
      sum += v;
    }
  }
  for (double& v : k) v /= sum;
  return k;
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - i - 1;
  }
  return i;
}

std::vector<double> convolve_plane(const std::vector<double>& plane, int height, int width,
                                   const std::vector<double>& kernel, int radius) {
  if (radius < 0) throw ParamError("convolution radius must be >= 0");
  const int n = 2 * radius + 1;
  if (kernel.size() != static_cast<std::size_t>(n) * n) {
    throw ParamError("kernel size does not match radius");
  }
  if (plane.size() != static_cast<std::size_t>(height) * width) {
    throw ParamError("plane size does not match extent");
  }
  std::vector<double> out(plane.size());
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      double acc = 0.0;
      for (int di = -radius; di <= radius; ++di) {
        const int si = reflect_index(i + di, height);
        for (int dj = -radius; dj <= radius; ++dj) {
          const int sj = reflect_index(j + dj, width);
          acc += kernel[(di + radius) * n + (dj + radius)] * plane[si * width + sj];
        }
      }
      out[i * width + j] = acc;
    }
  }
  return out;
}

namespace {

// One separable pass along rows (horizontal) or columns (vertical).
void conv1d_pass(const std::vector<double>& in, std::vector<double>& out, int height, int width,
                 const std::vector<double>& k, int radius, bool horizontal) {
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      double acc = 0.0;
      if (horizontal) {
        for (int d = -radius; d <= radius; ++d) {
          acc += k[d + radius] * in[i * width + reflect_index(j + d, width)];
        }
      } else {
        for (int d = -radius; d <= radius; ++d) {
          acc += k[d + radius] * in[reflect_index(i + d, height) * width + j];
        }
      }
      out[i * width + j] = acc;
    }
  }
}

}  // namespace

std::vector<double> convolve_plane_gaussian(const std::vector<double>& plane, int height,
                                            int width, int radius, double sigma) {
  if (plane.size() != static_cast<std::size_t>(height) * width) {
    throw ParamError("plane size does not match extent");
  }
  const std::vector<double> k = gaussian_kernel_1d(radius, sigma);
  std::vector<double> tmp(plane.size());
  std::vector<double> out(plane.size());
  conv1d_pass(plane, tmp, height, width, k, radius, /*horizontal=*/true);
  conv1d_pass(tmp, out, height, width, k, radius, /*horizontal=*/false);
  return out;
}

std::vector<double> make_illumination_bias(int height, int width, double center_x,
                                           double center_y, double bias_radius,
                                           double bias_amplitude) {
  if (!(bias_radius > 0.0)) throw ParamError("bias_radius must be > 0");
  if (!(center_x >= 0.0 && center_x < width && center_y >= 0.0 && center_y < height)) {
    throw ParamError("bias center outside image");
  }
  std::vector<double> field(static_cast<std::size_t>(height) * width, 0.0);
  const double r2 = bias_radius * bias_radius;
  for (int i = 0; i < height; ++i) {
    const double dy = i - center_y;
    for (int j = 0; j < width; ++j) {
      const double dx = j - center_x;
      if (dx * dx + dy * dy < r2) field[i * width + j] = bias_amplitude;
    }
  }
  return field;
}

// ---------------------------------------------------------------------------
// Factors

FundusImage apply_light_disturbance(const FundusImage& img, const LightParams& p) {
  img.validate();
  p.validate(img.height, img.width);
  const int h = img.height;
  const int w = img.width;

  std::vector<double> bias =
      make_illumination_bias(h, w, p.center_x, p.center_y, p.bias_radius, p.bias_amplitude);
  if (p.bias_amplitude != 0.0) {
    const int radius = std::max(1, static_cast<int>(std::lround(p.bias_radius)));
    bias = convolve_plane_gaussian(bias, h, w, radius, p.smooth_sigma);
  }

  const double contrast = p.literal_alpha ? p.alpha : 1.0 + p.alpha;
  const double sat = p.literal_alpha ? p.saturation : 1.0 + p.saturation;

  FundusImage out = img;
  const std::size_t plane = out.pixel_count();
  for (int c = 0; c < 3; ++c) {
    for (std::size_t k = 0; k < plane; ++k) {
      out.pixels[c * plane + k] = contrast * (img.pixels[c * plane + k] + bias[k]) + p.beta;
    }
  }

  // Scale the HSV saturation channel in place: c -> V - sat*(V - c) keeps hue
  // and value and multiplies (V - min)/V by sat, without an HSV round trip
  // (which is ill-defined for the out-of-range values the clip removes later).
  if (sat != 1.0) {
    for (std::size_t k = 0; k < plane; ++k) {
      double& r = out.pixels[0 * plane + k];
      double& g = out.pixels[1 * plane + k];
      double& b = out.pixels[2 * plane + k];
      const double v = std::max({r, g, b});
      r = v - sat * (v - r);
      g = v - sat * (v - g);
      b = v - sat * (v - b);
    }
  }
  clip01(out);
  return out;
}

FundusImage apply_blur(const FundusImage& img, const BlurParams& p, Rng& rng) {
  img.validate();
  p.validate();
  const std::size_t plane = img.pixel_count();
  FundusImage out = img;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> ch(img.pixels.begin() + c * plane, img.pixels.begin() + (c + 1) * plane);
    ch = convolve_plane_gaussian(ch, img.height, img.width, p.kernel_radius, p.sigma);
    std::copy(ch.begin(), ch.end(), out.pixels.begin() + c * plane);
  }
  if (p.noise_std > 0.0) {
    for (double& v : out.pixels) v += p.noise_std * rng.normal();
  }
  clip01(out);
  return out;
}

FundusImage apply_artifacts(const FundusImage& img, const ArtifactParams& p) {
  img.validate();
  p.validate(img.height, img.width);
  FundusImage out = img;
  const int h = img.height;
  const int w = img.width;
  const std::size_t plane = out.pixel_count();
  for (const ArtifactObject& o : p.objects) {
    const int radius = std::max(1, static_cast<int>(std::lround(o.radius / 4.0)));
    const double sigma = artifact_sigma(o.radius);
    const double amp = artifact_amplitude(o.radius);
    const int ci = static_cast<int>(std::lround(o.center_y));
    const int cj = static_cast<int>(std::lround(o.center_x));
    for (int di = -radius; di <= radius; ++di) {
      const int i = ci + di;
      if (i < 0 || i >= h) continue;
      for (int dj = -radius; dj <= radius; ++dj) {
        const int j = cj + dj;
        if (j < 0 || j >= w) continue;
        // Peak-normalized spot: exp value is 1 at the center by construction.
        const double spot =
            amp * std::exp(-(static_cast<double>(di) * di + static_cast<double>(dj) * dj) /
                           (2.0 * sigma * sigma));
        for (int c = 0; c < 3; ++c) out.pixels[c * plane + i * w + j] += spot;
      }
    }
  }
  clip01(out);
  return out;
}

// ---------------------------------------------------------------------------
// Sampling

DegradationRecord sample_degradation(Rng& rng, const SamplerConfig& cfg, int width, int height,
                                     const std::vector<std::uint8_t>* fov_mask) {
  cfg.validate();
  if (width < 16 || height < 16) throw ParamError("image extent must be >= 16");
  if (fov_mask) {
    if (fov_mask->size() != static_cast<std::size_t>(height) * width) {
      throw ParamError("fov_mask size does not match extent");
    }
    if (std::find_if(fov_mask->begin(), fov_mask->end(), [](std::uint8_t m) { return m != 0; }) ==
        fov_mask->end()) {
      throw ParamError("fov_mask has no interior pixels");
    }
  }
  const double size = std::min(width, height);

  DegradationRecord rec;
  rec.seed = rng.next_u64();

  bool enable_light = rng.uniform01() < cfg.enable_prob;
  bool enable_blur = rng.uniform01() < cfg.enable_prob;
  bool enable_artifacts = rng.uniform01() < cfg.enable_prob;
  if (!enable_light && !enable_blur && !enable_artifacts) {
    switch (rng.uniform_int(0, 2)) {
      case 0: enable_light = true; break;
      case 1: enable_blur = true; break;
      default: enable_artifacts = true; break;
    }
  }

  if (enable_light) {
    LightParams lp;
    lp.literal_alpha = cfg.literal_alpha;
    lp.alpha = rng.uniform(cfg.alpha.lo, cfg.alpha.hi);
    lp.beta = rng.uniform(cfg.beta.lo, cfg.beta.hi);
    lp.saturation = rng.uniform(cfg.saturation.lo, cfg.saturation.hi);
    lp.bias_amplitude = rng.uniform(cfg.bias_amplitude.lo, cfg.bias_amplitude.hi);
    lp.mode = rng.uniform_int(0, 1) == 0 ? LightMode::kLeak : LightMode::kUnevenExposure;
    const Range& rf = lp.mode == LightMode::kLeak ? cfg.leak_radius_frac : cfg.uneven_radius_frac;
    lp.bias_radius = rng.uniform(rf.lo, rf.hi) * size;
    lp.smooth_sigma = rng.uniform(cfg.smooth_sigma_ratio.lo, cfg.smooth_sigma_ratio.hi) *
                      lp.bias_radius;
    lp.center_x = rng.uniform(cfg.center_frac.lo, cfg.center_frac.hi) * width;
    lp.center_y = rng.uniform(cfg.center_frac.lo, cfg.center_frac.hi) * height;
    rec.light = lp;
  }

  if (enable_blur) {
    BlurParams bp;
    bp.kernel_radius =
        std::max(1, static_cast<int>(std::lround(
                        rng.uniform(cfg.blur_radius_frac.lo, cfg.blur_radius_frac.hi) * size)));
    bp.sigma = cfg.blur_sigma_frac * size;
    bp.noise_std = cfg.blur_noise_std;
    rec.blur = bp;
  }

  if (enable_artifacts) {
    ArtifactParams ap;
    const long count = rng.uniform_int(cfg.artifact_count_lo, cfg.artifact_count_hi);
    ap.objects.reserve(static_cast<std::size_t>(count));
    for (long k = 0; k < count; ++k) {
      ArtifactObject o;
      o.radius = rng.uniform(cfg.artifact_radius_frac.lo, cfg.artifact_radius_frac.hi) * size;
      constexpr int kMaxTries = 10000;
      int tries = 0;
      for (;;) {
        o.center_x = rng.uniform(0.0, static_cast<double>(width));
        o.center_y = rng.uniform(0.0, static_cast<double>(height));
        if (!fov_mask) break;
        const int i = std::min(static_cast<int>(o.center_y), height - 1);
        const int j = std::min(static_cast<int>(o.center_x), width - 1);
        if ((*fov_mask)[i * width + j] != 0) break;
        if (++tries >= kMaxTries) throw ParamError("could not place artifact inside fov_mask");
      }
      ap.objects.push_back(o);
    }
    rec.artifacts = std::move(ap);
  }

  return rec;
}

FundusImage apply(const FundusImage& img, const DegradationRecord& rec) {
  img.validate();
  rec.validate(img.height, img.width);
  FundusImage out = img;
  if (rec.light) out = apply_light_disturbance(out, *rec.light);
  if (rec.blur) {
    Rng noise(Rng::derive(rec.seed, {Rng::key("blur_noise")}));
    out = apply_blur(out, *rec.blur, noise);
  }
  if (rec.artifacts) out = apply_artifacts(out, *rec.artifacts);
  return out;
}

// ---------------------------------------------------------------------------
// Record serialization

std::string DegradationRecord::to_json() const {
  json j;
  j["schema_version"] = 1;
  j["seed"] = seed;
  j["order"] = kOrder;
  if (light) {
    j["light"] = {{"alpha", light->alpha},
                  {"beta", light->beta},
                  {"saturation", light->saturation},
                  {"bias_amplitude", light->bias_amplitude},
                  {"center_x", light->center_x},
                  {"center_y", light->center_y},
                  {"bias_radius", light->bias_radius},
                  {"smooth_sigma", light->smooth_sigma},
                  {"mode", light->mode == LightMode::kLeak ? "leak" : "uneven_exposure"},
                  {"literal_alpha", light->literal_alpha}};
  } else {
    j["light"] = nullptr;
  }
  if (blur) {
    j["blur"] = {{"kernel_radius", blur->kernel_radius},
                 {"sigma", blur->sigma},
                 {"noise_std", blur->noise_std}};
  } else {
    j["blur"] = nullptr;
  }
  if (artifacts) {
    json objs = json::array();
    for (const ArtifactObject& o : artifacts->objects) {
      objs.push_back({{"radius", o.radius}, {"center_x", o.center_x}, {"center_y", o.center_y}});
    }
    j["artifacts"] = {{"objects", std::move(objs)}};
  } else {
    j["artifacts"] = nullptr;
  }
  return j.dump(2);
}

DegradationRecord DegradationRecord::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed degradation record: ") + e.what());
  }
  try {
    if (j.at("schema_version").get<int>() != 1) {
      throw IoError("unsupported degradation record schema_version");
    }
    DegradationRecord rec;
    rec.seed = j.at("seed").get<std::uint64_t>();
    if (!j.at("light").is_null()) {
      const json& l = j["light"];
      LightParams lp;
      lp.alpha = l.at("alpha").get<double>();
      lp.beta = l.at("beta").get<double>();
      lp.saturation = l.at("saturation").get<double>();
      lp.bias_amplitude = l.at("bias_amplitude").get<double>();
      lp.center_x = l.at("center_x").get<double>();
      lp.center_y = l.at("center_y").get<double>();
      lp.bias_radius = l.at("bias_radius").get<double>();
      lp.smooth_sigma = l.at("smooth_sigma").get<double>();
      const std::string mode = l.at("mode").get<std::string>();
      if (mode == "leak") {
        lp.mode = LightMode::kLeak;
      } else if (mode == "uneven_exposure") {
        lp.mode = LightMode::kUnevenExposure;
      } else {
        throw IoError("unknown light mode '" + mode + "'");
      }
      lp.literal_alpha = l.at("literal_alpha").get<bool>();
      rec.light = lp;
    }
    if (!j.at("blur").is_null()) {
      const json& b = j["blur"];
      BlurParams bp;
      bp.kernel_radius = b.at("kernel_radius").get<int>();
      bp.sigma = b.at("sigma").get<double>();
      bp.noise_std = b.at("noise_std").get<double>();
      rec.blur = bp;
    }
    if (!j.at("artifacts").is_null()) {
      ArtifactParams ap;
      for (const json& jo : j["artifacts"].at("objects")) {
        ArtifactObject o;
        o.radius = jo.at("radius").get<double>();
        o.center_x = jo.at("center_x").get<double>();
        o.center_y = jo.at("center_y").get<double>();
        ap.objects.push_back(o);
      }
      rec.artifacts = std::move(ap);
    }
    if (!rec.light && !rec.blur && !rec.artifacts) {
      throw IoError("degradation record enables no factor");
    }
    return rec;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed degradation record: ") + e.what());
  }
}

std::string sampler_to_json(const SamplerConfig& cfg) {
  const auto range = [](const Range& r) { return json{{"lo", r.lo}, {"hi", r.hi}}; };
  json j;
  j["alpha"] = range(cfg.alpha);
  j["beta"] = range(cfg.beta);
  j["saturation"] = range(cfg.saturation);
  j["bias_amplitude"] = range(cfg.bias_amplitude);
  j["center_frac"] = range(cfg.center_frac);
  j["leak_radius_frac"] = range(cfg.leak_radius_frac);
  j["uneven_radius_frac"] = range(cfg.uneven_radius_frac);
  j["smooth_sigma_ratio"] = range(cfg.smooth_sigma_ratio);
  j["blur_sigma_frac"] = cfg.blur_sigma_frac;
  j["blur_radius_frac"] = range(cfg.blur_radius_frac);
  j["blur_noise_std"] = cfg.blur_noise_std;
  j["artifact_count_lo"] = cfg.artifact_count_lo;
  j["artifact_count_hi"] = cfg.artifact_count_hi;
  j["artifact_radius_frac"] = range(cfg.artifact_radius_frac);
  j["enable_prob"] = cfg.enable_prob;
  j["literal_alpha"] = cfg.literal_alpha;
  return j.dump(2);
}

SamplerConfig sampler_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed sampler config: ") + e.what());
  }
  SamplerConfig cfg;
  try {
    const auto range = [&](const char* name, Range& r) {
      if (!j.contains(name)) return;
      r.lo = j[name].at("lo").get<double>();
      r.hi = j[name].at("hi").get<double>();
    };
    range("alpha", cfg.alpha);
    range("beta", cfg.beta);
    range("saturation", cfg.saturation);
    range("bias_amplitude", cfg.bias_amplitude);
    range("center_frac", cfg.center_frac);
    range("leak_radius_frac", cfg.leak_radius_frac);
    range("uneven_radius_frac", cfg.uneven_radius_frac);
    range("smooth_sigma_ratio", cfg.smooth_sigma_ratio);
    cfg.blur_sigma_frac = j.value("blur_sigma_frac", cfg.blur_sigma_frac);
    range("blur_radius_frac", cfg.blur_radius_frac);
    cfg.blur_noise_std = j.value("blur_noise_std", cfg.blur_noise_std);
    cfg.artifact_count_lo = j.value("artifact_count_lo", cfg.artifact_count_lo);
    cfg.artifact_count_hi = j.value("artifact_count_hi", cfg.artifact_count_hi);
    range("artifact_radius_frac", cfg.artifact_radius_frac);
    cfg.enable_prob = j.value("enable_prob", cfg.enable_prob);
    cfg.literal_alpha = j.value("literal_alpha", cfg.literal_alpha);
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed sampler config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

}  // namespace fundus::degrade
