#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "fundus/degrade.hpp"
#include "fundus/image.hpp"
#include "fundus/metrics.hpp"
#include "fundus/rng.hpp"

using namespace fundus;
using namespace fundus::degrade;

namespace {

FundusImage random_image(int h, int w, std::uint64_t seed) {
  FundusImage img(h, w);
  Rng rng(seed);
  for (double& v : img.pixels) v = rng.uniform01();
  return img;
}

// Independent direct-summation convolution with explicit reflect indexing.
std::vector<double> conv_oracle(const std::vector<double>& x, int h, int w,
                                const std::vector<double>& k, int radius) {
  auto fold = [](int i, int n) {
    while (i < 0 || i >= n) {
      if (i < 0) i = -i - 1;
      if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
  };
  const int n = 2 * radius + 1;
  std::vector<double> out(x.size(), 0.0);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int di = -radius; di <= radius; ++di)
        for (int dj = -radius; dj <= radius; ++dj)
          out[i * w + j] +=
              k[(di + radius) * n + (dj + radius)] * x[fold(i + di, h) * w + fold(j + dj, w)];
  return out;
}

}  // namespace

TEST_CASE("gaussian kernel normalizes, flattens, and matches hand values") {
  for (auto [r, s] : {std::pair{1, 0.5}, {2, 1.0}, {5, 3.0}, {1, 100.0}, {7, 0.2}}) {
    const auto k = gaussian_kernel(r, s);
    double sum = 0.0;
    for (double v : k) sum += v;
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
  const auto flat = gaussian_kernel(1, 1e6);
  for (double v : flat) CHECK(v == doctest::Approx(1.0 / 9.0).epsilon(1e-9));

  const auto k21 = gaussian_kernel(2, 1.0);
  CHECK(k21[2 * 5 + 2] == doctest::Approx(0.1621028216371266).epsilon(1e-12));
  CHECK(k21[0] == doctest::Approx(0.0029690167439504964).epsilon(1e-12));

  CHECK_THROWS_AS(gaussian_kernel(0, 1.0), ParamError);
  CHECK_THROWS_AS(gaussian_kernel(1, 0.0), ParamError);
  CHECK_THROWS_AS(gaussian_kernel_1d(1, -2.0), ParamError);
}

TEST_CASE("2-d kernel is the outer product of the 1-d kernel") {
  const auto k1 = gaussian_kernel_1d(3, 1.7);
  const auto k2 = gaussian_kernel(3, 1.7);
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j)
      CHECK(k2[i * 7 + j] == doctest::Approx(k1[i] * k1[j]).epsilon(1e-12));
}

TEST_CASE("reflect indexing duplicates edges") {
  CHECK(reflect_index(-1, 5) == 0);
  CHECK(reflect_index(-2, 5) == 1);
  CHECK(reflect_index(5, 5) == 4);
  CHECK(reflect_index(6, 5) == 3);
  CHECK(reflect_index(3, 5) == 3);
  CHECK(reflect_index(-7, 1) == 0);
  CHECK(reflect_index(12, 2) == 0);
}

TEST_CASE("direct convolution matches the brute-force oracle on 5x5") {
  Rng rng(10);
  std::vector<double> x(25);
  for (double& v : x) v = rng.uniform01();
  const auto k = gaussian_kernel(1, 1.0);
  const auto got = convolve_plane(x, 5, 5, k, 1);
  const auto want = conv_oracle(x, 5, 5, k, 1);
  for (int i = 0; i < 25; ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-6);
}

TEST_CASE("separable gaussian matches the dense kernel") {
  Rng rng(11);
  std::vector<double> x(19 * 23);
  for (double& v : x) v = rng.uniform01();
  for (auto [r, s] : {std::pair{1, 1.0}, {3, 2.5}, {6, 0.9}}) {
    const auto sep = convolve_plane_gaussian(x, 19, 23, r, s);
    const auto dense = convolve_plane(x, 19, 23, gaussian_kernel(r, s), r);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(sep[i] - dense[i]) <= 1e-12);
  }
}

TEST_CASE("illumination bias paints the open disk") {
  const auto zero = make_illumination_bias(8, 8, 4.0, 4.0, 1.5, 0.0);
  for (double v : zero) CHECK(v == 0.0);

  const double nl = 0.3;
  const auto field = make_illumination_bias(8, 8, 4.0, 4.0, 1.5, nl);
  int inside = 0;
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      const bool in = (j - 4.0) * (j - 4.0) + (i - 4.0) * (i - 4.0) < 2.25;
      CHECK(field[i * 8 + j] == (in ? nl : 0.0));
      inside += in;
    }
  CHECK(inside == 9);

  const auto full = make_illumination_bias(8, 8, 4.0, 4.0, 100.0, nl);
  for (double v : full) CHECK(v == nl);

  CHECK_THROWS_AS(make_illumination_bias(8, 8, 9.0, 4.0, 1.0, 0.1), ParamError);
  CHECK_THROWS_AS(make_illumination_bias(8, 8, 4.0, 4.0, 0.0, 0.1), ParamError);
}

TEST_CASE("light disturbance with neutral parameters is the identity") {
  const FundusImage img = random_image(16, 16, 20);
  LightParams p;
  p.center_x = 8.0;
  p.center_y = 8.0;
  p.bias_radius = 6.0;
  p.smooth_sigma = 4.0;
  CHECK(bytes_equal(apply_light_disturbance(img, p), img));
}

TEST_CASE("light disturbance scalar oracle on constant gray") {
  FundusImage img(16, 16, 0.5);
  LightParams p;
  p.alpha = -0.1;
  p.beta = 0.2;
  p.center_x = 8.0;
  p.center_y = 8.0;
  p.bias_radius = 6.0;
  p.smooth_sigma = 4.0;
  const FundusImage out = apply_light_disturbance(img, p);
  for (double v : out.pixels) CHECK(v == doctest::Approx(0.65).epsilon(1e-12));

  p.beta = 10.0;
  for (double v : apply_light_disturbance(img, p).pixels) CHECK(v == 1.0);
}

TEST_CASE("saturation scale keeps value and grays, desaturates color") {
  FundusImage img(16, 16, 0.0);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) {
      img.at(0, i, j) = 0.8;
      img.at(1, i, j) = 0.4;
      img.at(2, i, j) = 0.2;
    }
  LightParams p;
  p.saturation = -0.5;  // saturation halves
  p.center_x = 8.0;
  p.center_y = 8.0;
  p.bias_radius = 6.0;
  p.smooth_sigma = 4.0;
  const FundusImage out = apply_light_disturbance(img, p);
  // v stays max, each channel moves halfway toward it
  CHECK(out.at(0, 3, 3) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(out.at(1, 3, 3) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(out.at(2, 3, 3) == doctest::Approx(0.5).epsilon(1e-12));

  FundusImage gray(16, 16, 0.37);
  p.saturation = 0.4;
  CHECK(bytes_equal(apply_light_disturbance(gray, p), gray));
}

TEST_CASE("blur with an impulse kernel and no noise is the identity") {
  const FundusImage img = random_image(17, 16, 21);
  BlurParams p;
  p.kernel_radius = 1;
  p.sigma = 1e-4;
  p.noise_std = 0.0;
  Rng rng(0);
  CHECK(bytes_equal(apply_blur(img, p, rng), img));
}

TEST_CASE("blur preserves constants") {
  FundusImage img(16, 16, 0.42);
  BlurParams p;
  p.kernel_radius = 4;
  p.sigma = 2.0;
  p.noise_std = 0.0;
  Rng rng(0);
  for (double v : apply_blur(img, p, rng).pixels) CHECK(v == doctest::Approx(0.42).epsilon(1e-12));
}

TEST_CASE("blur matches conv oracle and adds noise in raster order") {
  const FundusImage img = random_image(16, 16, 22);
  BlurParams p;
  p.kernel_radius = 2;
  p.sigma = 1.3;
  p.noise_std = 0.01;
  Rng rng(777);
  const FundusImage got = apply_blur(img, p, rng);

  const auto k = gaussian_kernel(p.kernel_radius, p.sigma);
  FundusImage want = img;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> ch(256);
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) ch[i * 16 + j] = img.at(c, i, j);
    const auto blurred = conv_oracle(ch, 16, 16, k, p.kernel_radius);
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < 16; ++j) want.at(c, i, j) = blurred[i * 16 + j];
  }
  Rng noise(777);
  for (double& v : want.pixels) v = v + p.noise_std * noise.normal();
  clip01(want);
  for (std::size_t i = 0; i < want.pixels.size(); ++i) {
    CHECK(std::abs(got.pixels[i] - want.pixels[i]) <= 1e-9);
  }
}

TEST_CASE("artifact scalar formulas") {
  CHECK(artifact_sigma(25.0) == 25.0);
  CHECK(std::abs(artifact_amplitude(25.0) - 0.36237184837822667) <= 1e-9);
  CHECK(artifact_amplitude(0.0) == 0.0);
  for (double r : {1.0, 5.0, 40.0}) {
    CHECK(artifact_amplitude(r) > 0.0);
    CHECK(artifact_amplitude(r) < 1.0);
  }
}

TEST_CASE("artifacts render peak-normalized spots") {
  FundusImage img(32, 32, 0.0);
  ArtifactParams p;
  p.objects.push_back({8.0, 16.0, 16.0});
  const FundusImage out = apply_artifacts(img, p);
  const double amp = artifact_amplitude(8.0);
  const double sigma = artifact_sigma(8.0);
  CHECK(out.at(0, 16, 16) == doctest::Approx(amp).epsilon(1e-12));
  CHECK(out.at(1, 16, 17) == doctest::Approx(amp * std::exp(-1.0 / (2 * sigma * sigma)))
                                 .epsilon(1e-12));
  // patch radius is r/4 = 2: nothing outside it
  CHECK(out.at(2, 16, 19) == 0.0);

  CHECK(bytes_equal(apply_artifacts(img, ArtifactParams{}), img));
  ArtifactParams bad;
  bad.objects.push_back({3.0, 40.0, 5.0});
  CHECK_THROWS_AS(apply_artifacts(img, bad), ParamError);
}

TEST_CASE("sampler determinism and forced enable") {
  SamplerConfig cfg;
  cfg.enable_prob = 1.0;
  Rng a(5), b(5);
  const auto ra = sample_degradation(a, cfg, 64, 64);
  const auto rb = sample_degradation(b, cfg, 64, 64);
  CHECK(ra.light.has_value());
  CHECK(ra.blur.has_value());
  CHECK(ra.artifacts.has_value());
  CHECK(ra.to_json() == rb.to_json());

  cfg.enable_prob = 0.0;
  Rng c(6);
  const auto rc = sample_degradation(c, cfg, 64, 64);
  const int enabled = int(rc.light.has_value()) + int(rc.blur.has_value()) +
                      int(rc.artifacts.has_value());
  CHECK(enabled == 1);
}

TEST_CASE("sampled parameters stay inside configured ranges") {
  SamplerConfig cfg;
  Rng rng(123);
  const double size = 64.0;
  for (int it = 0; it < 10000; ++it) {
    const auto rec = sample_degradation(rng, cfg, 64, 64);
    if (rec.light) {
      const LightParams& l = *rec.light;
      CHECK(l.alpha >= -0.5);
      CHECK(l.alpha <= 0.5);
      CHECK(l.beta >= -0.5);
      CHECK(l.beta <= 0.5);
      CHECK(l.saturation >= -0.5);
      CHECK(l.saturation <= 0.5);
      CHECK(l.bias_amplitude >= -0.5);
      CHECK(l.bias_amplitude <= 0.5);
      const double rf = l.bias_radius / size;
      if (l.mode == LightMode::kLeak) {
        CHECK(rf >= 0.75);
        CHECK(rf <= 1.0);
      } else {
        CHECK(rf >= 0.3);
        CHECK(rf <= 0.5);
      }
      const double ratio = l.smooth_sigma / l.bias_radius;
      CHECK(ratio >= 0.55 - 1e-12);
      CHECK(ratio <= 0.75 + 1e-12);
      CHECK(l.center_x >= 0.375 * size);
      CHECK(l.center_x <= 0.625 * size);
      CHECK(l.center_y >= 0.375 * size);
      CHECK(l.center_y <= 0.625 * size);
    }
    if (rec.blur) {
      CHECK(rec.blur->kernel_radius >= 1);
      CHECK(rec.blur->sigma == doctest::Approx(0.03 * size));
    }
    if (rec.artifacts) {
      const auto n = rec.artifacts->objects.size();
      CHECK(n >= 10);
      CHECK(n <= 30);
      for (const auto& o : rec.artifacts->objects) {
        CHECK(o.radius / size >= 0.025);
        CHECK(o.radius / size <= 0.05);
        CHECK(o.center_x >= 0.0);
        CHECK(o.center_x < size);
        CHECK(o.center_y >= 0.0);
        CHECK(o.center_y < size);
      }
    }
  }
}

TEST_CASE("degenerate sampler ranges are rejected, equal bounds are not") {
  SamplerConfig cfg;
  cfg.alpha = {0.5, -0.5};
  Rng rng(1);
  CHECK_THROWS_AS(sample_degradation(rng, cfg, 64, 64), ParamError);
  cfg.alpha = {0.1, 0.1};
  const auto rec = sample_degradation(rng, cfg, 64, 64);
  if (rec.light) CHECK(rec.light->alpha == 0.1);

  SamplerConfig bad;
  bad.enable_prob = 1.5;
  CHECK_THROWS_AS(bad.validate(), ParamError);
}

TEST_CASE("artifact centers respect a fov mask") {
  std::vector<std::uint8_t> mask(64 * 64, 0);
  for (int i = 20; i < 40; ++i)
    for (int j = 20; j < 40; ++j) mask[i * 64 + j] = 1;
  SamplerConfig cfg;
  cfg.enable_prob = 1.0;
  Rng rng(9);
  for (int it = 0; it < 50; ++it) {
    const auto rec = sample_degradation(rng, cfg, 64, 64, &mask);
    for (const auto& o : rec.artifacts->objects) {
      CHECK(o.center_x >= 20.0);
      CHECK(o.center_x < 40.0);
      CHECK(o.center_y >= 20.0);
      CHECK(o.center_y < 40.0);
    }
  }
  const std::vector<std::uint8_t> empty(64 * 64, 0);
  CHECK_THROWS_AS(sample_degradation(rng, cfg, 64, 64, &empty), ParamError);
}

TEST_CASE("record json round trip preserves every field") {
  SamplerConfig cfg;
  cfg.enable_prob = 1.0;
  Rng rng(31);
  const auto rec = sample_degradation(rng, cfg, 64, 48);
  const std::string text = rec.to_json();
  const auto back = DegradationRecord::from_json(text);
  CHECK(back.to_json() == text);
  CHECK(back.seed == rec.seed);

  const FundusImage img = random_image(48, 64, 32);
  CHECK(bytes_equal(apply(img, rec), apply(img, back)));

  CHECK_THROWS_AS(DegradationRecord::from_json("{not json"), IoError);
  CHECK_THROWS_AS(DegradationRecord::from_json("{\"schema_version\":1}"), IoError);
}

TEST_CASE("record with no factor is rejected, neutral factor is identity") {
  const FundusImage img = random_image(16, 16, 33);
  DegradationRecord rec;
  CHECK_THROWS_AS(apply(img, rec), ParamError);

  LightParams neutral;
  neutral.center_x = 8.0;
  neutral.center_y = 8.0;
  neutral.bias_radius = 4.0;
  neutral.smooth_sigma = 2.0;
  rec.light = neutral;
  CHECK(bytes_equal(apply(img, rec), img));
}

TEST_CASE("replay is byte-identical and damage is monotone") {
  const FundusImage img = random_image(64, 64, 34);
  SamplerConfig cfg;
  Rng rng(35);
  const auto rec = sample_degradation(rng, cfg, 64, 64);
  const FundusImage d1 = apply(img, rec);
  const FundusImage d2 = apply(img, rec);
  CHECK(bytes_equal(d1, d2));

  // each single non-neutral factor strictly lowers psnr
  DegradationRecord light_only;
  LightParams lp;
  lp.alpha = 0.2;
  lp.beta = -0.1;
  lp.saturation = 0.3;
  lp.bias_amplitude = 0.25;
  lp.center_x = 32.0;
  lp.center_y = 32.0;
  lp.bias_radius = 25.0;
  lp.smooth_sigma = 15.0;
  light_only.light = lp;

  DegradationRecord blur_only;
  blur_only.seed = 4242;
  BlurParams bp;
  bp.kernel_radius = 2;
  bp.sigma = 1.9;
  bp.noise_std = 0.01;
  blur_only.blur = bp;

  DegradationRecord art_only;
  ArtifactParams ap;
  ap.objects.push_back({10.0, 20.0, 20.0});
  ap.objects.push_back({6.0, 44.0, 40.0});
  art_only.artifacts = ap;

  const double clean = metrics::psnr(img, img);
  CHECK(clean == 100.0);
  for (const auto* rec1 : {&light_only, &blur_only, &art_only}) {
    CHECK(metrics::psnr(apply(img, *rec1), img) < clean);
  }

  // outputs stay bounded
  for (double v : d1.pixels) {
    CHECK(std::isfinite(v));
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}
