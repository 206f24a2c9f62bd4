#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include <json.hpp>

#include "fundus/image.hpp"
#include "fundus/metrics.hpp"
#include "fundus/rng.hpp"

using namespace fundus;
using metrics::psnr;
using metrics::ssim;

namespace {

FundusImage random_image(int h, int w, std::uint64_t seed) {
  FundusImage img(h, w);
  Rng rng(seed);
  for (double& v : img.pixels) v = rng.uniform01();
  return img;
}

// Direct-formula SSIM oracle: dense 11x11 window loops, no separability, no
// shared code with the implementation.
double ssim_oracle(const FundusImage& a, const FundusImage& b) {
  std::array<double, 121> w{};
  double wsum = 0.0;
  for (int di = -5; di <= 5; ++di)
    for (int dj = -5; dj <= 5; ++dj) {
      const double v = std::exp(-(di * di + dj * dj) / (2.0 * 1.5 * 1.5));
      w[(di + 5) * 11 + (dj + 5)] = v;
      wsum += v;
    }
  for (double& v : w) v /= wsum;

  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0.0;
  int count = 0;
  for (int c = 0; c < 3; ++c) {
    for (int ci = 5; ci < a.height - 5; ++ci) {
      for (int cj = 5; cj < a.width - 5; ++cj) {
        double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
        for (int di = -5; di <= 5; ++di)
          for (int dj = -5; dj <= 5; ++dj) {
            const double wv = w[(di + 5) * 11 + (dj + 5)];
            const double x = a.at(c, ci + di, cj + dj);
            const double y = b.at(c, ci + di, cj + dj);
            mx += wv * x;
            my += wv * y;
            mxx += wv * x * x;
            myy += wv * y * y;
            mxy += wv * x * y;
          }
        const double vx = mxx - mx * mx;
        const double vy = myy - my * my;
        const double cov = mxy - mx * my;
        total += ((2 * mx * my + c1) * (2 * cov + c2)) /
                 ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    }
  }
  return total / count;
}

}  // namespace

TEST_CASE("psnr analytic cases") {
  const FundusImage img = random_image(16, 16, 1);
  CHECK(psnr(img, img) == 100.0);

  FundusImage a(16, 16, 0.2), b(16, 16, 0.3);
  CHECK(std::abs(psnr(a, b) - 20.0) <= 1e-9);

  FundusImage c(16, 16, 0.25), d(16, 16, 0.75);
  CHECK(std::abs(psnr(c, d) - 6.020599913279624) <= 1e-9);

  CHECK_THROWS_AS(psnr(a, FundusImage(16, 17, 0.0)), ParamError);
}

TEST_CASE("psnr decreases strictly with noise amplitude") {
  const FundusImage clean = random_image(16, 16, 2);
  double prev = 101.0;
  for (double amp : {0.01, 0.02, 0.05, 0.1, 0.2}) {
    FundusImage noisy = clean;
    Rng rng(3);
    for (double& v : noisy.pixels) {
      v += amp * (rng.uniform01() < 0.5 ? 1.0 : -1.0);
      v = std::min(1.0, std::max(0.0, v));
    }
    const double p = psnr(noisy, clean);
    CHECK(p < prev);
    prev = p;
  }
}

TEST_CASE("masked psnr ignores pixels outside the mask") {
  const FundusImage clean = random_image(16, 16, 4);
  FundusImage damaged = clean;
  for (int i = 0; i < 16; ++i) damaged.at(0, 0, i) = 0.0;
  std::vector<std::uint8_t> mask(256, 1);
  for (int i = 0; i < 16; ++i) mask[i] = 0;  // mask out the damaged row
  CHECK(psnr(damaged, clean) < 100.0);
  CHECK(psnr(damaged, clean, &mask) == 100.0);
  const std::vector<std::uint8_t> none(256, 0);
  CHECK_THROWS_AS(psnr(damaged, clean, &none), ParamError);
}

TEST_CASE("ssim self similarity, symmetry, bounds") {
  const FundusImage img = random_image(16, 16, 5);
  CHECK(std::abs(ssim(img, img) - 1.0) <= 1e-9);

  const FundusImage other = random_image(16, 16, 6);
  CHECK(std::abs(ssim(img, other) - ssim(other, img)) <= 1e-12);
  CHECK(ssim(img, other) >= -1.0);
  CHECK(ssim(img, other) <= 1.0);

  CHECK_THROWS_AS(ssim(FundusImage(10, 16, 0.5), FundusImage(10, 16, 0.5)), ParamError);
}

TEST_CASE("ssim matches the direct-formula oracle") {
  const FundusImage a = random_image(16, 16, 7);
  const FundusImage b = random_image(16, 16, 8);
  CHECK(std::abs(ssim(a, b) - ssim_oracle(a, b)) <= 1e-6);
  CHECK(std::abs(ssim(a, a) - ssim_oracle(a, a)) <= 1e-6);

  const FundusImage c = random_image(21, 33, 9);
  FundusImage d = c;
  Rng rng(10);
  for (double& v : d.pixels) v = std::min(1.0, std::max(0.0, v + 0.05 * rng.normal()));
  CHECK(std::abs(ssim(c, d) - ssim_oracle(c, d)) <= 1e-6);
}

TEST_CASE("ssim of an image against its negative is low") {
  FundusImage x = random_image(16, 16, 11);
  for (double& v : x.pixels) v = 0.25 + 0.5 * v;  // mid-contrast
  FundusImage inv = x;
  for (double& v : inv.pixels) v = 1.0 - v;
  CHECK(ssim(x, inv) < 0.5);
  CHECK(std::abs(ssim(x, inv) - ssim_oracle(x, inv)) <= 1e-6);
}

TEST_CASE("ssim is invariant to identical channel shuffles") {
  const FundusImage a = random_image(16, 16, 12);
  const FundusImage b = random_image(16, 16, 13);
  auto shuffle = [](const FundusImage& img) {
    FundusImage out = img;
    const std::size_t plane = img.pixel_count();
    for (int c = 0; c < 3; ++c) {
      const int src = (c + 1) % 3;
      std::copy(img.pixels.begin() + src * plane, img.pixels.begin() + (src + 1) * plane,
                out.pixels.begin() + c * plane);
    }
    return out;
  };
  CHECK(std::abs(ssim(a, b) - ssim(shuffle(a), shuffle(b))) <= 1e-12);
}

TEST_CASE("masked ssim restricts window centers") {
  const FundusImage clean = random_image(32, 32, 14);
  FundusImage damaged = clean;
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) damaged.at(1, i, j) = 1.0 - damaged.at(1, i, j);
  std::vector<std::uint8_t> mask(32 * 32, 1);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) mask[i * 32 + j] = 0;
  CHECK(ssim(damaged, clean) < 1.0);
  CHECK(std::abs(ssim(damaged, clean, &mask) - 1.0) <= 1e-9);
}

TEST_CASE("report aggregates exact means and serializes") {
  std::vector<metrics::MetricPair> pairs;
  const FundusImage img = random_image(16, 16, 15);
  pairs.push_back({img, img, "same"});
  FundusImage off(16, 16, 0.2);
  FundusImage ref(16, 16, 0.3);
  pairs.push_back({off, ref, "diff"});
  const auto rep = metrics::build_report(pairs, "toy");
  REQUIRE(rep.rows.size() == 2);
  CHECK(rep.rows[0].psnr_db == 100.0);
  CHECK(rep.rows[0].ssim == doctest::Approx(1.0));
  CHECK(rep.mean_psnr ==
        doctest::Approx((rep.rows[0].psnr_db + rep.rows[1].psnr_db) / 2.0).epsilon(1e-15));
  CHECK(rep.mean_ssim ==
        doctest::Approx((rep.rows[0].ssim + rep.rows[1].ssim) / 2.0).epsilon(1e-15));

  const std::string csv = rep.to_csv();
  CHECK(csv.find("id,psnr_db,ssim") != std::string::npos);
  CHECK(csv.find("same,100") != std::string::npos);
  CHECK(csv.find("mean,") != std::string::npos);

  const auto j = nlohmann::json::parse(rep.to_json());
  CHECK(j["dataset"] == "toy");
  CHECK(j["rows"].size() == 2);
  CHECK(j["mean_psnr"].get<double>() == rep.mean_psnr);

  CHECK_THROWS_AS(metrics::build_report({}, "empty"), ParamError);
}

TEST_CASE("fov-only report needs masks and uses them") {
  const FundusImage clean = random_image(16, 16, 16);
  FundusImage damaged = clean;
  damaged.at(0, 0, 0) = damaged.at(0, 0, 0) < 0.5 ? 1.0 : 0.0;
  std::vector<metrics::MetricPair> pairs;
  pairs.push_back({damaged, clean, "a"});
  CHECK_THROWS_AS(metrics::build_report(pairs, "toy", true), ParamError);

  pairs[0].truth.fov_mask = std::vector<std::uint8_t>(256, 1);
  (*pairs[0].truth.fov_mask)[0] = 0;
  const auto rep = metrics::build_report(pairs, "toy", true);
  CHECK(rep.fov_only);
  CHECK(rep.rows[0].psnr_db == 100.0);
}

TEST_CASE("psnr stays capped for vanishingly small errors") {
  FundusImage a(16, 16, 0.5);
  FundusImage b = a;
  b.pixels[0] = std::nextafter(0.5, 1.0);
  const double p = psnr(a, b);
  CHECK(p == 100.0);
}
