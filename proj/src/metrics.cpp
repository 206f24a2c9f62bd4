#include "fundus/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "fundus/common.hpp"

namespace fundus::metrics {

double psnr(const FundusImage& a, const FundusImage& b, const std::vector<std::uint8_t>* mask) {
  require_same_shape(a, b);
  if (mask && mask->size() != a.pixel_count()) {
    throw ParamError("psnr mask size does not match image");
  }
  const std::size_t plane = a.pixel_count();
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < plane; ++k) {
    if (mask && (*mask)[k] == 0) continue;
    for (int c = 0; c < 3; ++c) {
      const double d = a.pixels[c * plane + k] - b.pixels[c * plane + k];
      sum += d * d;
    }
    count += 3;
  }
  if (count == 0) throw ParamError("psnr mask selects no pixels");
  const double mse = sum / static_cast<double>(count);
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace {

constexpr int kWin = 11;
constexpr int kHalf = kWin / 2;

std::vector<double> ssim_window() {
  std::vector<double> w(kWin);
  double sum = 0.0;
  for (int d = -kHalf; d <= kHalf; ++d) {
    const double v = std::exp(-(static_cast<double>(d) * d) / (2.0 * 1.5 * 1.5));
    w[d + kHalf] = v;
    sum += v;
  }
  for (double& v : w) v /= sum;
  return w;
}

// Valid-window separable Gaussian filtering: output is (H-10) x (W-10).
std::vector<double> valid_gauss(const std::vector<double>& in, int height, int width,
                                const std::vector<double>& w) {
  const int ow = width - kWin + 1;
  const int oh = height - kWin + 1;
  std::vector<double> tmp(static_cast<std::size_t>(height) * ow);
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < ow; ++j) {
      double acc = 0.0;
      for (int d = 0; d < kWin; ++d) acc += w[d] * in[i * width + j + d];
      tmp[i * ow + j] = acc;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int i = 0; i < oh; ++i) {
    for (int j = 0; j < ow; ++j) {
      double acc = 0.0;
      for (int d = 0; d < kWin; ++d) acc += w[d] * tmp[(i + d) * ow + j];
      out[i * ow + j] = acc;
    }
  }
  return out;
}

}  // namespace

double ssim(const FundusImage& a, const FundusImage& b, const std::vector<std::uint8_t>* mask) {
  require_same_shape(a, b);
  if (a.height < kWin || a.width < kWin) {
    throw ParamError("ssim requires images at least 11x11");
  }
  if (mask && mask->size() != a.pixel_count()) {
    throw ParamError("ssim mask size does not match image");
  }
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const std::vector<double> w = ssim_window();
  const int oh = a.height - kWin + 1;
  const int ow = a.width - kWin + 1;
  const std::size_t plane = a.pixel_count();

  double total = 0.0;
  std::size_t count = 0;
  std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t k = 0; k < plane; ++k) {
      x[k] = a.pixels[c * plane + k];
      y[k] = b.pixels[c * plane + k];
      xx[k] = x[k] * x[k];
      yy[k] = y[k] * y[k];
      xy[k] = x[k] * y[k];
    }
    const std::vector<double> mx = valid_gauss(x, a.height, a.width, w);
    const std::vector<double> my = valid_gauss(y, a.height, a.width, w);
    const std::vector<double> mxx = valid_gauss(xx, a.height, a.width, w);
    const std::vector<double> myy = valid_gauss(yy, a.height, a.width, w);
    const std::vector<double> mxy = valid_gauss(xy, a.height, a.width, w);
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        if (mask && (*mask)[(i + kHalf) * a.width + (j + kHalf)] == 0) continue;
        const std::size_t k = static_cast<std::size_t>(i) * ow + j;
        const double vx = mxx[k] - mx[k] * mx[k];
        const double vy = myy[k] - my[k] * my[k];
        const double cxy = mxy[k] - mx[k] * my[k];
        const double num = (2.0 * mx[k] * my[k] + c1) * (2.0 * cxy + c2);
        const double den = (mx[k] * mx[k] + my[k] * my[k] + c1) * (vx + vy + c2);
        total += num / den;
        ++count;
      }
    }
  }
  if (count == 0) throw ParamError("ssim mask selects no window centers");
  return total / static_cast<double>(count);
}

MetricReport build_report(const std::vector<MetricPair>& pairs, std::string dataset,
                          bool fov_only) {
  if (pairs.empty()) throw ParamError("metric report needs at least one pair");
  MetricReport rep;
  rep.dataset = std::move(dataset);
  rep.fov_only = fov_only;
  double psum = 0.0;
  double ssum = 0.0;
  for (const MetricPair& p : pairs) {
    const std::vector<std::uint8_t>* mask = nullptr;
    if (fov_only) {
      if (p.truth.fov_mask) {
        mask = &*p.truth.fov_mask;
      } else if (p.enhanced.fov_mask) {
        mask = &*p.enhanced.fov_mask;
      } else {
        throw ParamError("fov-only metrics need a fov_mask on pair '" + p.id + "'");
      }
    }
    MetricRow row;
    row.id = p.id;
    row.psnr_db = psnr(p.enhanced, p.truth, mask);
    row.ssim = ssim(p.enhanced, p.truth, mask);
    psum += row.psnr_db;
    ssum += row.ssim;
    rep.rows.push_back(std::move(row));
  }
  rep.mean_psnr = psum / static_cast<double>(rep.rows.size());
  rep.mean_ssim = ssum / static_cast<double>(rep.rows.size());
  return rep;
}

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "id,psnr_db,ssim\n";
  for (const MetricRow& r : rows) os << r.id << ',' << r.psnr_db << ',' << r.ssim << '\n';
  os << "mean," << mean_psnr << ',' << mean_ssim << '\n';
  return os.str();
}

std::string MetricReport::to_json() const {
  nlohmann::json j;
  j["dataset"] = dataset;
  j["fov_only"] = fov_only;
  j["mean_psnr"] = mean_psnr;
  j["mean_ssim"] = mean_ssim;
  j["rows"] = nlohmann::json::array();
  for (const MetricRow& r : rows) {
    j["rows"].push_back({{"id", r.id}, {"psnr_db", r.psnr_db}, {"ssim", r.ssim}});
  }
  return j.dump(2);
}

}  // namespace fundus::metrics
