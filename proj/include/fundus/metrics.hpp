#pragma once

#include <string>
#include <vector>

#include "fundus/image.hpp"

namespace fundus::metrics {

// Zero-MSE sentinel; every PSNR is capped here so reports stay finite and
// sortable.
inline constexpr double kPsnrCap = 100.0;

// 10*log10(1/MSE) over all pixels and channels, capped at kPsnrCap.
// With a mask, the MSE runs over masked pixels only.
double psnr(const FundusImage& a, const FundusImage& b,
            const std::vector<std::uint8_t>* mask = nullptr);

// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), C1=(0.01)^2,
// C2=(0.03)^2 on the [0,1] range, valid windows only (no padding), averaged
// over channels and window positions. With a mask, only windows whose center
// pixel is masked-in contribute. Requires min(H, W) >= 11.
double ssim(const FundusImage& a, const FundusImage& b,
            const std::vector<std::uint8_t>* mask = nullptr);

struct MetricRow {
  std::string id;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::string dataset;
  bool fov_only = false;
  std::vector<MetricRow> rows;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;

  std::string to_csv() const;   // one row per image plus an aggregate row
  std::string to_json() const;
};

struct MetricPair {
  FundusImage enhanced;
  FundusImage truth;
  std::string id;
};

// Rows in input order; aggregates are exact arithmetic means. With fov_only,
// each pair must carry a fov_mask (on the truth image, else the enhanced one).
MetricReport build_report(const std::vector<MetricPair>& pairs, std::string dataset,
                          bool fov_only = false);

}  // namespace fundus::metrics
