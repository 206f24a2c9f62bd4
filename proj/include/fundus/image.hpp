#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fundus/common.hpp"

namespace fundus {

// RGB intensity image in [0,1], stored planar (channel, row, col), plus an
// optional field-of-view mask (nonzero = inside the circular retina region).
struct FundusImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;                        // 3 * height * width, CHW
  std::optional<std::vector<std::uint8_t>> fov_mask;  // height * width

  FundusImage() = default;
  FundusImage(int h, int w, double fill = 0.0)
      : height(h), width(w), pixels(static_cast<size_t>(3) * h * w, fill) {}

  double& at(int c, int i, int j) {
    return pixels[(static_cast<size_t>(c) * height + i) * width + j];
  }
  double at(int c, int i, int j) const {
    return pixels[(static_cast<size_t>(c) * height + i) * width + j];
  }

  bool in_fov(int i, int j) const {
    if (!fov_mask) return true;
    return (*fov_mask)[static_cast<size_t>(i) * width + j] != 0;
  }

  size_t pixel_count() const { return static_cast<size_t>(height) * width; }

  // Enforces the type invariants; throws ParamError on violation.
  void validate() const;
};

// Throws unless both images have identical dimensions.
void require_same_shape(const FundusImage& a, const FundusImage& b,
                        const char* what = "images");

void clip01(FundusImage& img);

bool bytes_equal(const FundusImage& a, const FundusImage& b);

}  // namespace fundus
