#include "fundus/image.hpp"

#include <cmath>
#include <cstring>

namespace fundus {

void FundusImage::validate() const {
  if (height < 16 || width < 16)
    throw ParamError("FundusImage: dimensions must be at least 16x16, got " +
                     std::to_string(height) + "x" + std::to_string(width));
  if (pixels.size() != static_cast<size_t>(3) * height * width)
    throw ParamError("FundusImage: pixel buffer size does not match dimensions");
  for (double v : pixels) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw ParamError("FundusImage: pixel values must be finite and in [0,1]");
  }
  if (fov_mask && fov_mask->size() != pixel_count())
    throw ParamError("FundusImage: fov_mask size does not match dimensions");
}

void require_same_shape(const FundusImage& a, const FundusImage& b, const char* what) {
  if (a.height != b.height || a.width != b.width)
    throw ParamError(std::string(what) + ": shape mismatch (" + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                     std::to_string(b.width) + ")");
}

void clip01(FundusImage& img) {
  for (double& v : img.pixels) v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
}

bool bytes_equal(const FundusImage& a, const FundusImage& b) {
  if (a.height != b.height || a.width != b.width) return false;
  return std::memcmp(a.pixels.data(), b.pixels.data(), a.pixels.size() * sizeof(double)) == 0;
}

}  // namespace fundus
