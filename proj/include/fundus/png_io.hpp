#pragma once

#include <string>
#include <vector>

#include "fundus/image.hpp"

namespace fundus {

// PNG input/output. Intensities map to [0,1] by dividing by the format's max
// code value (255 or 65535); writes round to nearest code value.

FundusImage read_png(const std::string& path);

void write_png(const std::string& path, const FundusImage& img, int bit_depth = 8);

// Single-channel [0,1] image (masks, segmentation maps), 8-bit grayscale.
std::vector<double> read_png_gray(const std::string& path, int* height, int* width);
void write_png_gray(const std::string& path, const std::vector<double>& plane, int height,
                    int width);

}  // namespace fundus
