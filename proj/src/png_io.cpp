#include "fundus/png_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

namespace fundus {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Decodes any PNG into interleaved rows at the requested channel count
// (1 = gray, 3 = RGB), 8 or 16 bit per sample chosen by the file.
struct Decoded {
  int height = 0;
  int width = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;  // height*width*channels
};

Decoded decode(const std::string& path, int channels) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open PNG for reading: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_read_struct failed: " + path);
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png_create_info_struct failed: " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("PNG decode error: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_uint_32 w = 0, h = 0;
  int bit_depth = 0, color_type = 0;
  png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);

  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  if (channels == 3)
    png_set_gray_to_rgb(png);
  else
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  if (bit_depth == 16) png_set_swap(png);  // little-endian in memory
  png_read_update_info(png, info);

  bit_depth = png_get_bit_depth(png, info);
  const int bytes_per_sample = bit_depth == 16 ? 2 : 1;
  const size_t row_bytes = static_cast<size_t>(w) * channels * bytes_per_sample;

  std::vector<std::uint8_t> raw(row_bytes * h);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 i = 0; i < h; ++i) rows[i] = raw.data() + i * row_bytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Decoded out;
  out.height = static_cast<int>(h);
  out.width = static_cast<int>(w);
  out.bit_depth = bit_depth;
  out.samples.resize(static_cast<size_t>(h) * w * channels);
  if (bit_depth == 16) {
    const auto* p = reinterpret_cast<const std::uint16_t*>(raw.data());
    out.samples.assign(p, p + out.samples.size());
  } else {
    for (size_t i = 0; i < out.samples.size(); ++i) out.samples[i] = raw[i];
  }
  return out;
}

void encode(const std::string& path, const std::vector<std::uint16_t>& samples, int height,
            int width, int channels, int bit_depth) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open PNG for writing: " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed: " + path);
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed: " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encode error: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, bit_depth,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);

  const int bytes_per_sample = bit_depth == 16 ? 2 : 1;
  const size_t row_samples = static_cast<size_t>(width) * channels;
  std::vector<std::uint8_t> row(row_samples * bytes_per_sample);
  for (int i = 0; i < height; ++i) {
    const std::uint16_t* src = samples.data() + static_cast<size_t>(i) * row_samples;
    if (bit_depth == 16) {
      std::memcpy(row.data(), src, row.size());
    } else {
      for (size_t j = 0; j < row_samples; ++j) row[j] = static_cast<std::uint8_t>(src[j]);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::uint16_t quantize(double v, int maxval) {
  if (v < 0.0) v = 0.0;
  if (v > 1.0) v = 1.0;
  return static_cast<std::uint16_t>(std::lround(v * maxval));
}

}  // namespace

FundusImage read_png(const std::string& path) {
  Decoded d = decode(path, 3);
  const double maxval = d.bit_depth == 16 ? 65535.0 : 255.0;
  FundusImage img(d.height, d.width);
  for (int i = 0; i < d.height; ++i)
    for (int j = 0; j < d.width; ++j)
      for (int c = 0; c < 3; ++c)
        img.at(c, i, j) = d.samples[(static_cast<size_t>(i) * d.width + j) * 3 + c] / maxval;
  return img;
}

void write_png(const std::string& path, const FundusImage& img, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw ParamError("write_png: bit depth must be 8 or 16");
  const int maxval = bit_depth == 16 ? 65535 : 255;
  std::vector<std::uint16_t> samples(img.pixel_count() * 3);
  for (int i = 0; i < img.height; ++i)
    for (int j = 0; j < img.width; ++j)
      for (int c = 0; c < 3; ++c)
        samples[(static_cast<size_t>(i) * img.width + j) * 3 + c] =
            quantize(img.at(c, i, j), maxval);
  encode(path, samples, img.height, img.width, 3, bit_depth);
}

std::vector<double> read_png_gray(const std::string& path, int* height, int* width) {
  Decoded d = decode(path, 1);
  const double maxval = d.bit_depth == 16 ? 65535.0 : 255.0;
  std::vector<double> plane(static_cast<size_t>(d.height) * d.width);
  for (size_t i = 0; i < plane.size(); ++i) plane[i] = d.samples[i] / maxval;
  *height = d.height;
  *width = d.width;
  return plane;
}

void write_png_gray(const std::string& path, const std::vector<double>& plane, int height,
                    int width) {
  if (plane.size() != static_cast<size_t>(height) * width)
    throw ParamError("write_png_gray: plane size does not match dimensions");
  std::vector<std::uint16_t> samples(plane.size());
  for (size_t i = 0; i < plane.size(); ++i) samples[i] = quantize(plane[i], 255);
  encode(path, samples, height, width, 1, 8);
}

}  // namespace fundus
