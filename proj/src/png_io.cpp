#include "metavrf/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace metavrf::png_io {

Tensor read_gray(const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw std::runtime_error("failed to open PNG '" + path + "': " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw std::runtime_error("failed to decode PNG '" + path + "': " + image.message);
  }
  Tensor out({static_cast<int64_t>(image.height), static_cast<int64_t>(image.width)});
  for (size_t i = 0; i < buffer.size(); ++i) out.data[i] = buffer[i] / 255.0;
  return out;
}

void write_gray(const std::string& path, const Tensor& img) {
  if (img.rank() != 2) throw std::invalid_argument("write_gray expects an (h, w) tensor");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.shape[1]);
  image.height = static_cast<png_uint_32>(img.shape[0]);
  image.format = PNG_FORMAT_GRAY;
  std::vector<uint8_t> buffer(img.data.size());
  for (size_t i = 0; i < buffer.size(); ++i) {
    const double v = std::clamp(img.data[i], 0.0, 1.0);
    buffer[i] = static_cast<uint8_t>(std::lround(v * 255.0));
  }
  if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw std::runtime_error("failed to write PNG '" + path + "': " + image.message);
  }
}

Tensor resize_area(const Tensor& img, int64_t out_h, int64_t out_w) {
  if (img.rank() != 2) throw std::invalid_argument("resize_area expects an (h, w) tensor");
  const int64_t in_h = img.shape[0], in_w = img.shape[1];
  Tensor out({out_h, out_w});
  const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
  for (int64_t y = 0; y < out_h; ++y) {
    const double y0 = y * sy, y1 = (y + 1) * sy;
    for (int64_t x = 0; x < out_w; ++x) {
      const double x0 = x * sx, x1 = (x + 1) * sx;
      double acc = 0.0;
      for (int64_t iy = static_cast<int64_t>(y0); iy < in_h && iy < static_cast<int64_t>(std::ceil(y1)); ++iy) {
        const double wy = std::min<double>(y1, iy + 1) - std::max<double>(y0, iy);
        if (wy <= 0.0) continue;
        for (int64_t ix = static_cast<int64_t>(x0); ix < in_w && ix < static_cast<int64_t>(std::ceil(x1)); ++ix) {
          const double wx = std::min<double>(x1, ix + 1) - std::max<double>(x0, ix);
          if (wx <= 0.0) continue;
          acc += wy * wx * img.at(iy, ix);
        }
      }
      const double v = acc / (sy * sx);
      out.at(y, x) = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
    }
  }
  return out;
}

Tensor rotate_quarter(const Tensor& img, int turns) {
  if (img.rank() != 2) throw std::invalid_argument("rotate_quarter expects an (h, w) tensor");
  turns = ((turns % 4) + 4) % 4;
  if (turns == 0) return img;
  const int64_t h = img.shape[0], w = img.shape[1];
  if (turns == 2) {
    Tensor out({h, w});
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) out.at(h - 1 - y, w - 1 - x) = img.at(y, x);
    return out;
  }
  Tensor out({w, h});
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      if (turns == 1) {
        out.at(w - 1 - x, y) = img.at(y, x);  // 90 degrees counterclockwise
      } else {
        out.at(x, h - 1 - y) = img.at(y, x);  // 270 degrees counterclockwise
      }
    }
  }
  return out;
}

}  // namespace metavrf::png_io
