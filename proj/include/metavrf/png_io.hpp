#pragma once

#include <string>

#include "metavrf/tensor.hpp"

namespace metavrf::png_io {

/// Reads any PNG as 8-bit grayscale, returning an (h, w) tensor of values in
/// [0, 1] (pixel/255). Throws std::runtime_error naming the path on failure.
Tensor read_gray(const std::string& path);

/// Writes an (h, w) tensor of [0, 1] values as an 8-bit grayscale PNG.
void write_gray(const std::string& path, const Tensor& image);

/// Box-filter (area-average) resample of an (h, w) image to (out_h, out_w),
/// then quantized to the 1/255 grid so cached and fresh loads agree bitwise.
Tensor resize_area(const Tensor& image, int64_t out_h, int64_t out_w);

/// Quarter-turn counterclockwise rotations: turns in {0, 1, 2, 3}.
Tensor rotate_quarter(const Tensor& image, int turns);

}  // namespace metavrf::png_io
