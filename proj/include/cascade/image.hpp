#pragma once

#include <string>

#include "cascade/tensor.hpp"

namespace cascade::image {

// 8-bit PNG IO for single CHW images with values in [-1, 1].
// Writing quantizes via (x+1)/2*255 with round-half-even and clamps;
// reading maps back with v/255*2-1. 1 or 3 channels.

void write_png(const std::string& path, const Tensorf& chw);
Tensorf read_png(const std::string& path);

// batch helpers: NCHW slice in/out
Tensorf nth_image(const Tensorf& nchw, int i);

}  // namespace cascade::image
