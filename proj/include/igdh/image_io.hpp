#pragma once

#include <string>

#include "igdh/tensor.hpp"

namespace igdh {

// 8-bit RGB PNG <-> float tensor (1,3,H,W) in [0,1].
// Quantization: round(v*255) clamped to [0,255]; dequantization: v/255.
Tensor<float> read_png(const std::string& path);
void write_png(const std::string& path, const Tensor<float>& image);

}  // namespace igdh
