#pragma once

#include <filesystem>

#include <torch/types.h>

#include "poselift/skeleton.hpp"

namespace poselift {

// [0, 1] reals -> 8-bit grey levels round(255 * v).
torch::Tensor quantize_image(const torch::Tensor& image);
torch::Tensor dequantize_image(const torch::Tensor& image_u8);

// 8-bit grayscale PNG. `image` is [H, W], either uint8 or real-valued in [0, 1].
void write_png(const std::filesystem::path& path, const torch::Tensor& image);
void write_png(const std::filesystem::path& path, const SkeletonImage& image);
// Returns a [H, W] uint8 tensor.
torch::Tensor read_png(const std::filesystem::path& path);

}  // namespace poselift
