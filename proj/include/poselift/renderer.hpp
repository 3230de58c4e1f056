#pragma once

#include <cmath>
#include <span>
#include <vector>

#include <torch/types.h>

#include "poselift/skeleton.hpp"

namespace poselift {

// Pose coordinates live in a normalized frame where [-1, 1]^2 covers the
// image: x grows to the right, y grows upwards. Pixel centres sit at integer
// (col, row) positions, col = (x + 1) / 2 * (W - 1), row = (1 - y) / 2 * (H - 1).
struct RendererConfig {
  int height = 64;
  int width = 64;
  // Fall-off rate in 1/px^2. The default puts the 0.5 iso-line 1.5 px from the bone.
  double gamma = std::log(2.0) / (1.5 * 1.5);

  void validate() const;
};

// [..., J, 2] normalized coordinates -> [..., J, 2] (col, row) pixel coordinates.
torch::Tensor to_pixel_coords(const torch::Tensor& poses, const RendererConfig& config);

// Minimum squared point-to-segment distance (px^2) from every pixel centre to
// the skeleton's bones. Input [B, J, 2] (or [J, 2]); output [B, H, W] (or [H, W]).
// Zero-length bones degrade to point distances.
torch::Tensor segment_distance_field(const torch::Tensor& poses, const SkeletonTopology& topology,
                                     const RendererConfig& config);

// exp(-gamma * distance^2), differentiable in the joint coordinates.
torch::Tensor render(const torch::Tensor& poses, const SkeletonTopology& topology, const RendererConfig& config);

SkeletonImage render(const Pose2D& pose, const SkeletonTopology& topology, const RendererConfig& config);
std::vector<SkeletonImage> render_batch(std::span<const Pose2D> poses, const SkeletonTopology& topology,
                                        const RendererConfig& config);

}  // namespace poselift
