#include "poselift/renderer.hpp"

#include <limits>
#include <vector>

#include <torch/torch.h>

#include "poselift/errors.hpp"

namespace poselift {

void RendererConfig::validate() const {
  if (height < 8 || width < 8)
    throw ConfigError("renderer resolution must be at least 8x8, got " + std::to_string(height) + "x" +
                      std::to_string(width));
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("renderer gamma must be positive");
}

torch::Tensor to_pixel_coords(const torch::Tensor& poses, const RendererConfig& config) {
  auto x = poses.select(-1, 0);
  auto y = poses.select(-1, 1);
  auto col = (x + 1.0) * (0.5 * (config.width - 1));
  auto row = (1.0 - y) * (0.5 * (config.height - 1));
  return torch::stack({col, row}, -1);
}

namespace {

using torch::autograd::AutogradContext;
using torch::autograd::tensor_list;

// Squared distance from every pixel centre to the nearest bone, computed in
// one pass. Backward routes each pixel's gradient to the two joints of its
// nearest bone: with c = a + t (b - a) the closest point and d = p - c,
// d|d|^2/da = -2 (1 - t) d and d|d|^2/db = -2 t d (t is stationary or clamped).
class SegmentDistance : public torch::autograd::Function<SegmentDistance> {
 public:
  static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& pixel_poses, const torch::Tensor& bones,
                               int64_t height, int64_t width) {
    auto pix = pixel_poses.contiguous();
    const int64_t B = pix.size(0), J = pix.size(1), N = bones.size(0), P = height * width;
    auto d2 = torch::empty({B, P}, pix.options());
    auto nearest = torch::empty({B, P}, pix.options().dtype(torch::kInt64));
    auto tparam = torch::empty({B, P}, pix.options());
    auto bone_acc = bones.accessor<int64_t, 2>();
    AT_DISPATCH_FLOATING_TYPES(pix.scalar_type(), "segment_distance_forward", [&] {
      const scalar_t* pp = pix.data_ptr<scalar_t>();
      scalar_t* out = d2.data_ptr<scalar_t>();
      int64_t* arg = nearest.data_ptr<int64_t>();
      scalar_t* tout = tparam.data_ptr<scalar_t>();
      std::vector<scalar_t> ax(N), ay(N), ex(N), ey(N), inv(N);
      for (int64_t b = 0; b < B; ++b) {
        const scalar_t* q = pp + b * J * 2;
        for (int64_t n = 0; n < N; ++n) {
          const int64_t i = bone_acc[n][0], j = bone_acc[n][1];
          ax[n] = q[2 * i];
          ay[n] = q[2 * i + 1];
          ex[n] = q[2 * j] - ax[n];
          ey[n] = q[2 * j + 1] - ay[n];
          const scalar_t len2 = ex[n] * ex[n] + ey[n] * ey[n];
          inv[n] = len2 > 0 ? scalar_t(1) / len2 : scalar_t(0);
        }
        for (int64_t r = 0; r < height; ++r) {
          for (int64_t c = 0; c < width; ++c) {
            const int64_t p = b * P + r * width + c;
            scalar_t best = std::numeric_limits<scalar_t>::infinity(), best_t = 0;
            int64_t best_n = 0;
            for (int64_t n = 0; n < N; ++n) {
              const scalar_t px = scalar_t(c) - ax[n], py = scalar_t(r) - ay[n];
              scalar_t t = (px * ex[n] + py * ey[n]) * inv[n];
              t = t < 0 ? scalar_t(0) : (t > 1 ? scalar_t(1) : t);
              const scalar_t dx = px - t * ex[n], dy = py - t * ey[n];
              const scalar_t v = dx * dx + dy * dy;
              if (v < best) {
                best = v;
                best_n = n;
                best_t = t;
              }
            }
            out[p] = best;
            arg[p] = best_n;
            tout[p] = best_t;
          }
        }
      }
    });
    ctx->save_for_backward({pix, bones, nearest, tparam});
    ctx->saved_data["width"] = width;
    return d2;
  }

  static tensor_list backward(AutogradContext* ctx, tensor_list grad_outputs) {
    const auto saved = ctx->get_saved_variables();
    const auto& pix = saved[0];
    const auto& bones = saved[1];
    const auto& nearest = saved[2];
    const auto& tparam = saved[3];
    const int64_t width = ctx->saved_data["width"].toInt();
    auto grad = grad_outputs[0].contiguous();
    const int64_t B = pix.size(0), J = pix.size(1), P = grad.size(1);
    auto grad_pix = torch::zeros_like(pix);
    auto bone_acc = bones.accessor<int64_t, 2>();
    AT_DISPATCH_FLOATING_TYPES(pix.scalar_type(), "segment_distance_backward", [&] {
      const scalar_t* pp = pix.data_ptr<scalar_t>();
      const scalar_t* g = grad.data_ptr<scalar_t>();
      const int64_t* arg = nearest.data_ptr<int64_t>();
      const scalar_t* tp = tparam.data_ptr<scalar_t>();
      scalar_t* gp = grad_pix.data_ptr<scalar_t>();
      for (int64_t b = 0; b < B; ++b) {
        const scalar_t* q = pp + b * J * 2;
        scalar_t* gq = gp + b * J * 2;
        for (int64_t p = 0; p < P; ++p) {
          const scalar_t go = g[b * P + p];
          if (go == 0) continue;
          const int64_t n = arg[b * P + p];
          const int64_t i = bone_acc[n][0], j = bone_acc[n][1];
          const scalar_t t = tp[b * P + p];
          const scalar_t cx = q[2 * i] + t * (q[2 * j] - q[2 * i]);
          const scalar_t cy = q[2 * i + 1] + t * (q[2 * j + 1] - q[2 * i + 1]);
          const scalar_t dx = scalar_t(p % width) - cx, dy = scalar_t(p / width) - cy;
          gq[2 * i] += go * scalar_t(-2) * (1 - t) * dx;
          gq[2 * i + 1] += go * scalar_t(-2) * (1 - t) * dy;
          gq[2 * j] += go * scalar_t(-2) * t * dx;
          gq[2 * j + 1] += go * scalar_t(-2) * t * dy;
        }
      }
    });
    return {grad_pix, torch::Tensor(), torch::Tensor(), torch::Tensor()};
  }
};

}  // namespace

torch::Tensor segment_distance_field(const torch::Tensor& poses, const SkeletonTopology& topology,
                                     const RendererConfig& config) {
  config.validate();
  const bool batched = poses.dim() == 3;
  auto p = batched ? poses : poses.unsqueeze(0);
  if (p.dim() != 3 || p.size(1) != topology.joint_count() || p.size(2) != 2)
    throw ShapeMismatchError("expected poses of shape [B, " + std::to_string(topology.joint_count()) + ", 2]");
  if (!p.is_floating_point()) p = p.to(torch::kFloat64);

  auto field = SegmentDistance::apply(to_pixel_coords(p, config), topology.bone_index_tensor(), config.height,
                                      config.width)
                   .view({-1, config.height, config.width});
  return batched ? field : field.squeeze(0);
}

torch::Tensor render(const torch::Tensor& poses, const SkeletonTopology& topology, const RendererConfig& config) {
  return torch::exp(-config.gamma * segment_distance_field(poses, topology, config));
}

SkeletonImage render(const Pose2D& pose, const SkeletonTopology& topology, const RendererConfig& config) {
  return image_from_tensor(render(to_tensor(std::span<const Pose2D>(&pose, 1)), topology, config)[0]);
}

std::vector<SkeletonImage> render_batch(std::span<const Pose2D> poses, const SkeletonTopology& topology,
                                        const RendererConfig& config) {
  std::vector<SkeletonImage> out;
  if (poses.empty()) return out;
  auto images = render(to_tensor(poses), topology, config);
  out.reserve(poses.size());
  for (int64_t i = 0; i < images.size(0); ++i) out.push_back(image_from_tensor(images[i]));
  return out;
}

}  // namespace poselift
