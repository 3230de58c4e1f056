#include "poselift/camera.hpp"

#include <cmath>
#include <numbers>

#include <torch/torch.h>

#include "poselift/errors.hpp"

namespace poselift {

namespace F = torch::nn::functional;

torch::Tensor bound_depth(const torch::Tensor& depth) {
  const double floor = 1.0 + kDepthFloorMargin;
  return floor + F::softplus(depth - floor, F::SoftplusFuncOptions().beta(kDepthFloorSharpness).threshold(20.0));
}

torch::Tensor lift_to_3d(const torch::Tensor& poses2d, const torch::Tensor& depth_offsets, double anchor) {
  if (poses2d.dim() != 3 || poses2d.size(2) != 2 || depth_offsets.sizes() != poses2d.sizes().slice(0, 2))
    throw ShapeMismatchError("lift_to_3d expects poses [B, J, 2] and depth offsets [B, J]");
  auto z = bound_depth(depth_offsets + anchor).unsqueeze(-1);
  return torch::cat({poses2d * z, z}, -1);
}

Pose3D lift_to_3d(const Pose2D& pose, std::span<const double> depth_offsets, double anchor) {
  if (static_cast<int>(depth_offsets.size()) != pose.joint_count())
    throw ShapeMismatchError("one depth offset per joint required");
  auto d = torch::tensor(std::vector<double>(depth_offsets.begin(), depth_offsets.end()), torch::kFloat64).unsqueeze(0);
  return poses3d_from_tensor(lift_to_3d(to_tensor(std::span<const Pose2D>(&pose, 1)), d, anchor)).front();
}

torch::Tensor perspective_project(const torch::Tensor& poses3d) {
  if (poses3d.size(-1) != 3) throw ShapeMismatchError("perspective_project expects [..., 3] points");
  auto z = poses3d.select(-1, 2);
  if (z.numel() > 0 && (z <= 0).any().item<bool>())
    throw NonPositiveDepthError("joint with depth <= 0 cannot be projected");
  return poses3d.narrow(-1, 0, 2) / z.unsqueeze(-1);
}

Pose2D perspective_project(const Pose3D& pose) {
  Pose2D out;
  out.joints.reserve(pose.joints.size());
  for (const auto& p : pose.joints) {
    if (!(p.z() > 0.0)) throw NonPositiveDepthError("joint with depth <= 0 cannot be projected");
    out.joints.emplace_back(p.x() / p.z(), p.y() / p.z());
  }
  return out;
}

Eigen::Matrix3d azimuth_matrix(double azimuth) {
  const double c = std::cos(azimuth), s = std::sin(azimuth);
  Eigen::Matrix3d r;
  r << c, 0, s,
       0, 1, 0,
      -s, 0, c;
  return r;
}

Eigen::Matrix3d elevation_matrix(double elevation) {
  // Rotation about x by -elevation.
  const double c = std::cos(elevation), s = std::sin(elevation);
  Eigen::Matrix3d r;
  r << 1, 0, 0,
       0, c, s,
       0, -s, c;
  return r;
}

RotationSpec build_rotation(double azimuth, double elevation) {
  const Eigen::Matrix3d re = elevation_matrix(elevation);
  return {azimuth, elevation, re.transpose() * azimuth_matrix(azimuth) * re};
}

namespace {

torch::Tensor batched_azimuth(const torch::Tensor& a) {
  auto c = a.cos(), s = a.sin(), one = torch::ones_like(a), zero = torch::zeros_like(a);
  return torch::stack({c, zero, s, zero, one, zero, -s, zero, c}, -1).view({-1, 3, 3});
}

torch::Tensor batched_elevation(const torch::Tensor& e) {
  auto c = e.cos(), s = e.sin(), one = torch::ones_like(e), zero = torch::zeros_like(e);
  return torch::stack({one, zero, zero, zero, c, s, zero, -s, c}, -1).view({-1, 3, 3});
}

torch::Tensor centroid(const torch::Tensor& poses) { return poses.mean(1, /*keepdim=*/true); }

// Rescales about the camera centre so the centroid depth equals `anchor`.
// Returns the rescaled pose and its centroid.
std::pair<torch::Tensor, torch::Tensor> anchor_depth(const torch::Tensor& poses, double anchor) {
  auto c = centroid(poses);
  auto scale = anchor / c.narrow(-1, 2, 1);
  return {poses * scale, c * scale};
}

torch::Tensor clamp_pose_depth(const torch::Tensor& poses) {
  return torch::cat({poses.narrow(-1, 0, 2), bound_depth(poses.narrow(-1, 2, 1))}, -1);
}

}  // namespace

torch::Tensor view_rotation(const torch::Tensor& azimuth, const torch::Tensor& from_elevation,
                            const torch::Tensor& to_elevation) {
  return torch::matmul(torch::matmul(batched_elevation(to_elevation).transpose(1, 2), batched_azimuth(azimuth)),
                       batched_elevation(from_elevation));
}

double sample_azimuth(Rng& rng) {
  std::uniform_real_distribution<double> dist(-std::numbers::pi, std::numbers::pi);
  return dist(rng);
}

ElevationStats elevation_stats(std::span<const double> elevations) {
  if (elevations.empty()) throw EmptyBatchError("elevation statistics need at least one angle");
  double mean = 0.0;
  for (double e : elevations) mean += e;
  mean /= static_cast<double>(elevations.size());
  double var = 0.0;
  for (double e : elevations) var += (e - mean) * (e - mean);
  var /= static_cast<double>(elevations.size());
  return {mean, std::sqrt(var)};
}

double sample_elevation(const ElevationStats& stats, Rng& rng) {
  if (stats.stddev <= 0.0) return stats.mean;
  std::normal_distribution<double> dist(stats.mean, stats.stddev);
  return dist(rng);
}

RotationSampler random_view_sampler(at::Generator generator, double max_azimuth) {
  if (!(max_azimuth >= 0.0 && max_azimuth <= std::numbers::pi))
    throw ConfigError("view azimuth range must lie in [0, pi]");
  return [generator, max_azimuth](const torch::Tensor& predicted) mutable {
    if (predicted.numel() == 0) throw EmptyBatchError("cannot sample rotations for an empty batch");
    const auto n = predicted.size(0);
    auto opts = predicted.options().requires_grad(false);
    auto azimuth = (torch::rand({n}, generator, opts) * 2.0 - 1.0) * max_azimuth;
    auto stats_src = predicted.detach();
    auto mu = stats_src.mean();
    auto sigma = stats_src.std(/*unbiased=*/false);
    auto target = mu + sigma * torch::randn({n}, generator, opts);
    return view_rotation(azimuth, predicted, target);
  };
}

RotationSampler fixed_rotation_sampler(const Eigen::Matrix3d& rotation) {
  return [rotation](const torch::Tensor& predicted) {
    auto r = torch::empty({3, 3}, torch::kFloat64);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r[i][j] = rotation(i, j);
    return r.to(predicted.scalar_type()).unsqueeze(0).expand({predicted.size(0), 3, 3});
  };
}

CycleResult consistency_cycle(const torch::Tensor& y, const Lifter& lifter, const RotationSampler& sampler,
                              double anchor, bool elevation_from_prior_only) {
  CycleResult out;
  out.first_lift = lifter(y);
  out.v = lift_to_3d(y, out.first_lift.depth_offsets, anchor);
  out.rotation = sampler(out.first_lift.elevation);
  const auto rotation = elevation_from_prior_only ? out.rotation.detach() : out.rotation;

  auto [v_anchored, c] = anchor_depth(out.v, anchor);
  auto rotate = [&](const torch::Tensor& r) {
    return clamp_pose_depth(torch::matmul(v_anchored - c, r.transpose(1, 2)) + c);
  };
  out.v_hat = rotate(rotation);
  out.y_hat = perspective_project(out.v_hat);
  out.y_hat_prior = elevation_from_prior_only ? perspective_project(rotate(out.rotation)) : out.y_hat;

  out.second_lift = lifter(out.y_hat);
  out.v_hat_prime = lift_to_3d(out.y_hat, out.second_lift.depth_offsets, anchor);

  auto [back_anchored, c_back] = anchor_depth(out.v_hat_prime, anchor);
  auto restored_scale = centroid(out.v).narrow(-1, 2, 1) / anchor;
  out.v_prime = clamp_pose_depth((torch::matmul(back_anchored - c_back, rotation) + c_back) * restored_scale);
  out.y_prime = perspective_project(out.v_prime);
  return out;
}

}  // namespace poselift
