#pragma once

#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <ATen/core/Generator.h>
#include <torch/types.h>

#include "poselift/skeleton.hpp"

namespace poselift {

using Rng = std::mt19937_64;

inline constexpr double kDepthAnchor = 10.0;
inline constexpr double kDepthFloorMargin = 1e-3;
// Sharpness of the softplus depth floor; above z = 3 the floor is an exact identity.
inline constexpr double kDepthFloorSharpness = 10.0;

// Output of the lifting network for a batch: per-joint depth offsets d_i
// ([B, J]) and one elevation angle per pose ([B], radians).
struct LiftOutput {
  torch::Tensor depth_offsets;
  torch::Tensor elevation;
};

struct RotationSpec {
  double azimuth = 0.0;
  double elevation = 0.0;
  Eigen::Matrix3d matrix = Eigen::Matrix3d::Identity();
};

struct ElevationStats {
  double mean = 0.0;
  double stddev = 0.0;
};

// Smooth lower bound z -> 1 + eps + softplus(z - 1 - eps); identity for z > 3.
torch::Tensor bound_depth(const torch::Tensor& depth);

// v_i = (x_i z_i, y_i z_i, z_i) with z_i = bound(d_i + anchor).
// poses2d [B, J, 2], depth_offsets [B, J] -> [B, J, 3].
torch::Tensor lift_to_3d(const torch::Tensor& poses2d, const torch::Tensor& depth_offsets,
                         double anchor = kDepthAnchor);
Pose3D lift_to_3d(const Pose2D& pose, std::span<const double> depth_offsets, double anchor = kDepthAnchor);

// (X/Z, Y/Z); NonPositiveDepthError if any Z <= 0.
torch::Tensor perspective_project(const torch::Tensor& poses3d);
Pose2D perspective_project(const Pose3D& pose);

// Azimuth rotates about the camera's vertical (y) axis. The elevation factor
// R_e(e) rotates about the horizontal (x) axis by -e, so that R_e(e)^T tilts
// an upright figure towards a camera elevated by e.
Eigen::Matrix3d azimuth_matrix(double azimuth);
Eigen::Matrix3d elevation_matrix(double elevation);
// R = R_e^T R_a R_e.
RotationSpec build_rotation(double azimuth, double elevation);

// Batched R = R_e(to)^T R_a(azimuth) R_e(from): removes the elevation `from`,
// spins about the vertical axis and re-applies the elevation `to`.
// All inputs [B]; returns [B, 3, 3]. With from == to this is build_rotation.
torch::Tensor view_rotation(const torch::Tensor& azimuth, const torch::Tensor& from_elevation,
                            const torch::Tensor& to_elevation);

double sample_azimuth(Rng& rng);
ElevationStats elevation_stats(std::span<const double> elevations);
double sample_elevation(const ElevationStats& stats, Rng& rng);

using Lifter = std::function<LiftOutput(const torch::Tensor& poses2d)>;
// Maps the predicted elevations [B] of the first lift to rotations [B, 3, 3].
using RotationSampler = std::function<torch::Tensor(const torch::Tensor& predicted_elevation)>;

// Uniform azimuth on [-max_azimuth, max_azimuth]; target elevation drawn from
// N(mu_e, sigma_e) of the batch's predicted elevations; the predicted
// elevation is removed first.
RotationSampler random_view_sampler(at::Generator generator, double max_azimuth = std::numbers::pi);
RotationSampler fixed_rotation_sampler(const Eigen::Matrix3d& rotation);

struct CycleResult {
  torch::Tensor v;            // lift(y)
  torch::Tensor v_hat;        // rotated v
  torch::Tensor y_hat;        // projection of v_hat
  torch::Tensor y_hat_prior;  // same values as y_hat; the one to score with the pose prior
  torch::Tensor v_hat_prime;  // lift(y_hat)
  torch::Tensor v_prime;      // v_hat_prime rotated back
  torch::Tensor y_prime;      // projection of v_prime
  torch::Tensor rotation;     // [B, 3, 3]
  LiftOutput first_lift;
  LiftOutput second_lift;
};

// Lift -> rotate -> project -> lift -> inverse-rotate -> project.
// Before rotating, a pose is rescaled about the camera centre so its centroid
// sits at depth `anchor` (this leaves its projection unchanged) and rotated
// about that centroid. The inverse leg undoes the same steps and restores the
// first lift's depth scale, so a lifter that returns true depths closes the
// loop exactly.
// With elevation_from_prior_only the rotation is detached everywhere except in
// y_hat_prior, so the predicted elevation learns only from the prior term.
// Otherwise the consistency terms can pull it to +-pi/2, where the spin
// becomes an in-plane rotation that needs no depth at all.
CycleResult consistency_cycle(const torch::Tensor& y, const Lifter& lifter, const RotationSampler& sampler,
                              double anchor = kDepthAnchor, bool elevation_from_prior_only = false);

}  // namespace poselift
