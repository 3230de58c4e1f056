#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>
#include <torch/types.h>

#include "poselift/skeleton.hpp"

namespace poselift {

// x -> scale * rotation * x + translation
struct SimilarityTransform {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return scale * rotation * x + translation; }
  Pose3D apply(const Pose3D& pose) const;
};

struct ProcrustesResult {
  Pose3D aligned;
  SimilarityTransform transform;
  double residual = 0.0;  // summed squared joint distances after alignment
};

// Least-squares similarity alignment of `predicted` onto `target` (SVD with
// reflection correction). DegenerateTargetError when the target has no spread.
ProcrustesResult procrustes_align(const Pose3D& predicted, const Pose3D& target);

// Euclidean distance of every joint after alignment.
std::vector<double> aligned_joint_errors(const Pose3D& predicted, const Pose3D& target);

// Mean over samples of the mean aligned joint error, in units * unit_scale.
double p_mpjpe(std::span<const Pose3D> predicted, std::span<const Pose3D> target, double unit_scale = 1.0);

struct PckAuc {
  double pck = 0.0;
  double auc = 0.0;
};

inline constexpr double kPckThreshold = 150.0;
inline constexpr int kAucSteps = 31;

// pck: percentage of errors strictly below `threshold`; auc: mean pck over
// kAucSteps thresholds evenly spaced on [0, threshold].
PckAuc pck_auc(std::span<const double> errors, double threshold = kPckThreshold);

struct EvalOptions {
  double threshold = kPckThreshold;
  double unit_scale = 1000.0;  // synthetic metres -> reported millimetres
};

struct EvalReport {
  double p_mpjpe = 0.0;
  double pck = 0.0;
  double auc = 0.0;
  double threshold = kPckThreshold;
  double unit_scale = 1.0;
  std::vector<double> per_sample;  // mean aligned joint error per sample, scaled

  nlohmann::json to_json() const;
};

EvalReport evaluate(std::span<const Pose3D> predicted, std::span<const Pose3D> target,
                    const EvalOptions& options = {});

// Generalized Procrustes mean shape: the single pose minimising the summed
// aligned squared distance to `poses`, found by alternating alignment.
Pose3D procrustes_mean_pose(std::span<const Pose3D> poses, int iterations = 20);

struct FigureOptions {
  int panel_size = 256;
  int line_thickness = 2;
};

// Input-image panel followed by one stick-figure panel per azimuth (radians,
// rotation about the vertical axis through the pose centroid). The predicted
// pose is drawn in red; a target, when given, in green underneath, with the
// prediction similarity-aligned to it.
void emit_pose_figure(const torch::Tensor& image, const Pose3D& predicted, const std::optional<Pose3D>& target,
                      const SkeletonTopology& topology, std::span<const double> views,
                      const std::filesystem::path& path, const FigureOptions& options = {});

// Line plot of ys against xs written as PNG.
void emit_curve_plot(const std::filesystem::path& path, const std::string& title, std::span<const double> xs,
                     std::span<const double> ys);

}  // namespace poselift
