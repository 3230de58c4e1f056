#pragma once

#include <Eigen/Core>
#include <span>
#include <string>
#include <vector>

#include <torch/types.h>

namespace poselift {

struct Bone {
  int parent;
  int child;

  friend bool operator==(const Bone&, const Bone&) = default;
};

// Joint tree shared by every stage of the pipeline. Instances are plain
// values; `validate_topology` checks the structural invariants.
class SkeletonTopology {
 public:
  SkeletonTopology() = default;
  SkeletonTopology(std::string name, std::vector<std::string> joint_names,
                   std::vector<int> parent, std::vector<Bone> bones, int root = 0);

  const std::string& name() const { return name_; }
  int joint_count() const { return static_cast<int>(joint_names_.size()); }
  int bone_count() const { return static_cast<int>(bones_.size()); }
  int root() const { return root_; }
  const std::vector<std::string>& joint_names() const { return joint_names_; }
  const std::vector<int>& parent() const { return parent_; }
  const std::vector<Bone>& bones() const { return bones_; }

  // [N, 2] int64 tensor of (parent, child) joint indices.
  torch::Tensor bone_index_tensor() const;

  friend bool operator==(const SkeletonTopology&, const SkeletonTopology&) = default;

 private:
  std::string name_;
  std::vector<std::string> joint_names_;
  std::vector<int> parent_;
  std::vector<Bone> bones_;
  int root_ = 0;
};

// Returns `topology` unchanged if the parent links form one tree and the bone
// list is a valid edge set; throws CycleError, JointIndexError,
// DuplicateEdgeError or TopologyError otherwise.
SkeletonTopology validate_topology(SkeletonTopology topology);

// Built-in layouts. humanoid-17 follows the Human3.6M joint order, humanoid-9
// is the synthetic-world figure and hand-21 is the wrist + 4x5 finger layout.
const SkeletonTopology& humanoid17();
const SkeletonTopology& humanoid9();
const SkeletonTopology& hand21();
const SkeletonTopology& topology_by_name(const std::string& name);
std::vector<std::string> preset_topology_names();

struct Pose2D {
  std::vector<Eigen::Vector2d> joints;

  int joint_count() const { return static_cast<int>(joints.size()); }
};

struct Pose3D {
  std::vector<Eigen::Vector3d> joints;

  int joint_count() const { return static_cast<int>(joints.size()); }
};

// Single-channel raster, row-major, values in [0, 1].
struct SkeletonImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  double at(int row, int col) const { return pixels[static_cast<size_t>(row) * width + col]; }
};

// Root-centres the pose and rescales it so the mean joint distance from the
// root is one. Throws DegeneratePoseError when all joints coincide.
Pose2D normalize_pose2d(const Pose2D& pose, const SkeletonTopology& topology);

// Batched, differentiable counterpart on a [..., J, 2] tensor. A small floor
// on the scale keeps degenerate inputs finite instead of throwing.
torch::Tensor normalize_pose2d(const torch::Tensor& poses, int root);

// Conversions between value types and [B, J, D] tensors.
torch::Tensor to_tensor(std::span<const Pose2D> poses, torch::Dtype dtype = torch::kFloat64);
torch::Tensor to_tensor(std::span<const Pose3D> poses, torch::Dtype dtype = torch::kFloat64);
torch::Tensor to_tensor(const SkeletonImage& image, torch::Dtype dtype = torch::kFloat64);
std::vector<Pose2D> poses2d_from_tensor(const torch::Tensor& poses);
std::vector<Pose3D> poses3d_from_tensor(const torch::Tensor& poses);
SkeletonImage image_from_tensor(const torch::Tensor& image);

}  // namespace poselift
