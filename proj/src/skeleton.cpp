#include "poselift/skeleton.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <utility>

#include <torch/torch.h>

#include "poselift/errors.hpp"

namespace poselift {

SkeletonTopology::SkeletonTopology(std::string name, std::vector<std::string> joint_names,
                                   std::vector<int> parent, std::vector<Bone> bones, int root)
    : name_(std::move(name)),
      joint_names_(std::move(joint_names)),
      parent_(std::move(parent)),
      bones_(std::move(bones)),
      root_(root) {}

torch::Tensor SkeletonTopology::bone_index_tensor() const {
  std::vector<int64_t> flat;
  flat.reserve(bones_.size() * 2);
  for (const auto& b : bones_) {
    flat.push_back(b.parent);
    flat.push_back(b.child);
  }
  return torch::tensor(flat, torch::kInt64).view({bone_count(), 2});
}

SkeletonTopology validate_topology(SkeletonTopology topology) {
  const int J = topology.joint_count();
  const auto& parent = topology.parent();
  if (J <= 0) throw TopologyError("topology '" + topology.name() + "' has no joints");
  if (static_cast<int>(parent.size()) != J)
    throw TopologyError("parent list has " + std::to_string(parent.size()) + " entries for " +
                        std::to_string(J) + " joints");
  const int root = topology.root();
  if (root < 0 || root >= J) throw JointIndexError("root index " + std::to_string(root));
  if (parent[root] != root && parent[root] != -1)
    throw CycleError("root joint " + std::to_string(root) + " has a parent");

  for (int j = 0; j < J; ++j) {
    if (j == root) continue;
    const int p = parent[j];
    if (p < 0 || p >= J) throw JointIndexError("parent of joint " + std::to_string(j) + " is " + std::to_string(p));
    if (p == j) throw CycleError("joint " + std::to_string(j) + " is its own parent but is not the root");
  }
  // Every joint must reach the root within J hops.
  for (int j = 0; j < J; ++j) {
    int cur = j;
    int hops = 0;
    while (cur != root) {
      cur = parent[cur];
      if (++hops > J) throw CycleError("parent links starting at joint " + std::to_string(j) + " do not reach the root");
    }
  }

  std::set<std::pair<int, int>> seen;
  for (const auto& b : topology.bones()) {
    if (b.parent < 0 || b.parent >= J || b.child < 0 || b.child >= J)
      throw JointIndexError("bone (" + std::to_string(b.parent) + "," + std::to_string(b.child) +
                            ") references a joint outside [0," + std::to_string(J) + ")");
    if (b.parent == b.child)
      throw DuplicateEdgeError("self-loop on joint " + std::to_string(b.parent));
    const auto key = std::minmax(b.parent, b.child);
    if (!seen.insert(key).second)
      throw DuplicateEdgeError("bone (" + std::to_string(b.parent) + "," + std::to_string(b.child) + ") listed twice");
  }
  if (topology.bone_count() != J - 1)
    throw TopologyError("expected " + std::to_string(J - 1) + " bones for a tree of " + std::to_string(J) +
                        " joints, got " + std::to_string(topology.bone_count()));

  // Bones must connect every joint (union-find over the edge set).
  std::vector<int> group(J);
  std::iota(group.begin(), group.end(), 0);
  auto find = [&](int x) {
    while (group[x] != x) x = group[x] = group[group[x]];
    return x;
  };
  for (const auto& b : topology.bones()) group[find(b.parent)] = find(b.child);
  for (int j = 0; j < J; ++j)
    if (find(j) != find(root)) throw TopologyError("joint " + std::to_string(j) + " is not connected by any bone");

  return topology;
}

namespace {

SkeletonTopology make_tree(std::string name, std::vector<std::string> joints, std::vector<int> parent) {
  std::vector<Bone> bones;
  for (int j = 0; j < static_cast<int>(parent.size()); ++j)
    if (parent[j] != j) bones.push_back({parent[j], j});
  return validate_topology(SkeletonTopology(std::move(name), std::move(joints), std::move(parent), std::move(bones), 0));
}

}  // namespace

const SkeletonTopology& humanoid17() {
  static const SkeletonTopology t = make_tree(
      "humanoid-17",
      {"pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "spine", "thorax", "neck",
       "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist"},
      {0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15});
  return t;
}

const SkeletonTopology& humanoid9() {
  static const SkeletonTopology t =
      make_tree("humanoid-9",
                {"pelvis", "neck", "head", "l_elbow", "l_wrist", "r_elbow", "r_wrist", "l_foot", "r_foot"},
                {0, 0, 1, 1, 3, 1, 5, 0, 0});
  return t;
}

const SkeletonTopology& hand21() {
  static const SkeletonTopology t = [] {
    std::vector<std::string> names{"wrist"};
    std::vector<int> parent{0};
    const char* fingers[] = {"thumb", "index", "middle", "ring", "pinky"};
    for (const char* f : fingers) {
      for (int k = 1; k <= 4; ++k) {
        names.push_back(std::string(f) + std::to_string(k));
        parent.push_back(k == 1 ? 0 : static_cast<int>(names.size()) - 2);
      }
    }
    return make_tree("hand-21", std::move(names), std::move(parent));
  }();
  return t;
}

const SkeletonTopology& topology_by_name(const std::string& name) {
  if (name == "humanoid-17") return humanoid17();
  if (name == "humanoid-9") return humanoid9();
  if (name == "hand-21") return hand21();
  throw TopologyError("unknown topology preset '" + name + "'");
}

std::vector<std::string> preset_topology_names() { return {"humanoid-17", "humanoid-9", "hand-21"}; }

Pose2D normalize_pose2d(const Pose2D& pose, const SkeletonTopology& topology) {
  if (pose.joint_count() != topology.joint_count())
    throw TopologyMismatchError("pose has " + std::to_string(pose.joint_count()) + " joints, topology " +
                                topology.name() + " has " + std::to_string(topology.joint_count()));
  const Eigen::Vector2d origin = pose.joints[topology.root()];
  double mean_dist = 0.0;
  for (const auto& p : pose.joints) {
    if (!p.allFinite()) throw DegeneratePoseError("pose contains non-finite coordinates");
    mean_dist += (p - origin).norm();
  }
  mean_dist /= pose.joint_count();
  if (!(mean_dist > 0.0)) throw DegeneratePoseError("all joints coincide");

  Pose2D out;
  out.joints.reserve(pose.joints.size());
  for (const auto& p : pose.joints) out.joints.push_back((p - origin) / mean_dist);
  return out;
}

torch::Tensor normalize_pose2d(const torch::Tensor& poses, int root) {
  auto centred = poses - poses.select(-2, root).unsqueeze(-2);
  auto scale = centred.norm(2, -1).mean(-1, /*keepdim=*/true).unsqueeze(-1);
  return centred / scale.clamp_min(1e-9);
}

torch::Tensor to_tensor(std::span<const Pose2D> poses, torch::Dtype dtype) {
  if (poses.empty()) return torch::zeros({0, 0, 2}, dtype);
  const int64_t J = poses.front().joint_count();
  auto out = torch::empty({static_cast<int64_t>(poses.size()), J, 2}, torch::kFloat64);
  auto acc = out.accessor<double, 3>();
  for (size_t b = 0; b < poses.size(); ++b) {
    if (poses[b].joint_count() != J) throw ShapeMismatchError("ragged pose batch");
    for (int64_t j = 0; j < J; ++j)
      for (int d = 0; d < 2; ++d) acc[b][j][d] = poses[b].joints[j][d];
  }
  return out.to(dtype);
}

torch::Tensor to_tensor(std::span<const Pose3D> poses, torch::Dtype dtype) {
  if (poses.empty()) return torch::zeros({0, 0, 3}, dtype);
  const int64_t J = poses.front().joint_count();
  auto out = torch::empty({static_cast<int64_t>(poses.size()), J, 3}, torch::kFloat64);
  auto acc = out.accessor<double, 3>();
  for (size_t b = 0; b < poses.size(); ++b) {
    if (poses[b].joint_count() != J) throw ShapeMismatchError("ragged pose batch");
    for (int64_t j = 0; j < J; ++j)
      for (int d = 0; d < 3; ++d) acc[b][j][d] = poses[b].joints[j][d];
  }
  return out.to(dtype);
}

torch::Tensor to_tensor(const SkeletonImage& image, torch::Dtype dtype) {
  auto t = torch::tensor(image.pixels, torch::kFloat64).view({image.height, image.width});
  return t.to(dtype);
}

std::vector<Pose2D> poses2d_from_tensor(const torch::Tensor& poses) {
  auto t = poses.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  if (t.dim() != 3 || t.size(2) != 2) throw ShapeMismatchError("expected a [B, J, 2] tensor");
  auto acc = t.accessor<double, 3>();
  std::vector<Pose2D> out(t.size(0));
  for (int64_t b = 0; b < t.size(0); ++b) {
    out[b].joints.resize(t.size(1));
    for (int64_t j = 0; j < t.size(1); ++j) out[b].joints[j] = {acc[b][j][0], acc[b][j][1]};
  }
  return out;
}

std::vector<Pose3D> poses3d_from_tensor(const torch::Tensor& poses) {
  auto t = poses.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  if (t.dim() != 3 || t.size(2) != 3) throw ShapeMismatchError("expected a [B, J, 3] tensor");
  auto acc = t.accessor<double, 3>();
  std::vector<Pose3D> out(t.size(0));
  for (int64_t b = 0; b < t.size(0); ++b) {
    out[b].joints.resize(t.size(1));
    for (int64_t j = 0; j < t.size(1); ++j) out[b].joints[j] = {acc[b][j][0], acc[b][j][1], acc[b][j][2]};
  }
  return out;
}

SkeletonImage image_from_tensor(const torch::Tensor& image) {
  auto t = image.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  while (t.dim() > 2 && t.size(0) == 1) t = t.squeeze(0);
  if (t.dim() != 2) throw ShapeMismatchError("expected an [H, W] image tensor");
  SkeletonImage out;
  out.height = static_cast<int>(t.size(0));
  out.width = static_cast<int>(t.size(1));
  out.pixels.assign(t.data_ptr<double>(), t.data_ptr<double>() + t.numel());
  return out;
}

}  // namespace poselift
