#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>
#include <torch/types.h>

#include "poselift/camera.hpp"
#include "poselift/renderer.hpp"
#include "poselift/skeleton.hpp"

namespace poselift {

// Two rotational degrees of freedom of a bone relative to its parent bone's
// frame: `flex` about the frame's x axis, `abduct` about its z axis. The bone
// direction is R_x(flex) R_z(abduct) * rest_direction.
struct BoneDof {
  Eigen::Vector3d rest_direction;
  double length = 1.0;
  double flex_min = 0.0, flex_max = 0.0;
  double abduct_min = 0.0, abduct_max = 0.0;
};

struct KinematicModel {
  SkeletonTopology topology;
  std::vector<BoneDof> bones;  // indexed like topology.bones()
  double azimuth_min = -3.141592653589793, azimuth_max = 3.141592653589793;
  double elevation_min = 0.0, elevation_max = 0.0;
  double depth_anchor = kDepthAnchor;

  void validate() const;
};

// Default humanoid-9 figure: pelvis root, spine to neck, head, two 2-bone
// arms hanging from the neck and two single-bone legs. Units are metres.
KinematicModel humanoid9_model();

struct PoseSample {
  Pose3D pose;  // camera frame, root at (0, 0, depth_anchor)
  double azimuth = 0.0;
  double elevation = 0.0;
  std::vector<double> flex;    // per bone
  std::vector<double> abduct;  // per bone
};

// Forward kinematics for explicit parameters.
Pose3D forward_kinematics(const KinematicModel& model, double azimuth, double elevation,
                          const std::vector<double>& flex, const std::vector<double>& abduct);
PoseSample sample_pose(const KinematicModel& model, Rng& rng);
Pose3D sample_pose3d(const KinematicModel& model, Rng& rng);

struct ClutterConfig {
  int ellipse_count = 5;
  double ellipse_intensity = 0.45;   // upper bound of an ellipse's grey level
  double gradient_amplitude = 0.2;   // upper bound of the linear background ramp
  double noise_amplitude = 0.05;     // per-pixel uniform noise in [-a, a]

  bool empty() const { return ellipse_count == 0 && gradient_amplitude == 0.0 && noise_amplitude == 0.0; }
};

// clamp(max(skeleton, background) + noise, 0, 1) for an [H, W] image.
torch::Tensor clutter_composite(const torch::Tensor& skeleton, const ClutterConfig& config, Rng& rng);

// Normalized pose scaled into the renderer frame: root at the image centre.
inline constexpr double kDefaultFrameScale = 0.36;
torch::Tensor to_image_frame(const torch::Tensor& raw_poses2d, int root, double frame_scale);

struct SplitCounts {
  int train = 0;
  int prior = 0;
  int test = 0;
};

struct SynthConfig {
  KinematicModel model = humanoid9_model();
  RendererConfig renderer;
  ClutterConfig clutter;
  double frame_scale = kDefaultFrameScale;
  SplitCounts counts;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
};

// Train split: images only.
struct UnlabeledImages {
  std::vector<std::string> ids;
  torch::Tensor images;  // [M, H, W] uint8
};

// Prior split: raw perspective 2D poses only.
struct PriorPoses {
  std::vector<std::string> ids;
  std::vector<Pose2D> poses;
};

// Test split: images with 2D and 3D ground truth. Reads of the 3D targets are
// counted (shared between copies) so training code can be checked for label access.
class LabeledSamples {
 public:
  LabeledSamples() = default;
  LabeledSamples(std::vector<std::string> ids, torch::Tensor images, std::vector<Pose2D> p2d,
                 std::vector<Pose3D> p3d);

  const std::vector<std::string>& ids() const { return ids_; }
  const torch::Tensor& images() const { return images_; }
  const std::vector<Pose2D>& poses2d() const { return p2d_; }
  const std::vector<Pose3D>& targets() const;
  size_t size() const { return ids_.size(); }

  uint64_t target_reads() const { return reads_->load(); }

 private:
  std::vector<std::string> ids_;
  torch::Tensor images_;
  std::vector<Pose2D> p2d_;
  std::vector<Pose3D> p3d_;
  std::shared_ptr<std::atomic<uint64_t>> reads_ = std::make_shared<std::atomic<uint64_t>>(0);
};

struct SynthDataset {
  std::string topology;
  UnlabeledImages train;
  PriorPoses prior;
  LabeledSamples test;
  nlohmann::json manifest;
};

// Deterministic in `config.seed`; every sample draws from its own RNG stream
// derived from (seed, split, index), so the three splits never share a pose.
SynthDataset generate_dataset(const SynthConfig& config);

// Layout: manifest.json, train/images/*.png, prior/poses.jsonl,
// test/images/*.png, test/poses.jsonl.
void write_dataset(const SynthDataset& dataset, const std::filesystem::path& out_dir);

nlohmann::json read_manifest(const std::filesystem::path& dir);
UnlabeledImages load_train_split(const std::filesystem::path& dir);
PriorPoses load_prior_split(const std::filesystem::path& dir, const SkeletonTopology& topology);
LabeledSamples load_test_split(const std::filesystem::path& dir, const SkeletonTopology& topology);

}  // namespace poselift
