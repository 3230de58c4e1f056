#include "poselift/synth.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <Eigen/Geometry>
#include <torch/torch.h>
#include <zlib.h>

#include "poselift/errors.hpp"
#include "poselift/image_io.hpp"
#include "poselift/pose_io.hpp"

namespace poselift {

namespace fs = std::filesystem;
using nlohmann::json;

void KinematicModel::validate() const {
  validate_topology(topology);
  if (static_cast<int>(bones.size()) != topology.bone_count())
    throw ConfigError("kinematic model needs one DOF entry per bone");
  for (const auto& b : bones) {
    if (!(b.length > 0.0)) throw ConfigError("bone lengths must be positive");
    if (b.flex_min > b.flex_max || b.abduct_min > b.abduct_max) throw ConfigError("angle range min exceeds max");
    if (std::abs(b.rest_direction.norm() - 1.0) > 1e-9) throw ConfigError("rest directions must be unit vectors");
  }
  if (azimuth_min > azimuth_max || elevation_min > elevation_max)
    throw ConfigError("orientation range min exceeds max");
  if (!(depth_anchor > 0.0)) throw ConfigError("depth anchor must be positive");
}

KinematicModel humanoid9_model() {
  const Eigen::Vector3d up(0, 1, 0), down(0, -1, 0);
  KinematicModel m;
  m.topology = humanoid9();
  // Bones follow humanoid9(): spine, head, l_upper, l_fore, r_upper, r_fore, l_leg, r_leg.
  m.bones = {
      {up, 0.55, -0.3, 0.5, -0.25, 0.25},   {up, 0.25, -0.4, 0.4, -0.3, 0.3},
      {down, 0.32, -1.4, 1.4, 0.1, 1.5},    {down, 0.28, 0.0, 2.0, -0.3, 0.3},
      {down, 0.32, -1.4, 1.4, -1.5, -0.1},  {down, 0.28, 0.0, 2.0, -0.3, 0.3},
      {down, 0.95, -0.8, 0.6, 0.05, 0.45},  {down, 0.95, -0.8, 0.6, -0.45, -0.05},
  };
  // Front-facing only. A one-channel skeleton image does not say which side is
  // left, so with mirror-symmetric limbs a figure turned away looks like its
  // mirror image facing the camera.
  m.azimuth_min = -std::numbers::pi / 4;
  m.azimuth_max = std::numbers::pi / 4;
  m.elevation_min = 0.05;
  m.elevation_max = 0.45;
  return m;
}

namespace {

Eigen::Matrix3d rot_x(double t) { return Eigen::AngleAxisd(t, Eigen::Vector3d::UnitX()).toRotationMatrix(); }
Eigen::Matrix3d rot_z(double t) { return Eigen::AngleAxisd(t, Eigen::Vector3d::UnitZ()).toRotationMatrix(); }

double uniform(Rng& rng, double lo, double hi) {
  if (lo == hi) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace

Pose3D forward_kinematics(const KinematicModel& model, double azimuth, double elevation,
                          const std::vector<double>& flex, const std::vector<double>& abduct) {
  const auto& topo = model.topology;
  const int n = topo.bone_count();
  if (static_cast<int>(flex.size()) != n || static_cast<int>(abduct.size()) != n)
    throw ShapeMismatchError("forward kinematics needs one angle pair per bone");

  const Eigen::Matrix3d global = elevation_matrix(elevation).transpose() * azimuth_matrix(azimuth);
  // Frame of the bone ending at each joint; the root carries the global frame.
  std::vector<Eigen::Matrix3d> frame(topo.joint_count(), global);
  std::vector<bool> placed(topo.joint_count(), false);
  Pose3D pose;
  pose.joints.assign(topo.joint_count(), Eigen::Vector3d::Zero());
  pose.joints[topo.root()] = Eigen::Vector3d(0, 0, model.depth_anchor);
  placed[topo.root()] = true;

  // Bones may be listed in any order; sweep until every child is placed.
  for (int remaining = n; remaining > 0;) {
    const int before = remaining;
    for (int i = 0; i < n; ++i) {
      const auto& b = topo.bones()[i];
      if (placed[b.child] || !placed[b.parent]) continue;
      const Eigen::Matrix3d r = frame[b.parent] * rot_x(flex[i]) * rot_z(abduct[i]);
      frame[b.child] = r;
      pose.joints[b.child] = pose.joints[b.parent] + model.bones[i].length * (r * model.bones[i].rest_direction);
      placed[b.child] = true;
      --remaining;
    }
    if (remaining == before) throw TopologyError("bones do not form a tree rooted at the root joint");
  }
  return pose;
}

PoseSample sample_pose(const KinematicModel& model, Rng& rng) {
  PoseSample s;
  s.azimuth = uniform(rng, model.azimuth_min, model.azimuth_max);
  s.elevation = uniform(rng, model.elevation_min, model.elevation_max);
  for (const auto& b : model.bones) {
    s.flex.push_back(uniform(rng, b.flex_min, b.flex_max));
    s.abduct.push_back(uniform(rng, b.abduct_min, b.abduct_max));
  }
  s.pose = forward_kinematics(model, s.azimuth, s.elevation, s.flex, s.abduct);
  return s;
}

Pose3D sample_pose3d(const KinematicModel& model, Rng& rng) { return sample_pose(model, rng).pose; }

torch::Tensor clutter_composite(const torch::Tensor& skeleton, const ClutterConfig& config, Rng& rng) {
  if (skeleton.dim() != 2) throw ShapeMismatchError("clutter_composite expects an [H, W] image");
  if (config.empty()) return skeleton.clamp(0.0, 1.0);
  const int64_t h = skeleton.size(0), w = skeleton.size(1);
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto row = torch::linspace(-1.0, 1.0, h, opts).view({h, 1}).expand({h, w});
  auto col = torch::linspace(-1.0, 1.0, w, opts).view({1, w}).expand({h, w});

  const double angle = uniform(rng, -M_PI, M_PI);
  const double amp = uniform(rng, 0.0, config.gradient_amplitude);
  auto background = amp * 0.5 * (1.0 + (std::cos(angle) * col + std::sin(angle) * row) / std::sqrt(2.0));

  for (int e = 0; e < config.ellipse_count; ++e) {
    const double cx = uniform(rng, -1.0, 1.0), cy = uniform(rng, -1.0, 1.0);
    const double ax = uniform(rng, 0.08, 0.45), ay = uniform(rng, 0.08, 0.45);
    const double theta = uniform(rng, 0.0, M_PI);
    const double level = uniform(rng, 0.0, config.ellipse_intensity);
    auto dx = col - cx, dy = row - cy;
    auto u = (std::cos(theta) * dx + std::sin(theta) * dy) / ax;
    auto v = (-std::sin(theta) * dx + std::cos(theta) * dy) / ay;
    background = torch::where(u * u + v * v <= 1.0, torch::full_like(background, level).maximum(background),
                              background);
  }

  std::uniform_real_distribution<double> noise_dist(-config.noise_amplitude, config.noise_amplitude);
  auto noise = torch::empty({h, w}, opts);
  auto* p = noise.data_ptr<double>();
  for (int64_t i = 0; i < h * w; ++i) p[i] = config.noise_amplitude > 0.0 ? noise_dist(rng) : 0.0;

  return (skeleton.to(torch::kFloat64).maximum(background) + noise).clamp(0.0, 1.0).to(skeleton.scalar_type());
}

torch::Tensor to_image_frame(const torch::Tensor& raw_poses2d, int root, double frame_scale) {
  return normalize_pose2d(raw_poses2d, root) * frame_scale;
}

json SynthConfig::to_json() const {
  json bones = json::array();
  for (const auto& b : model.bones)
    bones.push_back({{"rest", {b.rest_direction.x(), b.rest_direction.y(), b.rest_direction.z()}},
                     {"length", b.length},
                     {"flex", {b.flex_min, b.flex_max}},
                     {"abduct", {b.abduct_min, b.abduct_max}}});
  return {{"topology", model.topology.name()},
          {"bones", bones},
          {"azimuth", {model.azimuth_min, model.azimuth_max}},
          {"elevation", {model.elevation_min, model.elevation_max}},
          {"depth_anchor", model.depth_anchor},
          {"renderer", {{"height", renderer.height}, {"width", renderer.width}, {"gamma", renderer.gamma}}},
          {"clutter",
           {{"ellipse_count", clutter.ellipse_count},
            {"ellipse_intensity", clutter.ellipse_intensity},
            {"gradient_amplitude", clutter.gradient_amplitude},
            {"noise_amplitude", clutter.noise_amplitude}}},
          {"frame_scale", frame_scale},
          {"counts", {{"train", counts.train}, {"prior", counts.prior}, {"test", counts.test}}},
          {"seed", seed}};
}

namespace {

enum class Split : uint32_t { Train = 1, Prior = 2, Test = 3 };

Rng sample_rng(uint64_t seed, Split split, int index) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(split),
                    static_cast<uint32_t>(index)};
  return Rng(seq);
}

std::string sample_id(const char* split, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%06d", split, index);
  return buf;
}

// Rendered, clutter-composited uint8 images of a set of raw 2D poses. Clutter
// draws continue each sample's own RNG stream.
torch::Tensor make_images(const std::vector<Pose2D>& poses, std::vector<Rng>& rngs, const SynthConfig& config) {
  const auto& topo = config.model.topology;
  const int64_t m = static_cast<int64_t>(poses.size());
  auto out = torch::empty({m, config.renderer.height, config.renderer.width}, torch::kUInt8);
  constexpr int64_t kChunk = 256;
  for (int64_t start = 0; start < m; start += kChunk) {
    const int64_t end = std::min(m, start + kChunk);
    std::span<const Pose2D> chunk(poses.data() + start, static_cast<size_t>(end - start));
    auto frame = to_image_frame(to_tensor(chunk), topo.root(), config.frame_scale);
    auto skel = render(frame, topo, config.renderer);
    for (int64_t i = start; i < end; ++i)
      out[i] = quantize_image(clutter_composite(skel[i - start], config.clutter, rngs[i]));
  }
  return out;
}

uint32_t crc_of(const std::string& s) {
  return static_cast<uint32_t>(crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(s.data()),
                                     static_cast<uInt>(s.size())));
}

}  // namespace

LabeledSamples::LabeledSamples(std::vector<std::string> ids, torch::Tensor images, std::vector<Pose2D> p2d,
                               std::vector<Pose3D> p3d)
    : ids_(std::move(ids)), images_(std::move(images)), p2d_(std::move(p2d)), p3d_(std::move(p3d)) {
  if (p2d_.size() != ids_.size() || p3d_.size() != ids_.size() ||
      (images_.defined() && images_.size(0) != static_cast<int64_t>(ids_.size())))
    throw LengthMismatchError("labeled split: ids, images and poses differ in length");
}

const std::vector<Pose3D>& LabeledSamples::targets() const {
  reads_->fetch_add(1);
  return p3d_;
}

SynthDataset generate_dataset(const SynthConfig& config) {
  config.model.validate();
  config.renderer.validate();
  if (config.counts.train < 0 || config.counts.prior < 0 || config.counts.test < 0)
    throw ConfigError("split counts must be non-negative");
  if (!(config.frame_scale > 0.0)) throw ConfigError("frame scale must be positive");

  SynthDataset ds;
  ds.topology = config.model.topology.name();

  {
    std::vector<Rng> rngs;
    std::vector<Pose2D> p2d;
    for (int i = 0; i < config.counts.train; ++i) {
      rngs.push_back(sample_rng(config.seed, Split::Train, i));
      p2d.push_back(perspective_project(sample_pose3d(config.model, rngs.back())));
      ds.train.ids.push_back(sample_id("train", i));
    }
    ds.train.images = make_images(p2d, rngs, config);
  }
  for (int i = 0; i < config.counts.prior; ++i) {
    auto rng = sample_rng(config.seed, Split::Prior, i);
    ds.prior.poses.push_back(perspective_project(sample_pose3d(config.model, rng)));
    ds.prior.ids.push_back(sample_id("prior", i));
  }
  {
    std::vector<Rng> rngs;
    std::vector<std::string> ids;
    std::vector<Pose2D> p2d;
    std::vector<Pose3D> p3d;
    for (int i = 0; i < config.counts.test; ++i) {
      rngs.push_back(sample_rng(config.seed, Split::Test, i));
      p3d.push_back(sample_pose3d(config.model, rngs.back()));
      p2d.push_back(perspective_project(p3d.back()));
      ids.push_back(sample_id("test", i));
    }
    auto images = make_images(p2d, rngs, config);
    ds.test = LabeledSamples(std::move(ids), std::move(images), std::move(p2d), std::move(p3d));
  }

  const json cfg = config.to_json();
  char hash[16];
  std::snprintf(hash, sizeof hash, "%08x", crc_of(cfg.dump()));
  ds.manifest = {{"format", "poselift-synth"},
                 {"version", 1},
                 {"topology", ds.topology},
                 {"seed", config.seed},
                 {"config", cfg},
                 {"config_hash", hash},
                 {"splits",
                  {{"train", {{"count", config.counts.train}, {"ids", ds.train.ids}, {"contents", "images"}}},
                   {"prior", {{"count", config.counts.prior}, {"ids", ds.prior.ids}, {"contents", "p2d"}}},
                   {"test", {{"count", config.counts.test}, {"ids", ds.test.ids()}, {"contents", "images,p2d,p3d"}}}}}};
  return ds;
}

namespace {

void write_images(const fs::path& dir, const std::vector<std::string>& ids, const torch::Tensor& images) {
  fs::create_directories(dir);
  for (size_t i = 0; i < ids.size(); ++i) write_png(dir / (ids[i] + ".png"), images[static_cast<int64_t>(i)]);
}

torch::Tensor read_images(const fs::path& dir, const std::vector<std::string>& ids) {
  std::vector<torch::Tensor> imgs;
  imgs.reserve(ids.size());
  for (const auto& id : ids) imgs.push_back(read_png(dir / (id + ".png")));
  if (imgs.empty()) return torch::empty({0, 0, 0}, torch::kUInt8);
  return torch::stack(imgs);
}

std::vector<std::string> split_ids(const json& manifest, const char* split) {
  try {
    return manifest.at("splits").at(split).at("ids").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: bad split listing for ") + split + ": " + e.what());
  }
}

}  // namespace

void write_dataset(const SynthDataset& ds, const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  {
    std::ofstream f(out / "manifest.json");
    if (!f) throw IoError("cannot write " + (out / "manifest.json").string());
    f << ds.manifest.dump(2) << '\n';
  }
  write_images(out / "train" / "images", ds.train.ids, ds.train.images);

  std::vector<PoseRecord> prior;
  for (size_t i = 0; i < ds.prior.ids.size(); ++i) prior.push_back({ds.prior.ids[i], ds.topology, ds.prior.poses[i], {}});
  fs::create_directories(out / "prior");
  write_pose_file(out / "prior" / "poses.jsonl", prior);

  write_images(out / "test" / "images", ds.test.ids(), ds.test.images());
  std::vector<PoseRecord> test;
  const auto& p3d = ds.test.targets();
  for (size_t i = 0; i < ds.test.size(); ++i)
    test.push_back({ds.test.ids()[i], ds.topology, ds.test.poses2d()[i], p3d[i]});
  write_pose_file(out / "test" / "poses.jsonl", test);
}

json read_manifest(const fs::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot read " + (dir / "manifest.json").string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }
}

UnlabeledImages load_train_split(const fs::path& dir) {
  UnlabeledImages out;
  out.ids = split_ids(read_manifest(dir), "train");
  out.images = read_images(dir / "train" / "images", out.ids);
  return out;
}

PriorPoses load_prior_split(const fs::path& dir, const SkeletonTopology& topology) {
  PriorPoses out;
  for (auto& r : read_pose_file(dir / "prior" / "poses.jsonl", topology)) {
    out.ids.push_back(std::move(r.id));
    out.poses.push_back(std::move(r.p2d));
  }
  return out;
}

LabeledSamples load_test_split(const fs::path& dir, const SkeletonTopology& topology) {
  std::vector<std::string> ids;
  std::vector<Pose2D> p2d;
  std::vector<Pose3D> p3d;
  for (auto& r : read_pose_file(dir / "test" / "poses.jsonl", topology)) {
    if (!r.p3d) throw FormatError("test record " + r.id + " has no 3D pose");
    ids.push_back(std::move(r.id));
    p2d.push_back(std::move(r.p2d));
    p3d.push_back(std::move(*r.p3d));
  }
  auto images = read_images(dir / "test" / "images", ids);
  return LabeledSamples(std::move(ids), std::move(images), std::move(p2d), std::move(p3d));
}

}  // namespace poselift
