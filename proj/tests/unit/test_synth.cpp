#include "testing.hpp"

#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "poselift/errors.hpp"
#include "poselift/synth.hpp"

using namespace poselift;
namespace fs = std::filesystem;

namespace {

Eigen::Matrix3d rx(double t) {
  Eigen::Matrix3d m;
  m << 1, 0, 0, 0, std::cos(t), -std::sin(t), 0, std::sin(t), std::cos(t);
  return m;
}

Eigen::Matrix3d rz(double t) {
  Eigen::Matrix3d m;
  m << std::cos(t), -std::sin(t), 0, std::sin(t), std::cos(t), 0, 0, 0, 1;
  return m;
}

struct Recovered {
  std::vector<double> flex, abduct, length;
};

// Inverse kinematics: express each bone in its parent's frame and read the
// two angles off the direction, rebuilding frames from parent to child.
Recovered inverse_kinematics(const KinematicModel& model, const Pose3D& pose, double azimuth, double elevation) {
  const auto& topo = model.topology;
  Eigen::Matrix3d global;
  {
    const double ce = std::cos(elevation), se = std::sin(elevation);
    const double ca = std::cos(azimuth), sa = std::sin(azimuth);
    Eigen::Matrix3d re, ra;
    re << 1, 0, 0, 0, ce, se, 0, -se, ce;
    ra << ca, 0, sa, 0, 1, 0, -sa, 0, ca;
    global = re.transpose() * ra;
  }
  std::vector<Eigen::Matrix3d> frame(topo.joint_count(), global);
  Recovered out;
  out.flex.assign(topo.bone_count(), 0);
  out.abduct.assign(topo.bone_count(), 0);
  out.length.assign(topo.bone_count(), 0);
  // humanoid-9 lists bones parent-first, so one pass suffices
  for (int i = 0; i < topo.bone_count(); ++i) {
    const auto& b = topo.bones()[i];
    Eigen::Vector3d v = pose.joints[b.child] - pose.joints[b.parent];
    out.length[i] = v.norm();
    Eigen::Vector3d d = frame[b.parent].transpose() * v / v.norm();
    double flex, abduct;
    if (model.bones[i].rest_direction.y() < 0) {
      abduct = std::asin(std::clamp(d.x(), -1.0, 1.0));
      flex = std::atan2(-d.z(), -d.y());
    } else {
      abduct = std::asin(std::clamp(-d.x(), -1.0, 1.0));
      flex = std::atan2(d.z(), d.y());
    }
    out.flex[i] = flex;
    out.abduct[i] = abduct;
    frame[b.child] = frame[b.parent] * rx(flex) * rz(abduct);
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SynthConfig small_config(uint64_t seed) {
  SynthConfig cfg;
  cfg.counts = {12, 12, 12};
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_SUITE("synth") {

TEST_CASE("collapsed ranges always give the canonical pose") {
  auto model = humanoid9_model();
  for (auto& b : model.bones) {
    b.flex_max = b.flex_min;
    b.abduct_max = b.abduct_min;
  }
  model.azimuth_min = model.azimuth_max = 0.3;
  model.elevation_max = model.elevation_min;
  Rng rng(1);
  auto first = sample_pose3d(model, rng);
  for (int i = 0; i < 20; ++i) {
    auto p = sample_pose3d(model, rng);
    for (int j = 0; j < 9; ++j) CHECK(p.joints[j] == first.joints[j]);
  }
}

TEST_CASE("inverse kinematics recovers in-range angles and exact bone lengths") {
  auto model = humanoid9_model();
  Rng rng(2);
  int outside = 0;
  double worst_length = 0, worst_angle = 0;
  for (int i = 0; i < 10000; ++i) {
    auto s = sample_pose(model, rng);
    CHECK(s.pose.joints[0] == Eigen::Vector3d(0, 0, model.depth_anchor));
    auto r = inverse_kinematics(model, s.pose, s.azimuth, s.elevation);
    for (int b = 0; b < 8; ++b) {
      const auto& dof = model.bones[b];
      const double eps = 1e-9;
      if (r.flex[b] < dof.flex_min - eps || r.flex[b] > dof.flex_max + eps || r.abduct[b] < dof.abduct_min - eps ||
          r.abduct[b] > dof.abduct_max + eps)
        ++outside;
      worst_length = std::max(worst_length, std::abs(r.length[b] - dof.length));
      worst_angle = std::max({worst_angle, std::abs(r.flex[b] - s.flex[b]), std::abs(r.abduct[b] - s.abduct[b])});
    }
    if (s.azimuth < -std::numbers::pi || s.azimuth > std::numbers::pi || s.elevation < model.elevation_min ||
        s.elevation > model.elevation_max)
      ++outside;
  }
  CHECK(outside == 0);
  CHECK(worst_length < 1e-9);
  CHECK(worst_angle < 1e-9);
}

TEST_CASE("sampled elevations have the configured distribution") {
  auto model = humanoid9_model();
  Rng rng(3);
  std::vector<double> e;
  for (int i = 0; i < 10000; ++i) e.push_back(sample_pose(model, rng).elevation);
  auto stats = elevation_stats(e);
  const double lo = model.elevation_min, hi = model.elevation_max;
  CHECK(std::abs(stats.mean - 0.5 * (lo + hi)) < 0.02);
  CHECK(std::abs(stats.stddev - (hi - lo) / std::sqrt(12.0)) < 0.02);
}

TEST_CASE("model validation") {
  auto m = humanoid9_model();
  CHECK_NOTHROW(m.validate());
  m.bones[2].length = 0;
  CHECK_THROWS_AS(m.validate(), ConfigError);
  m = humanoid9_model();
  m.bones[3].flex_min = 3.0;
  CHECK_THROWS_AS(m.validate(), ConfigError);
}

TEST_CASE("clutter") {
  Rng rng(4);
  auto poses = testutil::random_poses(1, 9, 5, 0.6);
  auto clean = render(poses, humanoid9(), RendererConfig{})[0];
  CHECK(torch::equal(clutter_composite(clean, ClutterConfig{0, 0.0, 0.0, 0.0}, rng), clean));

  ClutterConfig cfg;
  bool in_range = true;
  double mad = 0.0, corr = 0.0;
  for (int i = 0; i < 1000; ++i) {
    auto out = clutter_composite(clean, cfg, rng);
    in_range = in_range && out.min().item<double>() >= 0.0 && out.max().item<double>() <= 1.0;
    mad += (out - clean).abs().mean().item<double>();
    auto a = out - out.mean(), b = clean - clean.mean();
    corr += ((a * b).sum() / (a.norm() * b.norm())).item<double>();
  }
  CHECK(in_range);
  mad /= 1000;
  corr /= 1000;
  // |out - clean| <= background where it wins + |noise|; the background is the
  // ramp plus ellipses whose area is at most pi/4 * 0.45^2 of the 2x2 frame each.
  const double coverage = std::min(1.0, cfg.ellipse_count * std::numbers::pi * 0.45 * 0.45 / 4.0);
  const double bound = cfg.noise_amplitude + cfg.gradient_amplitude + cfg.ellipse_intensity * coverage;
  MESSAGE("mean |out - clean| " << mad << " bound " << bound << " correlation " << corr);
  CHECK(mad <= bound);
  CHECK(corr > 0.2);
}

TEST_CASE("dataset splits, projections and determinism") {
  auto ds = generate_dataset(small_config(5));
  CHECK(ds.train.images.sizes() == torch::IntArrayRef({12, 64, 64}));
  CHECK((ds.train.images.scalar_type() == torch::kUInt8));
  std::set<std::string> ids;
  for (const auto* list : std::initializer_list<const std::vector<std::string>*>{&ds.train.ids, &ds.prior.ids, &ds.test.ids()})
    for (const auto& id : *list) CHECK(ids.insert(id).second);
  CHECK(ids.size() == 36);

  // no pose is shared between the prior and test splits
  for (const auto& p : ds.prior.poses)
    for (const auto& q : ds.test.poses2d()) CHECK((p.joints[1] - q.joints[1]).norm() > 1e-12);

  const auto& targets = ds.test.targets();
  for (size_t i = 0; i < ds.test.size(); ++i) {
    auto proj = perspective_project(targets[i]);
    for (int j = 0; j < 9; ++j) CHECK((proj.joints[j] - ds.test.poses2d()[i].joints[j]).norm() < 1e-9);
  }

  auto again = generate_dataset(small_config(5));
  CHECK(again.manifest == ds.manifest);
  CHECK(torch::equal(again.train.images, ds.train.images));
  auto other = generate_dataset(small_config(6));
  CHECK(other.manifest["config_hash"] != ds.manifest["config_hash"]);
  CHECK_FALSE(torch::equal(other.train.images, ds.train.images));
}

TEST_CASE("dataset files are byte-identical across runs and keep the unlabeled contract") {
  auto base = fs::temp_directory_path() / "poselift_unit_synth";
  fs::remove_all(base);
  write_dataset(generate_dataset(small_config(7)), base / "a");
  write_dataset(generate_dataset(small_config(7)), base / "b");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(base / "a"))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), base / "a"));
  CHECK(files.size() == 1 + 12 + 1 + 12 + 1);
  for (const auto& f : files) CHECK(slurp(base / "a" / f) == slurp(base / "b" / f));

  // the train split holds nothing but images
  for (const auto& e : fs::recursive_directory_iterator(base / "a" / "train"))
    if (e.is_regular_file()) CHECK(e.path().extension() == ".png");
  auto manifest = read_manifest(base / "a");
  CHECK(manifest["seed"] == 7);
  CHECK(manifest.contains("config_hash"));

  auto train = load_train_split(base / "a");
  auto mem = generate_dataset(small_config(7));
  CHECK(torch::equal(train.images, mem.train.images));
  auto prior = load_prior_split(base / "a", humanoid9());
  REQUIRE(prior.poses.size() == 12);
  CHECK(prior.poses[3].joints[4] == mem.prior.poses[3].joints[4]);
  auto test = load_test_split(base / "a", humanoid9());
  for (size_t i = 0; i < test.size(); ++i) {
    auto proj = perspective_project(test.targets()[i]);
    for (int j = 0; j < 9; ++j) CHECK((proj.joints[j] - test.poses2d()[i].joints[j]).norm() < 1e-9);
  }
}

TEST_CASE("tiny counts") {
  SynthConfig cfg;
  cfg.counts = {1, 1, 1};
  auto ds = generate_dataset(cfg);
  CHECK(ds.train.ids.size() == 1);
  CHECK(ds.prior.poses.size() == 1);
  CHECK(ds.test.size() == 1);
}

TEST_CASE("label reads are counted across copies") {
  auto ds = generate_dataset(small_config(8));
  auto copy = ds.test;
  const auto before = ds.test.target_reads();
  (void)copy.targets();
  CHECK(ds.test.target_reads() == before + 1);
}

}  // TEST_SUITE
