#include "testing.hpp"

#include <filesystem>
#include <numbers>

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <opencv2/imgcodecs.hpp>

#include "helpers.hpp"
#include "poselift/errors.hpp"
#include "poselift/evaluation.hpp"
#include "poselift/synth.hpp"

using namespace poselift;
namespace fs = std::filesystem;

namespace {

Pose3D random_pose3d(int joints, Rng& rng, double spread = 0.5) {
  std::normal_distribution<double> n(0.0, spread);
  Pose3D p;
  for (int j = 0; j < joints; ++j) p.joints.emplace_back(n(rng), n(rng), 10.0 + n(rng));
  return p;
}

Eigen::Matrix3d random_rotation(Rng& rng) {
  std::normal_distribution<double> n;
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized().toRotationMatrix();
}

// Horn's closed form: the optimal rotation is the top eigenvector of a 4x4
// symmetric matrix built from the cross-covariance; scale and translation follow.
struct HornResult {
  double scale;
  Eigen::Matrix3d rotation;
  Eigen::Vector3d translation;
  double residual;
};

HornResult horn_align(const Pose3D& a, const Pose3D& b) {
  const auto J = a.joints.size();
  Eigen::Vector3d ca = Eigen::Vector3d::Zero(), cb = Eigen::Vector3d::Zero();
  for (size_t j = 0; j < J; ++j) {
    ca += a.joints[j];
    cb += b.joints[j];
  }
  ca /= static_cast<double>(J);
  cb /= static_cast<double>(J);
  Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
  double norm_a = 0;
  for (size_t j = 0; j < J; ++j) {
    m += (a.joints[j] - ca) * (b.joints[j] - cb).transpose();
    norm_a += (a.joints[j] - ca).squaredNorm();
  }
  const double sxx = m(0, 0), sxy = m(0, 1), sxz = m(0, 2), syx = m(1, 0), syy = m(1, 1), syz = m(1, 2),
               szx = m(2, 0), szy = m(2, 1), szz = m(2, 2);
  Eigen::Matrix4d n;
  n << sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
       syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
       szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
       sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(n);
  Eigen::Vector4d v = es.eigenvectors().col(3);
  Eigen::Quaterniond q(v[0], v[1], v[2], v[3]);
  HornResult r;
  r.rotation = q.normalized().toRotationMatrix();
  double dot = 0;
  for (size_t j = 0; j < J; ++j) dot += (b.joints[j] - cb).dot(r.rotation * (a.joints[j] - ca));
  r.scale = dot / norm_a;
  r.translation = cb - r.scale * r.rotation * ca;
  r.residual = 0;
  for (size_t j = 0; j < J; ++j)
    r.residual += (r.scale * r.rotation * a.joints[j] + r.translation - b.joints[j]).squaredNorm();
  return r;
}

Pose3D transform(const Pose3D& p, double s, const Eigen::Matrix3d& r, const Eigen::Vector3d& t) {
  Pose3D out;
  for (const auto& x : p.joints) out.joints.push_back(s * r * x + t);
  return out;
}

size_t count_pixels(const cv::Mat& img, bool (*pred)(const cv::Vec3b&)) {
  size_t n = 0;
  for (int r = 0; r < img.rows; ++r)
    for (int c = 0; c < img.cols; ++c) n += pred(img.at<cv::Vec3b>(r, c)) ? 1 : 0;
  return n;
}

bool is_green(const cv::Vec3b& bgr) { return bgr[1] > 150 && bgr[2] < 50 && bgr[0] < 50; }
bool is_red(const cv::Vec3b& bgr) { return bgr[2] > 200 && bgr[1] < 50 && bgr[0] < 50; }

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("procrustes of a pose onto itself is the identity") {
  Rng rng(1);
  auto p = random_pose3d(17, rng);
  auto r = procrustes_align(p, p);
  CHECK(r.residual < 1e-20);
  CHECK(std::abs(r.transform.scale - 1.0) < 1e-12);
  CHECK((r.transform.rotation - Eigen::Matrix3d::Identity()).norm() < 1e-12);
  CHECK(r.transform.translation.norm() < 1e-10);
  for (int j = 0; j < 17; ++j) CHECK((r.aligned.joints[j] - p.joints[j]).norm() < 1e-12);
}

TEST_CASE("similarity transforms are removed exactly") {
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    auto target = random_pose3d(17, rng);
    auto pred = transform(target, 2.3, random_rotation(rng), Eigen::Vector3d::Random() * 5);
    CHECK(procrustes_align(pred, target).residual < 1e-9);
  }
}

TEST_CASE("procrustes agrees with the quaternion closed form") {
  Rng rng(3);
  std::normal_distribution<double> noise(0.0, 0.05);
  for (int i = 0; i < 200; ++i) {
    auto target = random_pose3d(17, rng);
    auto pred = transform(target, 0.7, random_rotation(rng), Eigen::Vector3d::Random());
    for (auto& x : pred.joints) x += Eigen::Vector3d(noise(rng), noise(rng), noise(rng));
    auto ours = procrustes_align(pred, target);
    auto horn = horn_align(pred, target);
    CHECK(std::abs(ours.residual - horn.residual) < 1e-9);
    CHECK(std::abs(ours.transform.scale - horn.scale) < 1e-9);
    CHECK((ours.transform.rotation - horn.rotation).norm() < 1e-9);
    CHECK(std::abs(ours.transform.rotation.determinant() - 1.0) < 1e-12);
    // never worse than leaving the pose where it is
    double raw = 0;
    for (int j = 0; j < 17; ++j) raw += (pred.joints[j] - target.joints[j]).squaredNorm();
    CHECK(ours.residual <= raw + 1e-12);
  }
}

TEST_CASE("reflected predictions still get a proper rotation") {
  Rng rng(4);
  auto target = random_pose3d(17, rng);
  Pose3D mirrored = target;
  for (auto& x : mirrored.joints) x.x() = -x.x();
  auto r = procrustes_align(mirrored, target);
  CHECK(std::abs(r.transform.rotation.determinant() - 1.0) < 1e-12);
  CHECK(std::abs(r.residual - horn_align(mirrored, target).residual) < 1e-9);
}

TEST_CASE("degenerate target and length mismatch") {
  Pose3D flat;
  flat.joints.assign(9, Eigen::Vector3d(1, 2, 3));
  Rng rng(5);
  CHECK_THROWS_AS(procrustes_align(random_pose3d(9, rng), flat), DegenerateTargetError);
  std::vector<Pose3D> a{random_pose3d(9, rng)}, b;
  CHECK_THROWS_AS(p_mpjpe(a, b), LengthMismatchError);
}

TEST_CASE("p_mpjpe is zero on identical and similarity-transformed sets") {
  Rng rng(6);
  std::vector<Pose3D> targets, same, moved;
  for (int i = 0; i < 30; ++i) {
    targets.push_back(random_pose3d(17, rng));
    same.push_back(targets.back());
    moved.push_back(transform(targets.back(), 1.7, random_rotation(rng), Eigen::Vector3d::Random()));
  }
  CHECK(p_mpjpe(same, targets) == doctest::Approx(0.0));
  CHECK(p_mpjpe(moved, targets) < 1e-9);

  // one transform applied to every noisy prediction leaves the metric unchanged
  std::normal_distribution<double> noise(0.0, 0.03);
  std::vector<Pose3D> noisy;
  for (auto p : targets) {
    for (auto& x : p.joints) x += Eigen::Vector3d(noise(rng), noise(rng), noise(rng));
    noisy.push_back(p);
  }
  const auto R = random_rotation(rng);
  std::vector<Pose3D> noisy_moved;
  for (const auto& p : noisy) noisy_moved.push_back(transform(p, 0.4, R, Eigen::Vector3d(1, -2, 3)));
  CHECK(std::abs(p_mpjpe(noisy_moved, targets) - p_mpjpe(noisy, targets)) < 1e-9);
}

TEST_CASE("p_mpjpe matches the Gaussian noise estimate") {
  // After a similarity fit, 7 of the 3J residual degrees of freedom are absorbed;
  // the remaining per-joint error behaves like a Maxwell variable scaled by
  // sqrt((3J - 7) / 3J), whose mean is 2 sigma sqrt(2 / pi).
  Rng rng(7);
  const double sigma = 0.01;
  const int J = 17;
  std::normal_distribution<double> noise(0.0, sigma);
  std::vector<Pose3D> pred, target;
  for (int i = 0; i < 1000; ++i) {
    auto t = random_pose3d(J, rng, 0.4);
    auto p = t;
    for (auto& x : p.joints) x += Eigen::Vector3d(noise(rng), noise(rng), noise(rng));
    target.push_back(t);
    pred.push_back(p);
  }
  const double expected = 2.0 * sigma * std::sqrt(2.0 / std::numbers::pi) * std::sqrt((3.0 * J - 7.0) / (3.0 * J));
  const double measured = p_mpjpe(pred, target);
  MESSAGE("measured " << measured << " expected " << expected);
  CHECK(std::abs(measured - expected) / expected < 0.05);
}

TEST_CASE("pck and auc") {
  std::vector<double> zeros(20, 0.0);
  auto z = pck_auc(zeros);
  CHECK(z.pck == 100.0);
  CHECK(z.auc == 100.0);
  std::vector<double> far(20, 151.0);
  auto f = pck_auc(far);
  CHECK(f.pck == 0.0);
  CHECK(f.auc == 0.0);
  std::vector<double> half(10, 0.0);
  half.resize(20, 200.0);
  CHECK(pck_auc(half).pck == 50.0);
  CHECK_THROWS_AS(pck_auc(std::vector<double>{}), EmptyErrorsError);

  Rng rng(8);
  std::uniform_real_distribution<double> u(0.0, 300.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> e(40);
    for (auto& x : e) x = u(rng);
    auto r = pck_auc(e);
    CHECK(r.auc <= r.pck + 1e-12);
    double prev = -1;
    for (double th = 0; th <= 300; th += 10) {
      const double p = pck_auc(e, th).pck;
      CHECK(p >= prev);
      prev = p;
    }
    // auc equals the average of pck over the 31 grid thresholds
    double avg = 0;
    for (int k = 0; k < kAucSteps; ++k) {
      const double th = 150.0 * k / (kAucSteps - 1);
      avg += th == 0 ? 100.0 * static_cast<double>(std::count(e.begin(), e.end(), 0.0)) / e.size()
                     : pck_auc(e, th).pck;
    }
    CHECK(std::abs(r.auc - avg / kAucSteps) < 1e-9);
  }
}

TEST_CASE("evaluate report") {
  Rng rng(9);
  std::vector<Pose3D> pred, target;
  for (int i = 0; i < 10; ++i) {
    target.push_back(random_pose3d(9, rng));
    pred.push_back(random_pose3d(9, rng));
  }
  auto rep = evaluate(pred, target, {150.0, 1000.0});
  CHECK(rep.per_sample.size() == 10);
  CHECK(std::abs(rep.p_mpjpe - p_mpjpe(pred, target, 1000.0)) < 1e-9);
  CHECK(rep.pck >= 0);
  CHECK(rep.pck <= 100);
  CHECK(rep.auc <= rep.pck);
  auto j = rep.to_json();
  for (const char* key : {"p_mpjpe", "pck", "auc", "threshold", "unit_scale", "per_sample"}) CHECK(j.contains(key));
}

TEST_CASE("procrustes mean of similarity copies is the pose itself") {
  Rng rng(10);
  auto base = random_pose3d(9, rng);
  std::vector<Pose3D> copies;
  for (int i = 0; i < 8; ++i) copies.push_back(transform(base, 0.5 + i * 0.1, random_rotation(rng), Eigen::Vector3d::Random()));
  auto mean = procrustes_mean_pose(copies);
  CHECK(procrustes_align(mean, base).residual < 1e-12);
}

TEST_CASE("pose figures") {
  auto dir = fs::temp_directory_path() / "poselift_unit_fig";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Rng rng(11);
  auto pose = sample_pose3d(humanoid9_model(), rng);
  auto image = torch::rand({64, 64});
  FigureOptions opts;

  emit_pose_figure(image, pose, std::nullopt, humanoid9(), {}, dir / "plain.png", opts);
  auto plain = cv::imread((dir / "plain.png").string());
  REQUIRE_FALSE(plain.empty());
  CHECK(plain.cols == opts.panel_size);

  const std::vector<double> views{0.0, std::numbers::pi / 2};
  emit_pose_figure(image, pose, pose, humanoid9(), views, dir / "same.png", opts);
  auto same = cv::imread((dir / "same.png").string());
  CHECK(same.cols == 3 * opts.panel_size);
  CHECK(count_pixels(same, is_red) > 0);
  CHECK(count_pixels(same, is_green) == 0);  // red covers green exactly

  auto other = sample_pose3d(humanoid9_model(), rng);
  emit_pose_figure(image, pose, other, humanoid9(), views, dir / "diff.png", opts);
  auto diff = cv::imread((dir / "diff.png").string());
  CHECK(count_pixels(diff, is_green) > 0);
  CHECK(fs::file_size(dir / "diff.png") > 0);

  std::vector<double> xs{0, 1, 2, 3}, ys{3, 1, 2, 0.5};
  emit_curve_plot(dir / "curve.png", "loss", xs, ys);
  CHECK(fs::file_size(dir / "curve.png") > 0);
}

}  // TEST_SUITE
