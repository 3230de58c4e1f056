#include "poselift/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/LU>
#include <Eigen/SVD>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "poselift/camera.hpp"
#include "poselift/errors.hpp"
#include "poselift/image_io.hpp"

namespace poselift {

Pose3D SimilarityTransform::apply(const Pose3D& pose) const {
  Pose3D out;
  out.joints.reserve(pose.joints.size());
  for (const auto& j : pose.joints) out.joints.push_back(apply(j));
  return out;
}

namespace {

Eigen::Matrix3Xd as_matrix(const Pose3D& pose) {
  Eigen::Matrix3Xd m(3, pose.joint_count());
  for (int i = 0; i < pose.joint_count(); ++i) m.col(i) = pose.joints[i];
  return m;
}

}  // namespace

ProcrustesResult procrustes_align(const Pose3D& predicted, const Pose3D& target) {
  if (predicted.joint_count() != target.joint_count())
    throw TopologyMismatchError("procrustes_align: joint counts differ");
  if (target.joint_count() == 0) throw DegenerateTargetError("procrustes_align: empty pose");
  const Eigen::Matrix3Xd p = as_matrix(predicted), q = as_matrix(target);
  const Eigen::Vector3d mu_p = p.rowwise().mean(), mu_q = q.rowwise().mean();
  const Eigen::Matrix3Xd x = p.colwise() - mu_p, y = q.colwise() - mu_q;
  const double target_spread = y.squaredNorm();
  if (!(target_spread > 1e-20 * (1.0 + mu_q.squaredNorm())))
    throw DegenerateTargetError("procrustes_align: target joints coincide");

  SimilarityTransform tf;
  const double pred_spread = x.squaredNorm();
  if (pred_spread > 0.0) {
    const Eigen::Matrix3d h = y * x.transpose();
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Vector3d d(1.0, 1.0, (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0 ? -1.0 : 1.0);
    tf.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
    tf.scale = svd.singularValues().dot(d) / pred_spread;
  } else {
    tf.scale = 0.0;
  }
  tf.translation = mu_q - tf.scale * tf.rotation * mu_p;

  ProcrustesResult r;
  r.transform = tf;
  r.aligned = tf.apply(predicted);
  for (int i = 0; i < target.joint_count(); ++i) r.residual += (r.aligned.joints[i] - target.joints[i]).squaredNorm();
  return r;
}

std::vector<double> aligned_joint_errors(const Pose3D& predicted, const Pose3D& target) {
  const auto r = procrustes_align(predicted, target);
  std::vector<double> e;
  e.reserve(target.joints.size());
  for (int i = 0; i < target.joint_count(); ++i) e.push_back((r.aligned.joints[i] - target.joints[i]).norm());
  return e;
}

double p_mpjpe(std::span<const Pose3D> predicted, std::span<const Pose3D> target, double unit_scale) {
  if (predicted.size() != target.size())
    throw LengthMismatchError("p_mpjpe: " + std::to_string(predicted.size()) + " predictions for " +
                              std::to_string(target.size()) + " targets");
  if (target.empty()) throw EmptyBatchError("p_mpjpe: no samples");
  double total = 0.0;
  for (size_t i = 0; i < target.size(); ++i) {
    const auto e = aligned_joint_errors(predicted[i], target[i]);
    double s = 0.0;
    for (double v : e) s += v;
    total += s / static_cast<double>(e.size());
  }
  return unit_scale * total / static_cast<double>(target.size());
}

PckAuc pck_auc(std::span<const double> errors, double threshold) {
  if (errors.empty()) throw EmptyErrorsError("pck_auc: no errors");
  for (double e : errors)
    if (!(e >= 0.0)) throw DomainError("pck_auc: errors must be non-negative");
  auto pck_at = [&](double t) {
    const auto hits = std::count_if(errors.begin(), errors.end(), [t](double e) { return e < t; });
    return 100.0 * static_cast<double>(hits) / static_cast<double>(errors.size());
  };
  PckAuc out;
  out.pck = pck_at(threshold);
  // With strict inequality the t = 0 point scores 0 unless an error is
  // exactly 0; treat zero errors as correct at every threshold.
  double sum = 0.0;
  for (int k = 0; k < kAucSteps; ++k) {
    const double t = threshold * k / (kAucSteps - 1);
    const auto hits = std::count_if(errors.begin(), errors.end(), [t](double e) { return e < t || e == 0.0; });
    sum += 100.0 * static_cast<double>(hits) / static_cast<double>(errors.size());
  }
  out.auc = sum / kAucSteps;
  return out;
}

nlohmann::json EvalReport::to_json() const {
  return {{"p_mpjpe", p_mpjpe}, {"pck", pck},         {"auc", auc},
          {"threshold", threshold}, {"unit_scale", unit_scale}, {"per_sample", per_sample}};
}

EvalReport evaluate(std::span<const Pose3D> predicted, std::span<const Pose3D> target, const EvalOptions& options) {
  if (predicted.size() != target.size()) throw LengthMismatchError("evaluate: prediction and target counts differ");
  if (target.empty()) throw EmptyBatchError("evaluate: no samples");
  EvalReport r;
  r.threshold = options.threshold;
  r.unit_scale = options.unit_scale;
  std::vector<double> joints;
  double total = 0.0;
  for (size_t i = 0; i < target.size(); ++i) {
    auto e = aligned_joint_errors(predicted[i], target[i]);
    double s = 0.0;
    for (double& v : e) {
      v *= options.unit_scale;
      s += v;
      joints.push_back(v);
    }
    r.per_sample.push_back(s / static_cast<double>(e.size()));
    total += r.per_sample.back();
  }
  r.p_mpjpe = total / static_cast<double>(target.size());
  const auto pa = pck_auc(joints, options.threshold);
  r.pck = pa.pck;
  r.auc = pa.auc;
  return r;
}

Pose3D procrustes_mean_pose(std::span<const Pose3D> poses, int iterations) {
  if (poses.empty()) throw EmptyBatchError("procrustes_mean_pose: no poses");
  Pose3D mean = poses.front();
  const int j = mean.joint_count();
  for (int it = 0; it < iterations; ++it) {
    Pose3D next;
    next.joints.assign(j, Eigen::Vector3d::Zero());
    for (const auto& p : poses) {
      const auto a = procrustes_align(p, mean).aligned;
      for (int i = 0; i < j; ++i) next.joints[i] += a.joints[i];
    }
    for (auto& v : next.joints) v /= static_cast<double>(poses.size());
    // Pin the reference's size so the iteration cannot shrink towards a point.
    const auto fixed = procrustes_align(next, poses.front());
    mean = fixed.aligned;
  }
  return mean;
}

namespace {

const cv::Scalar kRed(0, 0, 255), kGreen(0, 200, 0);

cv::Mat image_panel(const torch::Tensor& image, int size) {
  auto img = image.dim() == 3 ? image.squeeze(0) : image;
  if (img.dim() != 2) throw ShapeMismatchError("figure image must be [H, W]");
  auto u8 = (img.scalar_type() == torch::kUInt8 ? img : quantize_image(img)).contiguous().cpu();
  cv::Mat grey(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC1, u8.data_ptr<uint8_t>());
  cv::Mat big, bgr;
  cv::resize(grey, big, cv::Size(size, size), 0, 0, cv::INTER_NEAREST);
  cv::cvtColor(big, bgr, cv::COLOR_GRAY2BGR);
  return bgr;
}

std::vector<cv::Point> view_points(const Pose3D& pose, const Eigen::Vector3d& centre, double azimuth, double px_per_unit,
                                   int size) {
  const Eigen::Matrix3d r = azimuth_matrix(azimuth);
  std::vector<cv::Point> pts;
  for (const auto& j : pose.joints) {
    const Eigen::Vector3d v = r * (j - centre);
    pts.emplace_back(static_cast<int>(std::lround(size / 2.0 + v.x() * px_per_unit)),
                     static_cast<int>(std::lround(size / 2.0 - v.y() * px_per_unit)));
  }
  return pts;
}

void draw_skeleton(cv::Mat& canvas, const std::vector<cv::Point>& pts, const SkeletonTopology& topology,
                   const cv::Scalar& colour, int thickness) {
  for (const auto& b : topology.bones()) cv::line(canvas, pts[b.parent], pts[b.child], colour, thickness, cv::LINE_8);
  for (const auto& p : pts) cv::circle(canvas, p, thickness + 1, colour, cv::FILLED, cv::LINE_8);
}

}  // namespace

void emit_pose_figure(const torch::Tensor& image, const Pose3D& predicted, const std::optional<Pose3D>& target,
                      const SkeletonTopology& topology, std::span<const double> views,
                      const std::filesystem::path& path, const FigureOptions& options) {
  const int size = options.panel_size;
  if (predicted.joint_count() != topology.joint_count()) throw TopologyMismatchError("figure pose/topology mismatch");
  Pose3D shown = predicted;
  if (target) {
    if (target->joint_count() != topology.joint_count()) throw TopologyMismatchError("figure target/topology mismatch");
    shown = procrustes_align(predicted, *target).aligned;
  }
  const Pose3D& reference = target ? *target : shown;
  Eigen::Vector3d centre = Eigen::Vector3d::Zero();
  for (const auto& j : reference.joints) centre += j;
  centre /= static_cast<double>(reference.joint_count());
  double radius = 1e-9;
  for (const Pose3D* p : {static_cast<const Pose3D*>(&shown), &reference})
    for (const auto& j : p->joints) radius = std::max(radius, (j - centre).norm());
  const double px_per_unit = 0.45 * size / radius;

  std::vector<cv::Mat> panels{image_panel(image, size)};
  for (double az : views) {
    cv::Mat panel(size, size, CV_8UC3, cv::Scalar(255, 255, 255));
    if (target) draw_skeleton(panel, view_points(*target, centre, az, px_per_unit, size), topology, kGreen,
                              options.line_thickness);
    draw_skeleton(panel, view_points(shown, centre, az, px_per_unit, size), topology, kRed, options.line_thickness);
    panels.push_back(panel);
  }
  cv::Mat figure;
  cv::hconcat(panels, figure);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), figure)) throw IoError("cannot write figure " + path.string());
}

void emit_curve_plot(const std::filesystem::path& path, const std::string& title, std::span<const double> xs,
                     std::span<const double> ys) {
  if (xs.size() != ys.size()) throw LengthMismatchError("plot: x and y lengths differ");
  constexpr int kW = 640, kH = 400, kLeft = 70, kRight = 20, kTop = 40, kBottom = 40;
  cv::Mat canvas(kH, kW, CV_8UC3, cv::Scalar(255, 255, 255));
  cv::putText(canvas, title, {kLeft, 25}, cv::FONT_HERSHEY_SIMPLEX, 0.6, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
  cv::rectangle(canvas, {kLeft, kTop}, {kW - kRight, kH - kBottom}, cv::Scalar(0, 0, 0));

  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) continue;
    x0 = std::min(x0, xs[i]);
    x1 = std::max(x1, xs[i]);
    y0 = std::min(y0, ys[i]);
    y1 = std::max(y1, ys[i]);
  }
  if (std::isfinite(x0)) {
    if (x1 == x0) x1 = x0 + 1.0;
    if (y1 == y0) y1 = y0 + 1.0;
    auto to_px = [&](double x, double y) {
      return cv::Point(static_cast<int>(kLeft + (x - x0) / (x1 - x0) * (kW - kLeft - kRight)),
                       static_cast<int>(kH - kBottom - (y - y0) / (y1 - y0) * (kH - kTop - kBottom)));
    };
    std::vector<cv::Point> pts;
    for (size_t i = 0; i < xs.size(); ++i)
      if (std::isfinite(xs[i]) && std::isfinite(ys[i])) pts.push_back(to_px(xs[i], ys[i]));
    cv::polylines(canvas, pts, false, cv::Scalar(200, 80, 0), 1, cv::LINE_AA);
    auto label = [&](double v, cv::Point at) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4g", v);
      cv::putText(canvas, buf, at, cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
    };
    label(y1, {5, kTop + 5});
    label(y0, {5, kH - kBottom});
    label(x0, {kLeft, kH - kBottom + 18});
    label(x1, {kW - kRight - 50, kH - kBottom + 18});
  } else {
    cv::putText(canvas, "no data", {kW / 2 - 30, kH / 2}, cv::FONT_HERSHEY_SIMPLEX, 0.6, cv::Scalar(0, 0, 0));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), canvas)) throw IoError("cannot write plot " + path.string());
}

}  // namespace poselift
