#include "poselift/losses.hpp"

#include <cmath>
#include <numbers>

#include <torch/torch.h>

#include "poselift/errors.hpp"

namespace poselift {

namespace F = torch::nn::functional;

void LossWeights::validate(int bone_count) const {
  for (double w : {adversarial, omega, base, flow, bone})
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
  if (!(lambda > 0.0)) throw ConfigError("lambda must be positive");
  if (!(bone_sigma > 0.0)) throw ConfigError("bone-length sigma must be positive");
  if (static_cast<int>(reference_bone_lengths.size()) != bone_count)
    throw ConfigError("reference bone lengths: expected " + std::to_string(bone_count) + " entries, got " +
                      std::to_string(reference_bone_lengths.size()));
  double mean = 0.0;
  for (double b : reference_bone_lengths) mean += b;
  mean /= bone_count;
  if (std::abs(mean - 1.0) > 1e-6) throw ConfigError("reference bone lengths must average to 1");
}

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw ShapeMismatchError(std::string(what) + ": operand shapes differ");
}

}  // namespace

torch::Tensor loss_2d(const torch::Tensor& y_prime, const torch::Tensor& y) {
  require_same_shape(y_prime, y, "loss_2d");
  return (y_prime - y).pow(2).mean();
}

torch::Tensor loss_3d(const torch::Tensor& v_hat_prime, const torch::Tensor& v_hat) {
  require_same_shape(v_hat_prime, v_hat, "loss_3d");
  return (v_hat_prime - v_hat).pow(2).mean();
}

torch::Tensor random_derangement(int64_t n, at::Generator generator) {
  if (n < 2) throw PairingError("deformation loss needs a batch of at least two poses, got " + std::to_string(n));
  auto identity = torch::arange(n, torch::kInt64);
  while (true) {
    auto perm = torch::randperm(n, generator, torch::TensorOptions().dtype(torch::kInt64));
    if (!(perm == identity).any().item<bool>()) return perm;
  }
}

torch::Tensor loss_def(const torch::Tensor& v, const torch::Tensor& v_prime, const torch::Tensor& pairing) {
  require_same_shape(v, v_prime, "loss_def");
  if (v.size(0) < 2) throw PairingError("deformation loss needs a batch of at least two poses");
  if (pairing.numel() != v.size(0)) throw PairingError("pairing must name one partner per sample");
  auto before = v - v.index_select(0, pairing);
  auto after = v_prime - v_prime.index_select(0, pairing);
  return (after - before).pow(2).mean();
}

torch::Tensor relative_bone_lengths(const torch::Tensor& poses, const SkeletonTopology& topology) {
  if (poses.dim() != 3 || poses.size(1) != topology.joint_count())
    throw ShapeMismatchError("relative_bone_lengths expects [B, " + std::to_string(topology.joint_count()) + ", D]");
  auto bones = topology.bone_index_tensor();
  auto vec = poses.index_select(1, bones.select(1, 1)) - poses.index_select(1, bones.select(1, 0));
  // sqrt has an infinite slope at zero; keep the gradient finite for collapsed bones.
  auto lengths = (vec.pow(2).sum(-1) + 1e-12).sqrt();
  auto mean = lengths.mean(-1, /*keepdim=*/true);
  if ((mean <= 1e-6).any().item<bool>()) throw ZeroSkeletonError("every bone of a pose has zero length");
  return lengths / mean;
}

std::vector<double> relative_bone_lengths(const Pose3D& pose, const SkeletonTopology& topology) {
  if (pose.joint_count() != topology.joint_count()) throw TopologyMismatchError("joint count differs from topology");
  std::vector<double> lengths;
  double mean = 0.0;
  for (const auto& b : topology.bones()) {
    lengths.push_back((pose.joints[b.child] - pose.joints[b.parent]).norm());
    mean += lengths.back();
  }
  mean /= static_cast<double>(lengths.size());
  if (!(mean > 0.0)) throw ZeroSkeletonError("every bone of the pose has zero length");
  for (double& l : lengths) l /= mean;
  return lengths;
}

std::vector<double> reference_bone_lengths(const torch::Tensor& poses2d, const SkeletonTopology& topology) {
  if (poses2d.size(0) == 0) throw DatasetEmptyError("no poses for reference bone lengths");
  auto rel = relative_bone_lengths(poses2d.to(torch::kFloat64), topology).mean(0);
  rel = rel / rel.mean();
  return std::vector<double>(rel.data_ptr<double>(), rel.data_ptr<double>() + rel.numel());
}

torch::Tensor loss_bl(const torch::Tensor& poses3d, const SkeletonTopology& topology, const LossWeights& weights) {
  weights.validate(topology.bone_count());
  auto b = relative_bone_lengths(poses3d, topology);
  auto ref = torch::tensor(weights.reference_bone_lengths, b.options().requires_grad(false));
  const double sigma = weights.bone_sigma;
  const double log_norm = std::log(sigma * std::sqrt(2.0 * std::numbers::pi));
  auto nll = ((b - ref).pow(2) / (2.0 * sigma * sigma) + log_norm).sum(-1);
  return nll.mean();
}

torch::Tensor loss_discriminator(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
  // D(w) = 1 and D(s) = 0 are the (finite) supremum and stay admissible.
  if (!((d_real > 0) & (d_real <= 1)).all().item<bool>() || !((d_fake >= 0) & (d_fake < 1)).all().item<bool>())
    throw DomainError("discriminator outputs must lie in (0, 1)");
  return torch::log(d_real).mean() + torch::log1p(-d_fake).mean();
}

torch::Tensor loss_generator_adv(const torch::Tensor& d_fake) {
  if (!((d_fake > 0) & (d_fake < 1)).all().item<bool>()) throw DomainError("discriminator outputs must lie in (0, 1)");
  return -torch::log(d_fake).mean();
}

torch::Tensor loss_discriminator_logits(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  // log sigmoid(l) = -softplus(-l); log(1 - sigmoid(l)) = -softplus(l).
  return -F::softplus(-real_logits).mean() - F::softplus(fake_logits).mean();
}

torch::Tensor loss_generator_adv_logits(const torch::Tensor& fake_logits) { return F::softplus(-fake_logits).mean(); }

torch::Tensor loss_omega(const torch::Tensor& predicted_on_prior, const torch::Tensor& prior_joints,
                         const torch::Tensor& rendered_prediction, const torch::Tensor& skeleton_image, double lambda) {
  require_same_shape(predicted_on_prior, prior_joints, "loss_omega joints");
  require_same_shape(rendered_prediction, skeleton_image, "loss_omega images");
  return (predicted_on_prior - prior_joints).pow(2).mean() + lambda * (rendered_prediction - skeleton_image).pow(2).mean();
}

torch::Tensor loss_total(const LossComponents& c, const LossWeights& weights, LossBreakdown* breakdown) {
  auto value = [](const torch::Tensor& t) { return t.defined() ? t.detach().item<double>() : 0.0; };
  const std::pair<const char*, const torch::Tensor*> named[] = {
      {"L_D", &c.discriminator}, {"L_adv", &c.adversarial}, {"L_Omega", &c.omega}, {"L_2d", &c.l2d},
      {"L_3d", &c.l3d},          {"L_def", &c.def},         {"L_NF", &c.flow},     {"L_bl", &c.bone}};
  for (const auto& [name, t] : named) {
    const double v = value(*t);
    if (!std::isfinite(v)) throw NonFiniteLossError(name, v);
  }

  torch::Tensor total;
  auto add = [&](double w, const torch::Tensor& t) {
    if (!t.defined() || w == 0.0) return;
    total = total.defined() ? total + w * t : w * t;
  };
  add(weights.adversarial, c.adversarial);
  add(weights.omega, c.omega);
  add(weights.base, c.l2d);
  add(weights.base, c.l3d);
  add(weights.base, c.def);
  add(weights.flow, c.flow);
  add(weights.bone, c.bone);
  if (!total.defined()) total = torch::zeros({}, torch::kFloat64);

  if (breakdown) {
    breakdown->terms = {{"L_D", value(c.discriminator)}, {"L_Omega", value(c.omega)}, {"L_2d", value(c.l2d)},
                        {"L_3d", value(c.l3d)},          {"L_def", value(c.def)},     {"L_NF", value(c.flow)},
                        {"L_bl", value(c.bone)}};
    breakdown->generator_adversarial = value(c.adversarial);
    breakdown->total = value(total);
  }
  return total;
}

}  // namespace poselift
