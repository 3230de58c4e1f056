#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <ATen/core/Generator.h>
#include <torch/types.h>

#include "poselift/skeleton.hpp"

namespace poselift {

struct LossWeights {
  double adversarial = 1.0;  // w_D
  double omega = 1.0;        // w_Omega
  double base = 1.0;         // w_base, applied to L_2d + L_3d + L_def
  double flow = 1.0;         // w_NF
  double bone = 1.0;         // w_bl
  double lambda = 0.1;       // pixel term inside L_Omega
  double bone_sigma = 0.1;   // sigma_b
  std::vector<double> reference_bone_lengths;  // b-bar, mean 1

  // ConfigError if a weight is negative, lambda/sigma not positive, or b-bar
  // has the wrong length or a mean away from 1.
  void validate(int bone_count) const;
};

// Mean squared coordinate difference over every element of the batch.
torch::Tensor loss_2d(const torch::Tensor& y_prime, const torch::Tensor& y);
torch::Tensor loss_3d(const torch::Tensor& v_hat_prime, const torch::Tensor& v_hat);

// Uniformly random permutation without fixed points; PairingError if n < 2.
torch::Tensor random_derangement(int64_t n, at::Generator generator);

// Mean over (j, k = pairing[j]) of |(v'_j - v'_k) - (v_j - v_k)|^2 / (J * 3).
torch::Tensor loss_def(const torch::Tensor& v, const torch::Tensor& v_prime, const torch::Tensor& pairing);

// Bone length divided by the pose's mean bone length. [B, J, D] -> [B, N].
torch::Tensor relative_bone_lengths(const torch::Tensor& poses, const SkeletonTopology& topology);
std::vector<double> relative_bone_lengths(const Pose3D& pose, const SkeletonTopology& topology);

// Mean relative bone lengths of a set of 2D poses, used as b-bar.
std::vector<double> reference_bone_lengths(const torch::Tensor& poses2d, const SkeletonTopology& topology);

// -sum_n log N(b_n | bbar_n, sigma_b), averaged over the batch.
torch::Tensor loss_bl(const torch::Tensor& poses3d, const SkeletonTopology& topology, const LossWeights& weights);

// E_w log D(w) + E_s log(1 - D(s)); inputs are probabilities in (0, 1).
torch::Tensor loss_discriminator(const torch::Tensor& d_real, const torch::Tensor& d_fake);
// Non-saturating generator term -E_s log D(s).
torch::Tensor loss_generator_adv(const torch::Tensor& d_fake);
// Same quantities from logits, numerically stable for training.
torch::Tensor loss_discriminator_logits(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);
torch::Tensor loss_generator_adv_logits(const torch::Tensor& fake_logits);

// |Omega(kappa(u)) - u|^2 + lambda |kappa(y) - s|^2, both as means.
torch::Tensor loss_omega(const torch::Tensor& predicted_on_prior, const torch::Tensor& prior_joints,
                         const torch::Tensor& rendered_prediction, const torch::Tensor& skeleton_image, double lambda);

// Scalar loss terms of one generator update. `discriminator` is the value of
// the discriminator objective and is only reported, never optimised here.
struct LossComponents {
  torch::Tensor adversarial;
  torch::Tensor omega;
  torch::Tensor l2d;
  torch::Tensor l3d;
  torch::Tensor def;
  torch::Tensor flow;
  torch::Tensor bone;
  torch::Tensor discriminator;
};

// Raw value of each of the seven terms keyed "L_D", "L_Omega", "L_2d",
// "L_3d", "L_def", "L_NF", "L_bl", plus the weighted total and the
// generator's adversarial term.
struct LossBreakdown {
  std::map<std::string, double> terms;
  double generator_adversarial = 0.0;
  double total = 0.0;
};

inline const std::vector<std::string>& loss_term_names() {
  static const std::vector<std::string> names{"L_D", "L_Omega", "L_2d", "L_3d", "L_def", "L_NF", "L_bl"};
  return names;
}

// w_D L_adv + w_Omega L_Omega + w_base (L_2d + L_3d + L_def) + w_NF L_NF + w_bl L_bl.
// Undefined components count as zero. NonFiniteLossError names the first
// non-finite term.
torch::Tensor loss_total(const LossComponents& components, const LossWeights& weights,
                         LossBreakdown* breakdown = nullptr);

}  // namespace poselift
