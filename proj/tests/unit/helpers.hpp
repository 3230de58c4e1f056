#pragma once

#include <cmath>
#include <functional>
#include <random>

#include <torch/torch.h>

#include "poselift/skeleton.hpp"

namespace testutil {

inline torch::Tensor random_poses(int64_t batch, int joints, uint64_t seed, double spread = 0.5) {
  auto gen = at::detail::createCPUGenerator(seed);
  return torch::rand({batch, joints, 2}, gen, torch::kFloat64) * 2.0 * spread - spread;
}

inline poselift::Pose2D random_pose2d(int joints, std::mt19937_64& rng, double spread = 1.0) {
  std::uniform_real_distribution<double> u(-spread, spread);
  poselift::Pose2D p;
  for (int j = 0; j < joints; ++j) p.joints.emplace_back(u(rng), u(rng));
  return p;
}

// Central finite-difference check of d f / d x for a scalar-valued f. Returns
// the largest relative error max|g - fd| / max(|fd|, floor) over the entries.
inline double fd_relative_error(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                const torch::Tensor& x0, double h = 1e-4, double floor = 1e-3) {
  auto x = x0.detach().clone().to(torch::kFloat64).requires_grad_(true);
  auto y = f(x);
  auto grad = torch::autograd::grad({y}, {x})[0].detach();
  auto flat = x0.detach().clone().to(torch::kFloat64).reshape(-1);
  double worst = 0.0;
  for (int64_t i = 0; i < flat.numel(); ++i) {
    auto plus = flat.clone();
    auto minus = flat.clone();
    plus[i] += h;
    minus[i] -= h;
    double fp, fm;
    {
      torch::NoGradGuard ng;
      fp = f(plus.view(x0.sizes())).item<double>();
      fm = f(minus.view(x0.sizes())).item<double>();
    }
    const double fd = (fp - fm) / (2.0 * h);
    const double g = grad.reshape(-1)[i].item<double>();
    worst = std::max(worst, std::abs(g - fd) / std::max(std::abs(fd), floor));
  }
  return worst;
}

}  // namespace testutil
