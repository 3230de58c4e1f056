#pragma once

#include <torch/nn/module.h>
#include <torch/nn/modules/container/sequential.h>
#include <torch/nn/modules/conv.h>
#include <torch/nn/modules/linear.h>
#include <torch/nn/pimpl.h>

#include "poselift/camera.hpp"

namespace poselift {

struct NetworkSpec {
  int joints = 9;
  int image_size = 64;      // square H = W, divisible by 16
  int base_channels = 16;   // first conv width; doubles per level up to 4x
  int lifter_width = 512;
  int lifter_blocks = 2;
  double depth_anchor = kDepthAnchor;

  void validate() const;
};

// Image -> skeleton image. Strided-conv encoder, upsampling decoder with skip
// connections at every internal resolution, sigmoid output.
class PhiImpl : public torch::nn::Module {
 public:
  explicit PhiImpl(const NetworkSpec& spec);
  // [B, H, W] or [B, 1, H, W] -> [B, H, W] in [0, 1].
  torch::Tensor forward(const torch::Tensor& images);

 private:
  int size_;
  std::vector<torch::nn::Sequential> down_, up_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(Phi);

// Skeleton image -> J joint positions in the renderer frame, each coordinate
// in [-1, 1]. A small encoder-decoder (with pixel-coordinate channels appended
// to the input) scores one heatmap per joint at quarter resolution; the joint
// is the softmax-weighted mean of the cell centres.
class OmegaImpl : public torch::nn::Module {
 public:
  explicit OmegaImpl(const NetworkSpec& spec);
  // [B, H, W] -> [B, J, 2]
  torch::Tensor forward(const torch::Tensor& skeletons);

 private:
  int joints_, size_;
  std::vector<torch::nn::Sequential> down_;
  torch::nn::Sequential up_{nullptr};
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(Omega);

// 2D pose -> per-joint depth offsets and an elevation angle. The input is
// normalized internally and the offsets are rescaled by the input's size, so
// the lift commutes with uniform scaling of the 2D pose.
class LambdaImpl : public torch::nn::Module {
 public:
  LambdaImpl(const NetworkSpec& spec, int root = 0);
  // [B, J, 2] -> offsets [B, J], elevation [B] in (-pi/2, pi/2).
  LiftOutput forward(const torch::Tensor& poses2d);

 private:
  int joints_, root_;
  double anchor_;
  torch::nn::Linear input_{nullptr}, output_{nullptr};
  std::vector<torch::nn::Sequential> blocks_;
};
TORCH_MODULE(Lambda);

// Skeleton image -> probability that it depicts a plausible pose.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const NetworkSpec& spec);
  // [B, H, W] -> logits [B]
  torch::Tensor forward(const torch::Tensor& skeletons);
  // sigmoid(logits) kept inside [1e-6, 1 - 1e-6] so the value never rounds to 0 or 1.
  torch::Tensor probability(const torch::Tensor& skeletons);

 private:
  int size_;
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(Discriminator);

}  // namespace poselift
