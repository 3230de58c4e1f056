#include "poselift/networks.hpp"

#include <numbers>

#include <torch/torch.h>

#include "poselift/errors.hpp"

namespace poselift {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

void NetworkSpec::validate() const {
  if (joints < 2) throw ConfigError("networks need at least two joints");
  if (image_size < 16 || image_size % 16 != 0) throw ConfigError("image size must be a positive multiple of 16");
  if (base_channels < 1 || lifter_width < 1 || lifter_blocks < 0) throw ConfigError("network widths must be positive");
}

namespace {

void append_conv_block(nn::Sequential& s, int in, int out, int stride, bool second_conv = false) {
  s->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1)));
  s->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
  if (second_conv) {
    s->push_back(nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)));
    s->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
  }
}

nn::Sequential conv_block(int in, int out, int stride) {
  nn::Sequential s;
  append_conv_block(s, in, out, stride);
  return s;
}

torch::Tensor as_nchw(const torch::Tensor& images, int size) {
  auto x = images.dim() == 3 ? images.unsqueeze(1) : images;
  if (x.dim() != 4 || x.size(1) != 1 || x.size(2) != size || x.size(3) != size)
    throw ShapeMismatchError("expected [B, " + std::to_string(size) + ", " + std::to_string(size) + "] images");
  return x;
}

int level_channels(const NetworkSpec& spec, int level) { return spec.base_channels * (1 << std::min(level, 2)); }

}  // namespace

PhiImpl::PhiImpl(const NetworkSpec& spec) : size_(spec.image_size) {
  spec.validate();
  int in = 1;
  for (int l = 0; l < 4; ++l) {
    down_.push_back(register_module("down" + std::to_string(l), conv_block(in, level_channels(spec, l), 2)));
    in = level_channels(spec, l);
  }
  // Up block l maps level (3 - l) back to the resolution of level (2 - l),
  // concatenating that level's encoder features (the raw input for the last).
  // The decoder runs at half the encoder width; it dominates the cost.
  for (int l = 0; l < 4; ++l) {
    const int skip = l < 3 ? level_channels(spec, 2 - l) : 1;
    const int out = std::max(1, (l < 3 ? level_channels(spec, 2 - l) : spec.base_channels) / 2);
    up_.push_back(register_module("up" + std::to_string(l), conv_block(in + skip, out, 1)));
    in = out;
  }
  head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(in, 1, 3).padding(1)));
  // skeleton images are mostly background; start dark rather than mid-grey
  torch::NoGradGuard guard;
  head_->bias.fill_(-3.0);
}

torch::Tensor PhiImpl::forward(const torch::Tensor& images) {
  auto x = as_nchw(images, size_);
  std::vector<torch::Tensor> skips{x};
  for (auto& d : down_) {
    x = d->forward(x);
    skips.push_back(x);
  }
  skips.pop_back();
  for (auto& u : up_) {
    x = F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
    x = u->forward(torch::cat({x, skips.back()}, 1));
    skips.pop_back();
  }
  return torch::sigmoid(head_(x)).squeeze(1);
}

OmegaImpl::OmegaImpl(const NetworkSpec& spec) : joints_(spec.joints), size_(spec.image_size) {
  spec.validate();
  const int c = spec.base_channels;
  for (int l = 0; l < 3; ++l) {
    nn::Sequential s;
    append_conv_block(s, l == 0 ? 3 : c << (l - 1), c << l, 2, /*second_conv=*/true);
    down_.push_back(register_module("down" + std::to_string(l), s));
  }
  nn::Sequential up;
  append_conv_block(up, 4 * c + 2 * c, 2 * c, 1, /*second_conv=*/true);
  up_ = register_module("up", up);
  head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(2 * c, joints_, 3).padding(1)));
}

torch::Tensor OmegaImpl::forward(const torch::Tensor& skeletons) {
  auto x = as_nchw(skeletons, size_);
  const auto b = x.size(0);
  auto coords = torch::linspace(-1.0, 1.0, size_, x.options());
  auto cols = coords.view({1, 1, 1, size_}).expand({b, 1, size_, size_});
  auto rows = coords.flip(0).view({1, 1, size_, 1}).expand({b, 1, size_, size_});
  auto h1 = down_[0]->forward(torch::cat({x, cols, rows}, 1));
  auto h2 = down_[1]->forward(h1);
  auto h3 = down_[2]->forward(h2);
  h3 = F::interpolate(h3, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
  auto heat = head_(up_->forward(torch::cat({h3, h2}, 1)));  // [B, J, G, G] at a quarter of the resolution
  const auto g = heat.size(-1);
  auto p = torch::softmax(heat.flatten(2), -1).view({b, joints_, g, g});
  // centre of each k x k cell, in the same frame the renderer uses for pixels
  const double k = static_cast<double>(size_) / static_cast<double>(g);
  auto centres = (torch::arange(g, x.options()) * k + 0.5 * (k - 1.0)) * (2.0 / (size_ - 1)) - 1.0;
  auto px = (p.sum(2) * centres).sum(-1);
  auto py = (p.sum(3) * centres.flip(0)).sum(-1);
  return torch::stack({px, py}, -1);
}

LambdaImpl::LambdaImpl(const NetworkSpec& spec, int root)
    : joints_(spec.joints), root_(root), anchor_(spec.depth_anchor) {
  spec.validate();
  if (root < 0 || root >= joints_) throw JointIndexError("lifter root index out of range");
  const int w = spec.lifter_width;
  input_ = register_module("input", nn::Linear(2 * joints_, w));
  for (int i = 0; i < spec.lifter_blocks; ++i)
    blocks_.push_back(register_module("block" + std::to_string(i),
                                      nn::Sequential(nn::Linear(w, w), nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)),
                                                     nn::Linear(w, w), nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)))));
  output_ = register_module("output", nn::Linear(w, joints_ + 1));
}

LiftOutput LambdaImpl::forward(const torch::Tensor& poses2d) {
  if (poses2d.dim() != 3 || poses2d.size(1) != joints_ || poses2d.size(2) != 2)
    throw ShapeMismatchError("lifter expects [B, " + std::to_string(joints_) + ", 2] poses");
  auto centred = poses2d - poses2d.narrow(1, root_, 1);
  auto scale = centred.norm(2, -1).mean(-1, /*keepdim=*/true).clamp_min(1e-9);
  auto h = F::leaky_relu(input_(normalize_pose2d(poses2d, root_).flatten(1)), F::LeakyReLUFuncOptions().negative_slope(0.2));
  for (auto& b : blocks_) h = h + b->forward(h);
  auto raw = output_(h);
  LiftOutput out;
  out.depth_offsets = anchor_ * scale * raw.narrow(1, 0, joints_);
  out.elevation = (std::numbers::pi / 2.0) * torch::tanh(raw.select(1, joints_));
  return out;
}

DiscriminatorImpl::DiscriminatorImpl(const NetworkSpec& spec) : size_(spec.image_size) {
  spec.validate();
  net_ = nn::Sequential();
  int in = 1;
  for (int l = 0; l < 4; ++l) {
    append_conv_block(net_, in, level_channels(spec, l), 2);
    in = level_channels(spec, l);
  }
  net_->push_back(nn::Flatten());
  net_->push_back(nn::Linear(in * (spec.image_size / 16) * (spec.image_size / 16), 1));
  register_module("net", net_);
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& skeletons) {
  return net_->forward(as_nchw(skeletons, size_)).squeeze(1);
}

torch::Tensor DiscriminatorImpl::probability(const torch::Tensor& skeletons) {
  return torch::sigmoid(forward(skeletons)).clamp(1e-6, 1.0 - 1e-6);
}

}  // namespace poselift
