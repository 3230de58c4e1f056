#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>
#include <ATen/core/Generator.h>
#include <torch/nn/module.h>
#include <torch/nn/modules/container/sequential.h>
#include <torch/nn/pimpl.h>

#include "poselift/skeleton.hpp"

namespace poselift {

// Principal subspace of flattened 2D poses (x0, y0, x1, y1, ...).
// Eigenvalues are those of the population (1/M) covariance.
struct PcaSubspace {
  Eigen::VectorXd mean;         // D
  Eigen::MatrixXd basis;        // N x D, orthonormal rows, descending variance
  Eigen::VectorXd eigenvalues;  // N retained
  Eigen::VectorXd discarded;    // D - N trailing eigenvalues

  int dims() const { return static_cast<int>(basis.rows()); }
  int input_dims() const { return static_cast<int>(basis.cols()); }
};

// Rows of `data` are samples. RankError if fewer than n_pca directions carry variance.
PcaSubspace pca_fit(const Eigen::MatrixXd& data, int n_pca);
PcaSubspace pca_fit(std::span<const Pose2D> poses, int n_pca);

Eigen::VectorXd pca_project(const PcaSubspace& pca, const Eigen::VectorXd& x);
Eigen::VectorXd pca_reconstruct(const PcaSubspace& pca, const Eigen::VectorXd& coeffs);

// Differentiable whitened coordinates diag(lambda)^-1/2 B (x - mean) for a
// [B, D] batch; the flow models densities in these coordinates.
torch::Tensor pca_whiten(const PcaSubspace& pca, const torch::Tensor& flat_poses);

struct FlowConfig {
  int dims = 10;
  int layers = 8;
  int hidden = 64;
  double scale_bound = 2.0;
};

// Affine coupling layer: the masked half conditions a scale s and shift t for
// the other half, y = x * exp(s) + t, with s = scale_bound * tanh(.).
class CouplingLayerImpl : public torch::nn::Module {
 public:
  CouplingLayerImpl(int dims, int hidden, torch::Tensor mask, double scale_bound);

  // Data -> latent direction. Returns (output, log|det J|) with log-det shaped [B].
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x);
  std::pair<torch::Tensor, torch::Tensor> inverse(const torch::Tensor& y);

  // Zeroes the output layers so the layer is the identity map.
  void reset_to_identity();

 private:
  std::pair<torch::Tensor, torch::Tensor> scale_shift(const torch::Tensor& conditioner);

  torch::Tensor mask_;
  double scale_bound_;
  torch::nn::Sequential scale_net_{nullptr};
  torch::nn::Sequential shift_net_{nullptr};
};
TORCH_MODULE(CouplingLayer);

// Stack of coupling layers f mapping whitened PCA coordinates to a standard
// normal; g = f^-1 generates samples.
class FlowPriorImpl : public torch::nn::Module {
 public:
  explicit FlowPriorImpl(FlowConfig config);

  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x);  // f
  std::pair<torch::Tensor, torch::Tensor> inverse(const torch::Tensor& z);  // g

  // log p_Y(x) = log N(f(x); 0, I) + log|det df/dx|, per row.
  torch::Tensor log_density(const torch::Tensor& whitened);

  void reset_to_identity();
  const FlowConfig& config() const { return config_; }

 private:
  FlowConfig config_;
  std::vector<CouplingLayer> layers_;
};
TORCH_MODULE(FlowPrior);

// log density of a batch of [B, J, 2] poses: normalize, whiten, evaluate flow.
torch::Tensor log_density(FlowPrior& prior, const PcaSubspace& pca, const torch::Tensor& poses, int root);
double log_density(FlowPrior& prior, const PcaSubspace& pca, const Pose2D& pose, const SkeletonTopology& topology);

// Mean negative log-density of the batch.
torch::Tensor nll_loss(FlowPrior& prior, const PcaSubspace& pca, const torch::Tensor& poses, int root);

struct FlowTrainConfig {
  int epochs = 30;
  int batch_size = 256;
  double learning_rate = 1e-3;
};

// Trains the flow by minimising the NLL of the prior poses ([M, J, 2]).
// Returns the mean training NLL of each epoch. Deterministic given `generator`.
std::vector<double> pretrain_flow(FlowPrior& prior, const PcaSubspace& pca, const torch::Tensor& poses, int root,
                                  const FlowTrainConfig& config, at::Generator generator);

// CRC32 over every parameter and buffer, in registration order.
uint32_t parameter_checksum(const torch::nn::Module& module);

// Pretrained prior as consumed by training: PCA plus flow with parameters frozen.
struct PosePrior {
  std::string topology;
  PcaSubspace pca;
  FlowPrior flow{nullptr};

  void freeze();
};

nlohmann::json pose_prior_to_json(const PosePrior& prior);
PosePrior pose_prior_from_json(const nlohmann::json& j);

void save_pose_prior(const std::filesystem::path& path, const PosePrior& prior);
PosePrior load_pose_prior(const std::filesystem::path& path);

}  // namespace poselift
