#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <ATen/core/Generator.h>
#include <torch/optim/adam.h>

#include "poselift/evaluation.hpp"
#include "poselift/flow.hpp"
#include "poselift/losses.hpp"
#include "poselift/networks.hpp"
#include "poselift/renderer.hpp"
#include "poselift/synth.hpp"

namespace poselift {

struct TrainConfig {
  uint64_t seed = 0;
  int steps = 5000;
  int batch_size = 64;
  double lr_generator = 2e-4;
  double lr_discriminator = 1e-4;
  double adam_beta1 = 0.5;
  LossWeights weights;       // reference bone lengths are filled from the prior split when empty
  bool logit_adversarial = true;
  double d_noise = 0.3;            // std of Gaussian noise on D's inputs, decays linearly to 0 at `steps`
  double cycle_grad_scale = 0.0;   // fraction of the lifting-cycle gradient passed back into Omega and Phi
  double view_azimuth = 3.141592653589793;  // cycle azimuths are uniform on [-view_azimuth, view_azimuth]
  bool elevation_from_prior_only = true;
  double frame_scale = kDefaultFrameScale;
  double lift_scale = 0.1;   // 2D poses enter the cycle at this tangent-plane size
  NetworkSpec network;
  int log_every = 10;
  int eval_every = 250;
  int eval_samples = 500;
  int checkpoint_every = 1000;
  bool select_best = true;

  // Unknown keys raise ConfigError.
  static TrainConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;
};

struct TrainState {
  TrainConfig config;
  SkeletonTopology topology;
  RendererConfig renderer;
  PosePrior prior;
  Phi phi{nullptr};
  Omega omega{nullptr};
  Lambda lambda{nullptr};
  Discriminator disc{nullptr};
  std::unique_ptr<torch::optim::Adam> generator_optimizer;
  std::unique_ptr<torch::optim::Adam> discriminator_optimizer;
  int64_t step = 0;
  at::Generator generator;

  std::vector<torch::Tensor> generator_parameters() const;
};

// Fresh networks initialised from config.seed; the prior is frozen.
TrainState make_train_state(const TrainConfig& config, const SkeletonTopology& topology, PosePrior prior,
                            const RendererConfig& renderer = {});

// One discriminator update followed by one generator update.
// images: [B, H, W] uint8 or [0, 1] reals; prior_poses: [B, J, 2] raw 2D poses.
LossBreakdown train_step(TrainState& state, const torch::Tensor& images, const torch::Tensor& prior_poses);

struct Prediction {
  torch::Tensor skeletons;  // [B, H, W]
  torch::Tensor poses2d;    // [B, J, 2] renderer frame
  torch::Tensor poses3d;    // [B, J, 3]
};

// Test-time pipeline: image -> skeleton -> 2D joints -> lifted 3D pose.
Prediction predict(TrainState& state, const torch::Tensor& images);

// Predicts every sample (up to `limit` when positive) and scores against its 3D target.
EvalReport evaluate_state(TrainState& state, const LabeledSamples& samples, int limit = 0,
                          const EvalOptions& options = {});

struct FitData {
  const UnlabeledImages* train = nullptr;
  const PriorPoses* prior = nullptr;
  const LabeledSamples* validation = nullptr;  // optional
};

struct FitResult {
  std::vector<nlohmann::json> metrics;
  int64_t best_step = -1;
  double best_val_p_mpjpe = 0.0;
};

// Runs train_step until state.step == config.steps. With `out_dir` set, the
// metrics log (metrics.jsonl, appended) and checkpoints go there. With
// select_best and a validation set, the returned state is the best one seen.
FitResult fit(TrainState& state, const FitData& data, const std::optional<std::filesystem::path>& out_dir = {});

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, TrainState& state);
// VersionError names both topologies when `expected_topology` differs from
// the stored one; CorruptCheckpointError on size or checksum mismatch.
TrainState load_checkpoint(const std::filesystem::path& path,
                           const std::optional<std::string>& expected_topology = {});

// Optimizer state is not included; used for in-memory best-state snapshots.
std::string serialize_networks(TrainState& state);
void deserialize_networks(TrainState& state, const std::string& bytes);

}  // namespace poselift
