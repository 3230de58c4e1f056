#include "poselift/flow.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include <Eigen/Eigenvalues>
#include <json.hpp>
#include <torch/torch.h>
#include <zlib.h>

#include "poselift/errors.hpp"

namespace poselift {

using nlohmann::json;

namespace {

torch::Tensor eigen_to_tensor(const Eigen::MatrixXd& m, const torch::TensorOptions& opts) {
  // Eigen is column-major; go through a row-major copy.
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  return torch::from_blob(rm.data(), {rm.rows(), rm.cols()}, torch::kFloat64).clone().to(opts);
}

torch::nn::Sequential make_subnet(int dims, int hidden) {
  return torch::nn::Sequential(torch::nn::Linear(dims, hidden), torch::nn::Tanh(), torch::nn::Linear(hidden, hidden),
                               torch::nn::Tanh(), torch::nn::Linear(hidden, dims));
}

void zero_last_linear(torch::nn::Sequential& net) {
  torch::NoGradGuard guard;
  auto last = net->ptr(net->size() - 1)->as<torch::nn::Linear>();
  last->weight.zero_();
  last->bias.zero_();
}

}  // namespace

PcaSubspace pca_fit(const Eigen::MatrixXd& data, int n_pca) {
  const auto M = data.rows();
  const auto D = data.cols();
  if (n_pca <= 0 || n_pca > D) throw RankError("PCA dimension " + std::to_string(n_pca) + " outside [1, " + std::to_string(D) + "]");
  if (M < n_pca) throw RankError("need at least " + std::to_string(n_pca) + " samples, got " + std::to_string(M));

  PcaSubspace pca;
  pca.mean = data.colwise().mean().transpose();
  const Eigen::MatrixXd centred = data.rowwise() - pca.mean.transpose();
  const Eigen::MatrixXd cov = (centred.transpose() * centred) / static_cast<double>(M);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw RankError("eigendecomposition failed");

  // Ascending order from Eigen; reverse to descending.
  const Eigen::VectorXd values = solver.eigenvalues().reverse();
  const Eigen::MatrixXd vectors = solver.eigenvectors().rowwise().reverse();
  const double largest = std::max(values(0), 0.0);
  if (!(values(n_pca - 1) > 1e-12 * std::max(largest, 1e-300)))
    throw RankError("only " + std::to_string((values.array() > 1e-12 * largest).count()) +
                    " directions carry variance, " + std::to_string(n_pca) + " requested");

  pca.basis.resize(n_pca, D);
  for (int k = 0; k < n_pca; ++k) {
    Eigen::VectorXd v = vectors.col(k);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;  // deterministic sign
    pca.basis.row(k) = v.transpose();
  }
  pca.eigenvalues = values.head(n_pca);
  pca.discarded = values.tail(D - n_pca).cwiseMax(0.0);
  return pca;
}

PcaSubspace pca_fit(std::span<const Pose2D> poses, int n_pca) {
  if (poses.empty()) throw RankError("no poses to fit");
  const int J = poses.front().joint_count();
  Eigen::MatrixXd data(static_cast<Eigen::Index>(poses.size()), 2 * J);
  for (size_t i = 0; i < poses.size(); ++i) {
    if (poses[i].joint_count() != J) throw ShapeMismatchError("ragged pose set");
    for (int j = 0; j < J; ++j) data.row(static_cast<Eigen::Index>(i)).segment<2>(2 * j) = poses[i].joints[j].transpose();
  }
  return pca_fit(data, n_pca);
}

Eigen::VectorXd pca_project(const PcaSubspace& pca, const Eigen::VectorXd& x) { return pca.basis * (x - pca.mean); }

Eigen::VectorXd pca_reconstruct(const PcaSubspace& pca, const Eigen::VectorXd& coeffs) {
  return pca.mean + pca.basis.transpose() * coeffs;
}

torch::Tensor pca_whiten(const PcaSubspace& pca, const torch::Tensor& flat_poses) {
  if (flat_poses.dim() != 2 || flat_poses.size(1) != pca.input_dims())
    throw ShapeMismatchError("pca_whiten expects [B, " + std::to_string(pca.input_dims()) + "]");
  const auto opts = flat_poses.options().requires_grad(false);
  auto mean = eigen_to_tensor(pca.mean.transpose(), opts);
  auto basis = eigen_to_tensor(pca.basis, opts);
  auto inv_sd = eigen_to_tensor(pca.eigenvalues.cwiseSqrt().cwiseInverse().transpose(), opts);
  return torch::matmul(flat_poses - mean, basis.t()) * inv_sd;
}

CouplingLayerImpl::CouplingLayerImpl(int dims, int hidden, torch::Tensor mask, double scale_bound)
    : scale_bound_(scale_bound) {
  mask_ = register_buffer("mask", std::move(mask));
  scale_net_ = register_module("scale", make_subnet(dims, hidden));
  shift_net_ = register_module("shift", make_subnet(dims, hidden));
}

std::pair<torch::Tensor, torch::Tensor> CouplingLayerImpl::scale_shift(const torch::Tensor& conditioner) {
  auto free = 1.0 - mask_;
  auto s = scale_bound_ * torch::tanh(scale_net_->forward(conditioner)) * free;
  auto t = shift_net_->forward(conditioner) * free;
  return {s, t};
}

std::pair<torch::Tensor, torch::Tensor> CouplingLayerImpl::forward(const torch::Tensor& x) {
  auto kept = x * mask_;
  auto [s, t] = scale_shift(kept);
  auto y = kept + (1.0 - mask_) * (x * torch::exp(s) + t);
  return {y, s.sum(-1)};
}

std::pair<torch::Tensor, torch::Tensor> CouplingLayerImpl::inverse(const torch::Tensor& y) {
  auto kept = y * mask_;
  auto [s, t] = scale_shift(kept);
  auto x = kept + (1.0 - mask_) * ((y - t) * torch::exp(-s));
  return {x, -s.sum(-1)};
}

void CouplingLayerImpl::reset_to_identity() {
  zero_last_linear(scale_net_);
  zero_last_linear(shift_net_);
}

FlowPriorImpl::FlowPriorImpl(FlowConfig config) : config_(config) {
  if (config_.dims < 2) throw ConfigError("flow needs at least two dimensions");
  for (int k = 0; k < config_.layers; ++k) {
    auto mask = torch::zeros({config_.dims});
    const int half = config_.dims / 2;
    if (k % 2 == 0)
      mask.narrow(0, 0, half).fill_(1.0);
    else
      mask.narrow(0, half, config_.dims - half).fill_(1.0);
    layers_.push_back(register_module("coupling" + std::to_string(k),
                                      CouplingLayer(config_.dims, config_.hidden, mask, config_.scale_bound)));
  }
  reset_to_identity();
}

std::pair<torch::Tensor, torch::Tensor> FlowPriorImpl::forward(const torch::Tensor& x) {
  auto h = x;
  auto logdet = torch::zeros({x.size(0)}, x.options());
  for (auto& layer : layers_) {
    auto [next, ld] = layer->forward(h);
    h = next;
    logdet = logdet + ld;
  }
  return {h, logdet};
}

std::pair<torch::Tensor, torch::Tensor> FlowPriorImpl::inverse(const torch::Tensor& z) {
  auto h = z;
  auto logdet = torch::zeros({z.size(0)}, z.options());
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    auto [next, ld] = (*it)->inverse(h);
    h = next;
    logdet = logdet + ld;
  }
  return {h, logdet};
}

torch::Tensor FlowPriorImpl::log_density(const torch::Tensor& whitened) {
  auto [z, logdet] = forward(whitened);
  const double log_norm = 0.5 * config_.dims * std::log(2.0 * std::numbers::pi);
  return -0.5 * z.pow(2).sum(-1) - log_norm + logdet;
}

void FlowPriorImpl::reset_to_identity() {
  for (auto& layer : layers_) layer->reset_to_identity();
}

torch::Tensor log_density(FlowPrior& prior, const PcaSubspace& pca, const torch::Tensor& poses, int root) {
  auto flat = normalize_pose2d(poses, root).flatten(1);
  return prior->log_density(pca_whiten(pca, flat));
}

double log_density(FlowPrior& prior, const PcaSubspace& pca, const Pose2D& pose, const SkeletonTopology& topology) {
  const auto normalized = normalize_pose2d(pose, topology);
  const auto dtype = prior->parameters().front().scalar_type();
  auto t = to_tensor(std::span<const Pose2D>(&normalized, 1), dtype);
  torch::NoGradGuard guard;
  return log_density(prior, pca, t, topology.root()).item<double>();
}

torch::Tensor nll_loss(FlowPrior& prior, const PcaSubspace& pca, const torch::Tensor& poses, int root) {
  return -log_density(prior, pca, poses, root).mean();
}

std::vector<double> pretrain_flow(FlowPrior& prior, const PcaSubspace& pca, const torch::Tensor& poses, int root,
                                  const FlowTrainConfig& config, at::Generator generator) {
  if (poses.size(0) == 0) throw DatasetEmptyError("no prior poses to train the flow on");
  const auto dtype = prior->parameters().front().scalar_type();
  auto whitened = pca_whiten(pca, normalize_pose2d(poses.to(dtype), root).flatten(1)).detach();
  const int64_t M = whitened.size(0);

  prior->train();
  torch::optim::Adam optimizer(prior->parameters(), torch::optim::AdamOptions(config.learning_rate));
  std::vector<double> history;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    auto order = torch::randperm(M, generator, torch::TensorOptions().dtype(torch::kInt64));
    double total = 0.0;
    for (int64_t start = 0; start < M; start += config.batch_size) {
      auto idx = order.narrow(0, start, std::min<int64_t>(config.batch_size, M - start));
      auto batch = whitened.index_select(0, idx);
      optimizer.zero_grad();
      auto loss = -prior->log_density(batch).mean();
      loss.backward();
      optimizer.step();
      total += loss.item<double>() * static_cast<double>(idx.size(0));
    }
    history.push_back(total / static_cast<double>(M));
  }
  prior->eval();
  return history;
}

uint32_t parameter_checksum(const torch::nn::Module& module) {
  uLong crc = crc32(0L, Z_NULL, 0);
  auto feed = [&](const torch::Tensor& t) {
    auto c = t.detach().contiguous().cpu();
    crc = crc32(crc, static_cast<const Bytef*>(c.data_ptr()), static_cast<uInt>(c.nbytes()));
  };
  for (const auto& p : module.parameters()) feed(p);
  for (const auto& b : module.buffers()) feed(b);
  return static_cast<uint32_t>(crc);
}

void PosePrior::freeze() {
  for (auto& p : flow->parameters()) p.set_requires_grad(false);
  flow->eval();
}

namespace {

json eigen_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(m.cols());
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[c] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

Eigen::MatrixXd json_eigen(const json& rows) {
  const auto R = static_cast<Eigen::Index>(rows.size());
  const auto C = R ? static_cast<Eigen::Index>(rows.at(0).size()) : 0;
  Eigen::MatrixXd m(R, C);
  for (Eigen::Index r = 0; r < R; ++r) {
    if (static_cast<Eigen::Index>(rows.at(r).size()) != C) throw FormatError("ragged matrix in prior checkpoint");
    for (Eigen::Index c = 0; c < C; ++c) m(r, c) = rows.at(r).at(c).get<double>();
  }
  return m;
}

constexpr int kPriorFormatVersion = 1;

}  // namespace

json pose_prior_to_json(const PosePrior& prior) {
  const auto& cfg = prior.flow->config();
  json params = json::object();
  for (const auto& item : prior.flow->named_parameters()) {
    auto t = item.value().detach().to(torch::kFloat64).contiguous();
    params[item.key()] = {{"shape", t.sizes().vec()},
                          {"data", std::vector<double>(t.data_ptr<double>(), t.data_ptr<double>() + t.numel())}};
  }
  return {{"format", "poselift-pose-prior"},
          {"version", kPriorFormatVersion},
          {"topology", prior.topology},
          {"pca",
           {{"mean", eigen_json(prior.pca.mean.transpose())},
            {"basis", eigen_json(prior.pca.basis)},
            {"eigenvalues", eigen_json(prior.pca.eigenvalues.transpose())},
            {"discarded", eigen_json(prior.pca.discarded.transpose())}}},
          {"flow",
           {{"dims", cfg.dims},
            {"layers", cfg.layers},
            {"hidden", cfg.hidden},
            {"scale_bound", cfg.scale_bound},
            {"parameters", params}}}};
}

PosePrior pose_prior_from_json(const json& j) {
  if (j.value("format", "") != "poselift-pose-prior") throw FormatError("not a pose prior");
  if (j.value("version", 0) != kPriorFormatVersion)
    throw VersionError("prior format version " + std::to_string(j.value("version", 0)) + ", expected " +
                       std::to_string(kPriorFormatVersion));
  try {
    PosePrior prior;
    prior.topology = j.at("topology").get<std::string>();
    const auto& p = j.at("pca");
    prior.pca.mean = json_eigen(p.at("mean")).row(0).transpose();
    prior.pca.basis = json_eigen(p.at("basis"));
    prior.pca.eigenvalues = json_eigen(p.at("eigenvalues")).row(0).transpose();
    const auto disc = json_eigen(p.at("discarded"));
    prior.pca.discarded = disc.rows() ? Eigen::VectorXd(disc.row(0).transpose()) : Eigen::VectorXd();

    const auto& f = j.at("flow");
    FlowConfig cfg{f.at("dims").get<int>(), f.at("layers").get<int>(), f.at("hidden").get<int>(),
                   f.at("scale_bound").get<double>()};
    prior.flow = FlowPrior(cfg);
    torch::NoGradGuard guard;
    const auto& params = f.at("parameters");
    for (auto& item : prior.flow->named_parameters()) {
      const auto& entry = params.at(item.key());
      auto shape = entry.at("shape").get<std::vector<int64_t>>();
      auto data = entry.at("data").get<std::vector<double>>();
      auto t = torch::tensor(data, torch::kFloat64).view(shape);
      if (t.sizes() != item.value().sizes()) throw FormatError("parameter " + item.key() + " has the wrong shape");
      item.value().copy_(t);
    }
    prior.freeze();
    return prior;
  } catch (const json::exception& e) {
    throw CorruptCheckpointError(std::string("pose prior: ") + e.what());
  }
}

void save_pose_prior(const std::filesystem::path& path, const PosePrior& prior) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << pose_prior_to_json(prior).dump() << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

PosePrior load_pose_prior(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw CorruptCheckpointError(path.string() + ": " + e.what());
  }
  return pose_prior_from_json(j);
}

}  // namespace poselift
