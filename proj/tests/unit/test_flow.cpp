#include "testing.hpp"

#include <numbers>

#include <Eigen/Eigenvalues>

#include "helpers.hpp"
#include "poselift/camera.hpp"
#include "poselift/errors.hpp"
#include "poselift/flow.hpp"
#include "poselift/synth.hpp"

using namespace poselift;

namespace {

FlowPrior double_flow(int dims, int layers = 8) {
  FlowPrior f(FlowConfig{dims, layers, 64, 2.0});
  f->to(torch::kFloat64);
  return f;
}

void perturb(FlowPrior& f, uint64_t seed, double scale = 0.3) {
  auto gen = at::detail::createCPUGenerator(seed);
  torch::NoGradGuard ng;
  for (auto& p : f->parameters()) p.add_(torch::randn(p.sizes(), gen, p.options()) * scale);
}

torch::Tensor synthetic_prior_poses(int n, uint64_t seed) {
  Rng rng(seed);
  auto model = humanoid9_model();
  std::vector<Pose2D> out;
  for (int i = 0; i < n; ++i) out.push_back(perspective_project(sample_pose3d(model, rng)));
  return to_tensor(out);
}

// log|det| of a numerically differentiated Jacobian.
double numeric_logdet(FlowPrior& f, const torch::Tensor& x, double h = 1e-5) {
  const auto n = x.size(0);
  Eigen::MatrixXd jac(n, n);
  torch::NoGradGuard ng;
  for (int64_t i = 0; i < n; ++i) {
    auto p = x.clone(), m = x.clone();
    p[i] += h;
    m[i] -= h;
    auto fp = f->forward(p.unsqueeze(0)).first[0];
    auto fm = f->forward(m.unsqueeze(0)).first[0];
    for (int64_t r = 0; r < n; ++r) jac(r, i) = (fp[r].item<double>() - fm[r].item<double>()) / (2 * h);
  }
  return std::log(std::abs(jac.determinant()));
}

}  // namespace

TEST_SUITE("flow") {

TEST_CASE("pca is lossless on data in a low-dimensional affine subspace") {
  Rng rng(1);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd basis(4, 18), coeffs(300, 4);
  for (auto* m : {&basis, &coeffs})
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = n01(rng);
  Eigen::RowVectorXd offset(18);
  for (Eigen::Index i = 0; i < 18; ++i) offset[i] = n01(rng);
  Eigen::MatrixXd data = (coeffs * basis).rowwise() + offset;
  auto pca = pca_fit(data, 4);
  CHECK((pca.basis * pca.basis.transpose() - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-8);
  double worst = 0;
  for (Eigen::Index r = 0; r < data.rows(); ++r) {
    Eigen::VectorXd x = data.row(r).transpose();
    worst = std::max(worst, (pca_reconstruct(pca, pca_project(pca, x)) - x).norm());
  }
  CHECK(worst < 1e-8);
  CHECK_THROWS_AS(pca_fit(data, 5), RankError);
  CHECK_THROWS_AS(pca_fit(data.topRows(3), 4), RankError);
}

TEST_CASE("pca with a full basis reconstructs exactly") {
  Rng rng(2);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd data(200, 18);
  for (Eigen::Index i = 0; i < data.size(); ++i) data.data()[i] = n01(rng);
  auto pca = pca_fit(data, 18);
  for (int r = 0; r < 20; ++r) {
    Eigen::VectorXd x = data.row(r).transpose();
    CHECK((pca_reconstruct(pca, pca_project(pca, x)) - x).norm() < 1e-10);
  }
}

TEST_CASE("reconstruction error equals the discarded eigenvalue mass") {
  Rng rng(3);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd mix(12, 12);
  for (Eigen::Index i = 0; i < mix.size(); ++i) mix.data()[i] = n01(rng);
  Eigen::MatrixXd data(2000, 12);
  for (Eigen::Index i = 0; i < data.size(); ++i) data.data()[i] = n01(rng);
  data = data * mix;
  auto pca = pca_fit(data, 5);
  // independent covariance eigen-solve
  Eigen::MatrixXd centred = data.rowwise() - data.colwise().mean();
  Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(data.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const double discarded = es.eigenvalues().head(7).sum();
  double mse = 0;
  for (Eigen::Index r = 0; r < data.rows(); ++r) {
    Eigen::VectorXd x = data.row(r).transpose();
    mse += (pca_reconstruct(pca, pca_project(pca, x)) - x).squaredNorm();
  }
  mse /= static_cast<double>(data.rows());
  CHECK(std::abs(mse - discarded) < 1e-6);
  CHECK(std::abs(pca.discarded.sum() - discarded) < 1e-6);
  for (int k = 0; k < 5; ++k) CHECK(std::abs(pca.eigenvalues[k] - es.eigenvalues()[11 - k]) < 1e-8);
}

TEST_CASE("identity flow") {
  auto f = double_flow(16);
  auto x = torch::randn({32, 16}, at::detail::createCPUGenerator(4), torch::kFloat64);
  auto [z, ld] = f->forward(x);
  CHECK(torch::equal(z, x));
  CHECK(ld.abs().max().item<double>() == 0.0);
  auto origin = f->log_density(torch::zeros({1, 16}, torch::kFloat64));
  CHECK(std::abs(origin.item<double>() + 8.0 * std::log(2 * std::numbers::pi)) < 1e-12);
  CHECK(std::abs(origin.item<double>() + 14.7031) < 1e-4);

  auto dir = torch::randn({1, 16}, at::detail::createCPUGenerator(5), torch::kFloat64);
  double prev = origin.item<double>();
  for (int k = 1; k < 20; ++k) {
    const double v = f->log_density(dir * (0.25 * k)).item<double>();
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("nll loss of an identity flow") {
  auto poses = synthetic_prior_poses(500, 6);
  std::vector<Pose2D> list = poses2d_from_tensor(normalize_pose2d(poses, 0));
  auto pca = pca_fit(list, 10);
  auto f = double_flow(10);
  // the whitened origin has density N(0; 0, I)
  const double expected = 5.0 * std::log(2 * std::numbers::pi);
  CHECK(std::abs(-f->log_density(torch::zeros({1, 10}, torch::kFloat64)).item<double>() - expected) < 1e-12);
  // otherwise the nll is 0.5 |w|^2 + 5 log(2 pi) of the whitened pose
  auto one = poses.narrow(0, 0, 1);
  auto w = pca_whiten(pca, normalize_pose2d(one, 0).flatten(1));
  const double single = nll_loss(f, pca, one, 0).item<double>();
  CHECK(std::abs(single - (0.5 * w.pow(2).sum().item<double>() + expected)) < 1e-9);
  CHECK(std::abs(nll_loss(f, pca, one.repeat({7, 1, 1}), 0).item<double>() - single) < 1e-12);
}

TEST_CASE("random coupling layers invert and their log-det matches the Jacobian") {
  for (uint64_t seed : {11u, 12u, 13u}) {
    auto f = double_flow(6);
    perturb(f, seed);
    auto x = torch::randn({1024, 6}, at::detail::createCPUGenerator(seed + 100), torch::kFloat64) * 2.0;
    auto [z, ld] = f->forward(x);
    auto [back, ild] = f->inverse(z);
    CHECK((back - x).abs().max().item<double>() < 1e-5);
    CHECK((ld + ild).abs().max().item<double>() < 1e-9);
  }
  auto toy = double_flow(2);
  perturb(toy, 21, 0.5);
  auto xs = torch::randn({10, 2}, at::detail::createCPUGenerator(22), torch::kFloat64);
  for (int i = 0; i < 10; ++i) {
    const double analytic = toy->forward(xs[i].unsqueeze(0)).second.item<double>();
    const double numeric = numeric_logdet(toy, xs[i]);
    CHECK(std::abs(analytic - numeric) / std::max(std::abs(numeric), 1.0) < 1e-4);
  }
}

TEST_CASE("a trained two-dimensional flow integrates to one") {
  torch::manual_seed(0);
  auto f = double_flow(2, 6);
  // Banana-shaped toy with roughly unit spread.
  auto gen = at::detail::createCPUGenerator(31);
  auto a = torch::randn({4096}, gen, torch::kFloat64);
  auto b = 0.6 * (a * a - 1.0) + 0.4 * torch::randn({4096}, gen, torch::kFloat64);
  auto data = torch::stack({a, b}, 1);
  torch::optim::Adam opt(f->parameters(), torch::optim::AdamOptions(2e-3));
  const double start = -f->log_density(data).mean().item<double>();
  for (int step = 0; step < 400; ++step) {
    auto idx = torch::randint(4096, {256}, gen, torch::TensorOptions().dtype(torch::kInt64));
    opt.zero_grad();
    auto loss = -f->log_density(data.index_select(0, idx)).mean();
    loss.backward();
    opt.step();
  }
  torch::NoGradGuard ng;
  const double end = -f->log_density(data).mean().item<double>();
  CHECK(end < start - 0.1);

  const int n = 601;
  auto axis = torch::linspace(-6.0, 6.0, n, torch::kFloat64);
  auto grid = torch::stack(torch::meshgrid({axis, axis}, "ij"), -1).reshape({-1, 2});
  const double h = 12.0 / (n - 1);
  const double mass = torch::exp(f->log_density(grid)).sum().item<double>() * h * h;
  MESSAGE("quadrature mass " << mass);
  CHECK(std::abs(mass - 1.0) < 1e-2);

  auto probe = torch::randn({1024, 2}, gen, torch::kFloat64) * 2;
  auto [z, ld] = f->forward(probe);
  CHECK((f->inverse(z).first - probe).abs().max().item<double>() < 1e-5);
}

TEST_CASE("pretraining lowers held-out NLL and is deterministic") {
  auto poses = synthetic_prior_poses(3000, 41);
  auto held = synthetic_prior_poses(500, 42);
  auto pca = pca_fit(poses2d_from_tensor(normalize_pose2d(poses, 0)), 10);
  FlowTrainConfig tc{15, 64, 1e-3};

  auto run = [&](uint64_t seed) {
    torch::manual_seed(seed);
    FlowPrior f(FlowConfig{10, 8, 64, 2.0});
    auto history = pretrain_flow(f, pca, poses, 0, tc, at::detail::createCPUGenerator(seed));
    return std::make_pair(f, history);
  };
  auto [trained, history] = run(5);
  auto [again, history2] = run(5);
  CHECK(history == history2);
  CHECK(parameter_checksum(*trained) == parameter_checksum(*again));
  CHECK(history.back() < history.front());

  FlowPrior identity(FlowConfig{10, 8, 64, 2.0});
  torch::NoGradGuard ng;
  auto held32 = held.to(torch::kFloat32);
  const double nll_trained = nll_loss(trained, pca, held32, 0).item<double>();
  const double nll_identity = nll_loss(identity, pca, held32, 0).item<double>();
  MESSAGE("held-out NLL trained " << nll_trained << " identity " << nll_identity);
  CHECK(nll_trained < nll_identity);

  // joint-permuted poses are less plausible than genuine ones
  auto perm = torch::tensor({0, 4, 6, 8, 2, 7, 1, 3, 5}, torch::kInt64);
  auto genuine = log_density(trained, pca, held32, 0);
  auto scrambled = log_density(trained, pca, held32.index_select(1, perm), 0);
  CHECK(scrambled.mean().item<double>() < genuine.mean().item<double>());

  auto w = pca_whiten(pca, normalize_pose2d(held32, 0).flatten(1));
  auto [z, ld] = trained->forward(w);
  CHECK((trained->inverse(z).first - w).abs().max().item<double>() < 1e-5);
}

TEST_CASE("prior json roundtrip and freezing") {
  auto poses = synthetic_prior_poses(400, 51);
  PosePrior prior;
  prior.topology = "humanoid-9";
  prior.pca = pca_fit(poses2d_from_tensor(normalize_pose2d(poses, 0)), 10);
  prior.flow = FlowPrior(FlowConfig{10, 4, 32, 2.0});
  perturb(prior.flow, 52, 0.1);
  prior.freeze();
  for (const auto& p : prior.flow->parameters()) CHECK_FALSE(p.requires_grad());
  auto back = pose_prior_from_json(pose_prior_to_json(prior));
  CHECK(parameter_checksum(*back.flow) == parameter_checksum(*prior.flow));
  CHECK((back.pca.basis - prior.pca.basis).norm() == 0.0);
  auto sample = poses.narrow(0, 0, 8).to(torch::kFloat32);
  CHECK(torch::equal(log_density(back.flow, back.pca, sample, 0), log_density(prior.flow, prior.pca, sample, 0)));
}

}  // TEST_SUITE
