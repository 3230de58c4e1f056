#include "testing.hpp"

#include "helpers.hpp"
#include "poselift/errors.hpp"
#include "poselift/networks.hpp"

using namespace poselift;

namespace {

void scramble(torch::nn::Module& m, uint64_t seed, double scale) {
  auto gen = at::detail::createCPUGenerator(seed);
  torch::NoGradGuard ng;
  for (auto& p : m.parameters()) p.copy_(torch::randn(p.sizes(), gen, p.options()) * scale);
}

}  // namespace

TEST_SUITE("networks") {

TEST_CASE("spec validation") {
  NetworkSpec s;
  CHECK_NOTHROW(s.validate());
  s.image_size = 40;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = {};
  s.joints = 1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("phi maps 64x64 images to 64x64 skeletons in [0, 1] for any parameters") {
  torch::manual_seed(1);
  Phi phi(NetworkSpec{});
  auto x = torch::rand({3, 64, 64});
  for (double scale : {0.0, 0.1, 3.0}) {
    if (scale > 0) scramble(*phi, 10 + static_cast<uint64_t>(scale * 10), scale);
    auto s = phi(x);
    CHECK(s.sizes() == torch::IntArrayRef({3, 64, 64}));
    CHECK((s >= 0).all().item<bool>());
    CHECK((s <= 1).all().item<bool>());
  }
  CHECK(phi(torch::rand({2, 1, 64, 64})).sizes() == torch::IntArrayRef({2, 64, 64}));
  CHECK_THROWS_AS(phi(torch::rand({2, 32, 32})), ShapeMismatchError);
}

TEST_CASE("omega regresses 2J coordinates in [-1, 1]") {
  torch::manual_seed(2);
  NetworkSpec spec;
  spec.joints = 17;
  Omega omega(spec);
  auto s = torch::rand({4, 64, 64});
  CHECK(omega(s).sizes() == torch::IntArrayRef({4, 17, 2}));
  scramble(*omega, 3, 1.0);
  auto y = omega(s);
  CHECK((y.abs() <= 1).all().item<bool>());
  CHECK_THROWS_AS(omega(torch::rand({4, 3, 64, 64})), ShapeMismatchError);
}

TEST_CASE("lambda gives one depth per joint and an elevation") {
  torch::manual_seed(3);
  NetworkSpec spec;
  spec.joints = 17;
  Lambda lambda(spec, 0);
  auto y = testutil::random_poses(5, 17, 4, 0.1).to(torch::kFloat32);
  auto out = lambda(y);
  CHECK(out.depth_offsets.sizes() == torch::IntArrayRef({5, 17}));
  CHECK(out.elevation.sizes() == torch::IntArrayRef({5}));
  CHECK(out.depth_offsets.size(1) + 1 == 18);
  CHECK((out.elevation.abs() < 1.5708).all().item<bool>());
  CHECK_THROWS_AS(lambda(torch::rand({5, 9, 2})), ShapeMismatchError);
  CHECK_THROWS_AS(Lambda(spec, 17), JointIndexError);

  // depths scale with the input and ignore translation
  auto shifted = lambda(y * 2.0 + 0.3);
  CHECK(torch::allclose(shifted.depth_offsets, out.depth_offsets * 2.0, 1e-4, 1e-5));
  CHECK(torch::allclose(shifted.elevation, out.elevation, 1e-4, 1e-5));
}

TEST_CASE("discriminator probabilities stay strictly inside (0, 1)") {
  torch::manual_seed(4);
  Discriminator d(NetworkSpec{});
  auto imgs = torch::rand({1000, 64, 64});
  torch::NoGradGuard ng;
  auto p = d->probability(imgs);
  CHECK(p.sizes() == torch::IntArrayRef({1000}));
  CHECK((p > 0).all().item<bool>());
  CHECK((p < 1).all().item<bool>());
  scramble(*d, 5, 2.0);
  auto q = d->probability(imgs * 100.0);
  CHECK((q > 0).all().item<bool>());
  CHECK((q < 1).all().item<bool>());
  CHECK_THROWS_AS(d(torch::rand({2, 48, 48})), ShapeMismatchError);
}

}  // TEST_SUITE
