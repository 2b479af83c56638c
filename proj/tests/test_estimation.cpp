#include <catch_amalgamated.hpp>

#include <Eigen/Eigenvalues>

#include <random>

#include "lcv/estimation.hpp"
#include "support.hpp"

using namespace lcv;
using Catch::Matchers::WithinAbs;

namespace {

CameraModel camera(std::size_t first, std::size_t lambda)
{
  CameraModel c;
  c.first_volume = first;
  c.lambda = lambda;
  c.image_width = 100.0 * static_cast<double>(lambda);
  c.image_height = 50.0;
  return c;
}

Detection box(std::size_t material, double x0, double x1, double y0 = 10.0, double y1 = 20.0)
{
  return {0, material, {x0, y0, x1, y1}};
}

bool healthy(const Matrix& P)
{
  if ((P - P.transpose()).lpNorm<Eigen::Infinity>() > 1e-9) { return false; }
  Eigen::SelfAdjointEigenSolver<Matrix> es(P);
  return es.eigenvalues().minCoeff() >= -1e-8;
}

}  // namespace

TEST_CASE("binning of single boxes", "[estimation][binning]")
{
  const auto cfg = test::line(6, 2);
  const auto cam = camera(1, 3);

  auto z = bin_detections({box(0, 110, 190)}, cam, cfg).z;
  CHECK(z.size() == 6);
  CHECK(z[1] == 1.0);
  CHECK(z.sum() == 1.0);

  z = bin_detections({box(1, 60, 160)}, cam, cfg).z;
  CHECK_THAT(z[3], WithinAbs(0.4, 1e-12));
  CHECK_THAT(z[4], WithinAbs(0.6, 1e-12));

  z = bin_detections({box(0, 120, 140), box(0, 150, 180)}, cam, cfg).z;
  CHECK(z[1] == 2.0);
}

TEST_CASE("boxes outside the viewport contribute nothing", "[estimation][binning]")
{
  const auto cfg = test::line(6, 1);
  const auto cam = camera(0, 3);
  CHECK(bin_detections({box(0, 400, 450)}, cam, cfg).z.sum() == 0.0);
  CHECK(bin_detections({box(0, 10, 20, 60, 80)}, cam, cfg).z.sum() == 0.0);
  CHECK_THAT(bin_detections({box(0, 280, 320)}, cam, cfg).z.sum(), WithinAbs(0.5, 1e-12));
  CHECK_THROWS_AS(bin_detections({box(1, 10, 20)}, cam, cfg), ContractViolation);
  CHECK_THROWS_AS(bin_detections({box(0, 20, 10)}, cam, cfg), ContractViolation);
}

TEST_CASE("binning conserves one unit per contained box", "[estimation][binning][property]")
{
  const auto cfg = test::line(10, 2);
  const auto cam = camera(2, 7);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int k = 0; k < 2000; ++k) {
    const double w = 1.0 + U(rng) * 300.0;
    const double x0 = U(rng) * (cam.image_width - w);
    const double h = 1.0 + U(rng) * 40.0;
    const double y0 = U(rng) * (cam.image_height - h);
    const auto z = bin_detections({box(k % 2, x0, x0 + w, y0, y0 + h)}, cam, cfg).z;
    REQUIRE_THAT(z.sum(), WithinAbs(1.0, 1e-12));
    REQUIRE(z.minCoeff() >= 0.0);
  }
}

TEST_CASE("observation matrix", "[estimation][observation]")
{
  auto cfg = test::line(4, 1);
  Matrix H = observation_matrix(camera(0, 4), cfg);
  CHECK(H.leftCols(4) == Matrix::Identity(4, 4));
  CHECK(H.col(4).isZero());

  cfg = test::line(5, 3);
  H = observation_matrix(camera(2, 1), cfg);
  CHECK(H.rows() == 3);
  for (Eigen::Index r = 0; r < 3; ++r) {
    CHECK(H.row(r).sum() == 1.0);
    CHECK(H(r, r * 5 + 2) == 1.0);
  }

  std::mt19937_64 rng(1);
  const auto x = test::random_state(cfg, rng);
  const auto cam = camera(1, 3);
  const Vector z = observation_matrix(cam, cfg) * x.data();
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) { CHECK(z[static_cast<Eigen::Index>(i * 3 + j)] == x.mass(i, 1 + j)); }
  }
}

TEST_CASE("prediction", "[estimation][predict]")
{
  SECTION("noiseless covariance propagation")
  {
    std::mt19937_64 rng(11);
    for (int k = 0; k < 20; ++k) {
      const auto cfg = test::random_system(rng);
      FilterState f{test::random_state(cfg, rng), test::random_spd(static_cast<Eigen::Index>(cfg.state_size()), rng)};
      const NoiseConfig q0{0.0, 0.0, 1.0};
      const auto out = predict(f, 0.0, std::vector<double>(cfg.n, 0.0), cfg, q0);
      const Matrix A = TransitionOperator(f.mean, cfg).matrix();
      REQUIRE((out.cov - A * f.cov * A.transpose()).lpNorm<Eigen::Infinity>() <= 1e-9);
      REQUIRE(out.mean.data() == step(f.mean, 0.0, cfg, std::vector<double>(cfg.n, 0.0)).next.data());
    }
  }
  SECTION("empty belt with zero speed change grows by Q")
  {
    auto cfg = test::line(3, 1);
    cfg.r_min = 0.0;
    FilterState f{StateVector::empty(cfg, 0.0), Matrix::Zero(4, 4)};
    const NoiseConfig q{0.1, 0.01, 1.0};
    const auto out = predict(f, 0.0, std::vector<double>{0.0}, cfg, q);
    CHECK(out.mean.data().isZero());
    CHECK(out.cov.diagonal().head(3) == Vector::Constant(3, 0.1));
    CHECK(out.cov(3, 3) == 0.01);
  }
  SECTION("unit shift of an identity covariance")
  {
    const auto cfg = test::line(3, 1);
    FilterState f{StateVector::empty(cfg, 1.0), Matrix::Identity(4, 4)};
    const NoiseConfig q{0.5, 0.0, 1.0};
    const auto out = predict(f, 0.0, std::vector<double>{0.0}, cfg, q);
    Matrix expect = Matrix::Zero(4, 4);
    expect(1, 1) = 1.0;
    expect(2, 2) = 1.0;
    expect(3, 3) = 1.0;
    expect.diagonal().head(3).array() += 0.5;
    CHECK(out.cov == expect);
  }
}

TEST_CASE("update", "[estimation][update]")
{
  SECTION("scalar closed form")
  {
    auto cfg = test::line(1, 1);
    FilterState f{StateVector::empty(cfg, 1.0), Matrix::Identity(2, 2)};
    f.cov(1, 1) = 0.0;
    const NoiseConfig noise{0.0, 0.0, 1.0};
    Vector z(1);
    z << 4.0;
    const auto out = update(f, {z}, camera(0, 1), cfg, noise);
    CHECK_THAT(out.mean.mass(0, 0), WithinAbs(2.0, 1e-12));
    CHECK_THAT(out.cov(0, 0), WithinAbs(0.5, 1e-12));
  }
  SECTION("zero innovation leaves the mean and shrinks measured variances")
  {
    std::mt19937_64 rng(5);
    const auto cfg = test::line(6, 2);
    const auto cam = camera(1, 3);
    FilterState f{test::random_state(cfg, rng), test::random_spd(13, rng)};
    const Vector z = observation_matrix(cam, cfg) * f.mean.data();
    const auto out = update(f, {z}, cam, cfg, NoiseConfig{});
    CHECK((out.mean.data() - f.mean.data()).lpNorm<Eigen::Infinity>() <= 1e-12);
    for (auto idx : detail::observed_indices(cam, cfg)) { CHECK(out.cov(idx, idx) < f.cov(idx, idx)); }
    CHECK(healthy(out.cov));
  }
  SECTION("uninformative measurement")
  {
    std::mt19937_64 rng(6);
    const auto cfg = test::line(6, 2);
    const auto cam = camera(0, 4);
    FilterState f{test::random_state(cfg, rng), test::random_spd(13, rng)};
    const Vector z = Vector::Constant(8, 100.0);
    const auto out = update(f, {z}, cam, cfg, NoiseConfig{0.0, 0.0, 1e12});
    CHECK((out.mean.data() - f.mean.data()).lpNorm<Eigen::Infinity>() <= 1e-6);
  }
  SECTION("singular innovation covariance is regularized")
  {
    const auto cfg = test::line(3, 1);
    FilterState f{StateVector::empty(cfg, 1.0), Matrix::Zero(4, 4)};
    const auto out = update(f, {Vector::Constant(3, 1.0)}, camera(0, 3), cfg, NoiseConfig{0.0, 0.0, 0.0});
    CHECK(out.mean.data().allFinite());
    CHECK(out.cov.allFinite());
  }
  SECTION("negative masses are clamped")
  {
    const auto cfg = test::line(3, 1);
    FilterState f{StateVector::empty(cfg, 1.0), Matrix::Identity(4, 4)};
    f.cov(0, 1) = f.cov(1, 0) = 0.9;
    Vector z(1);
    z << -5.0;
    CameraModel cam = camera(0, 1);
    const auto out = update(f, {z}, cam, cfg, NoiseConfig{0.0, 0.0, 0.1});
    CHECK(out.mean.mass(0, 0) == 0.0);
    CHECK(out.mean.mass(0, 1) == 0.0);
    CHECK(healthy(out.cov));
  }
  SECTION("length mismatch")
  {
    const auto cfg = test::line(3, 1);
    FilterState f{StateVector::empty(cfg, 1.0), Matrix::Identity(4, 4)};
    CHECK_THROWS_AS(update(f, {Vector::Zero(2)}, camera(0, 1), cfg, NoiseConfig{}), ContractViolation);
  }
}

TEST_CASE("replay without detections is an open-loop rollout", "[estimation][filter]")
{
  auto cfg = test::line(6, 2);
  cfg.r_min = 1.0;
  cfg.r_max = 3.0;
  cfg.stations = {{0, {3, 4}, 0.5}};
  std::vector<double> u{0.5, 0.5, -0.25, 0.0, 1.0};
  std::vector<std::vector<double>> inf(u.size(), {1.0, 0.5});
  const FilterState init{StateVector::empty(cfg, 1.0), Matrix::Identity(13, 13)};
  const auto states = run_filter(init, {}, u, inf, cfg, camera(0, 2), NoiseConfig{});
  REQUIRE(states.size() == u.size() + 1);
  StateVector x = init.mean;
  for (std::size_t k = 0; k < u.size(); ++k) {
    x = step(x, u[k], cfg, inf[k]).next;
    REQUIRE(states[k + 1].mean.data() == x.data());
  }
  CHECK_THROWS_AS(run_filter(init, {}, u, {}, cfg, camera(0, 2), NoiseConfig{}), ContractViolation);
}

TEST_CASE("alternate-frame dropout alternates the visible covariance", "[estimation][filter]")
{
  // Stationary belt: prediction only adds Q, so the alternation is strict.
  auto cfg = test::line(8, 1);
  cfg.r_min = 0.0;
  cfg.r_max = 0.0;
  const auto cam = camera(0, 3);
  const std::size_t K = 12;
  std::vector<double> u(K, 0.0);
  std::vector<std::vector<double>> inf(K, {1.0});
  DetectionFrames frames;
  for (std::size_t k = 2; k <= K; k += 2) {
    for (int q = 0; q < 2; ++q) { frames[k].push_back({k, 0, {10.0 + 100.0 * q, 5.0, 60.0 + 100.0 * q, 15.0}}); }
  }
  const FilterState init{StateVector::empty(cfg, 0.0), Matrix::Identity(9, 9)};
  const auto states = run_filter(init, frames, u, inf, cfg, cam, NoiseConfig{});
  auto visible = [&](const Matrix& P) { return P.block(0, 0, 3, 3).trace(); };
  for (std::size_t k = 2; k + 1 <= K; k += 2) {
    CHECK(visible(states[k + 1].cov) > visible(states[k].cov));
    if (k + 2 <= K) { CHECK(visible(states[k + 2].cov) < visible(states[k + 1].cov)); }
  }
}

TEST_CASE("zero-noise filter converges to the truth", "[estimation][filter][property]")
{
  auto cfg = test::line(12, 2);
  cfg.r_min = 1.0;
  cfg.r_max = 2.0;
  cfg.u_min = -0.5;
  cfg.u_max = 0.5;
  cfg.stations = {{0, {7, 8}, 0.8}, {1, {9}, 0.6}};
  const auto cam = camera(0, 3);
  const NoiseConfig noise{0.0, 0.0, 1e-12};
  const Matrix H = observation_matrix(cam, cfg);

  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  StateVector truth = StateVector::empty(cfg, 1.5);
  FilterState f{StateVector::empty(cfg, 1.5), initial_covariance(cfg, 1.0)};
  for (std::size_t k = 0; k < 3 * cfg.m; ++k) {
    const double u = (U(rng) - 0.5);
    const std::vector<double> inf{2.0 * U(rng), 1.5 * U(rng)};
    truth = step(truth, u, cfg, inf).next;
    f = predict(f, u, inf, cfg, noise);
    const Vector z = H * truth.data();
    f = update(f, {z}, cam, cfg, noise);
    REQUIRE(healthy(f.cov));
    if (k >= cfg.m) { REQUIRE((f.mean.data() - truth.data()).lpNorm<Eigen::Infinity>() <= 1e-6); }
  }
}
