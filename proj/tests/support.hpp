#pragma once

// Fixtures shared by the unit tests.

#include <random>

#include "lcv/core.hpp"

namespace lcv::test {

/// Belt of m volumes, n materials, no stations, speeds in [1, m].
inline SystemConfig line(std::size_t m, std::size_t n)
{
  SystemConfig c;
  c.m = m;
  c.n = n;
  for (std::size_t i = 0; i < n; ++i) { c.materials.push_back({i, "mat" + std::to_string(i), 1.0 + static_cast<double>(i)}); }
  c.r_min = 1.0;
  c.r_max = static_cast<double>(m);
  c.u_min = -1.0;
  c.u_max = 1.0;
  return c;
}

/// Random small system: m in [1,8], n in [1,3], a contiguous station per material (sometimes none).
inline SystemConfig random_system(std::mt19937_64& rng)
{
  std::uniform_int_distribution<std::size_t> M(1, 8), N(1, 3);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  auto c = line(M(rng), N(rng));
  c.r_min = U(rng) * static_cast<double>(c.m) * 0.5;
  c.r_max = c.r_min + U(rng) * (static_cast<double>(c.m) - c.r_min);
  c.u_min = -U(rng);
  c.u_max = U(rng);
  for (std::size_t i = 0; i < c.n; ++i) {
    if (U(rng) < 0.2) { continue; }
    std::uniform_int_distribution<std::size_t> J(0, c.m - 1);
    const auto a = J(rng);
    const auto b = std::min(c.m - 1, a + J(rng) % 3);
    SortStation st{i, {}, 3.0 * U(rng)};
    for (auto j = a; j <= b; ++j) { st.span.push_back(j); }
    c.stations.push_back(st);
  }
  return c;
}

inline StateVector random_state(const SystemConfig& cfg, std::mt19937_64& rng)
{
  std::uniform_real_distribution<double> U(0.0, 1.0);
  StateVector s(cfg.n, cfg.m);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    for (std::size_t j = 0; j < cfg.m; ++j) { s.mass(i, j) = U(rng) < 0.3 ? 0.0 : 4.0 * U(rng); }
  }
  s.set_speed(cfg.r_min + U(rng) * (cfg.r_max - cfg.r_min));
  return s;
}

inline Matrix random_spd(Eigen::Index N, std::mt19937_64& rng)
{
  std::normal_distribution<double> G(0.0, 1.0);
  Matrix B(N, N);
  for (Eigen::Index r = 0; r < N; ++r) {
    for (Eigen::Index c = 0; c < N; ++c) { B(r, c) = G(rng); }
  }
  return B * B.transpose() + Matrix::Identity(N, N);
}

}  // namespace lcv::test
