#pragma once

/**
 * @file
 * @brief Longitudinal control volume state and transition dynamics.
 *
 * The belt is cut into `m` control volumes. For each of `n` materials the state
 * holds the mass in every volume; the belt speed `r` (volumes per timestep) is
 * appended as the last element, giving a flat vector of length `n*m + 1`.
 *
 * One timestep advances the belt by `r` volumes (linear interpolation between
 * the neighbouring integer shifts) and then lets every sort station remove up
 * to its pick cap from the volumes it spans.
 */

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lcv/error.hpp"

namespace lcv {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct MaterialSpec
{
  std::size_t id{0};
  std::string name;
  /// Sale price per unit mass when sorted.
  double price{0.0};
};

struct SortStation
{
  std::size_t material{0};
  /// Volume indices the station can reach. Contiguous in every shipped config.
  std::vector<std::size_t> span;
  /// Maximum mass removed per timestep.
  double pick_cap{0.0};
};

struct SystemConfig
{
  std::size_t m{1};
  std::size_t n{1};
  std::vector<MaterialSpec> materials;
  std::vector<SortStation> stations;
  double r_min{0.0};
  double r_max{1.0};
  double u_min{-1.0};
  double u_max{1.0};
  /// Seconds per timestep. Informational.
  double dt{1.0};

  std::size_t state_size() const noexcept { return n * m + 1; }

  /// Station removing `material`, or nullptr when that material is not sorted.
  const SortStation* station_for(std::size_t material) const noexcept
  {
    for (const auto& s : stations) {
      if (s.material == material) { return &s; }
    }
    return nullptr;
  }

  /// Throws ContractViolation naming the first broken invariant.
  void validate() const
  {
    if (m < 1) { throw ContractViolation("system.m must be >= 1"); }
    if (n < 1) { throw ContractViolation("system.n must be >= 1"); }
    if (materials.size() != n) { throw ContractViolation("materials: expected n entries"); }
    for (std::size_t i = 0; i < materials.size(); ++i) {
      if (materials[i].id != i) { throw ContractViolation("materials: ids must be dense 0..n-1"); }
      if (!(materials[i].price >= 0.0)) { throw ContractViolation("materials: price must be >= 0"); }
    }
    std::vector<bool> seen(n, false);
    for (const auto& s : stations) {
      if (s.material >= n) { throw ContractViolation("stations: material out of range"); }
      if (seen[s.material]) { throw ContractViolation("stations: at most one station per material"); }
      seen[s.material] = true;
      if (s.span.empty()) { throw ContractViolation("stations: span must be nonempty"); }
      for (auto j : s.span) {
        if (j >= m) { throw ContractViolation("stations: span index out of range"); }
      }
      if (!(s.pick_cap >= 0.0)) { throw ContractViolation("stations: pick_cap must be >= 0"); }
    }
    if (!(r_min >= 0.0 && r_min <= r_max)) { throw ContractViolation("system: need 0 <= r_min <= r_max"); }
    if (r_max > static_cast<double>(m)) { throw ContractViolation("system: r_max must not exceed m"); }
    if (!(u_min <= 0.0 && 0.0 <= u_max)) { throw ContractViolation("system: need u_min <= 0 <= u_max"); }
  }
};

/**
 * Flat LCV state: element `i*m + j` is the mass of material `i` in volume `j`,
 * element `n*m` is the belt speed.
 */
class StateVector
{
 public:
  StateVector() = default;

  StateVector(std::size_t n, std::size_t m) : n_(n), m_(m), data_(Vector::Zero(static_cast<Eigen::Index>(n * m + 1))) {}

  StateVector(std::size_t n, std::size_t m, Vector data) : n_(n), m_(m), data_(std::move(data))
  {
    if (static_cast<std::size_t>(data_.size()) != n * m + 1) {
      throw ContractViolation("StateVector: data length must be n*m+1");
    }
  }

  /// Empty belt moving at `speed`.
  static StateVector empty(const SystemConfig& cfg, double speed)
  {
    StateVector s(cfg.n, cfg.m);
    s.set_speed(speed);
    return s;
  }

  std::size_t n() const noexcept { return n_; }
  std::size_t m() const noexcept { return m_; }
  std::size_t size() const noexcept { return static_cast<std::size_t>(data_.size()); }

  double speed() const { return data_[static_cast<Eigen::Index>(n_ * m_)]; }
  void set_speed(double r) { data_[static_cast<Eigen::Index>(n_ * m_)] = r; }

  double mass(std::size_t material, std::size_t volume) const { return data_[index(material, volume)]; }
  double& mass(std::size_t material, std::size_t volume) { return data_[index(material, volume)]; }

  auto block(std::size_t material) { return data_.segment(static_cast<Eigen::Index>(material * m_), static_cast<Eigen::Index>(m_)); }
  auto block(std::size_t material) const { return data_.segment(static_cast<Eigen::Index>(material * m_), static_cast<Eigen::Index>(m_)); }

  const Vector& data() const noexcept { return data_; }
  Vector& data() noexcept { return data_; }

  /// All masses >= -tol and speed within [r_min - tol, r_max + tol].
  bool is_valid(const SystemConfig& cfg, double tol = 0.0) const
  {
    if (n_ != cfg.n || m_ != cfg.m || size() != cfg.state_size()) { return false; }
    for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(n_ * m_); ++k) {
      if (!(data_[k] >= -tol)) { return false; }
    }
    return speed() >= cfg.r_min - tol && speed() <= cfg.r_max + tol;
  }

 private:
  Eigen::Index index(std::size_t material, std::size_t volume) const
  {
    return static_cast<Eigen::Index>(material * m_ + volume);
  }

  std::size_t n_{0};
  std::size_t m_{0};
  Vector data_;
};

struct StepOutcome
{
  StateVector next;
  /// Mass removed by each material's station during the step.
  std::vector<double> picked;
  /// Mass of each material carried past the last volume during the step.
  std::vector<double> exited;
};

struct SeparationParams
{
  /// Pick cap over span mass; +inf when the span is empty.
  double eta{std::numeric_limits<double>::infinity()};
  /// Fraction of mass remaining in each volume after sorting.
  Vector p;
};

/// Sum of one material's block.
inline double total_material(const StateVector& state, std::size_t material)
{
  if (material >= state.n()) { throw ContractViolation("total_material: material index out of range"); }
  return state.block(material).sum();
}

namespace detail {

/// Interpolation between the two integer shifts bracketing a real speed.
struct ShiftWeights
{
  std::size_t lo{0};
  std::size_t hi{0};
  double w_lo{1.0};
  double w_hi{0.0};
};

inline ShiftWeights shift_weights(double speed, std::size_t m)
{
  if (!(speed >= 0.0 && speed <= static_cast<double>(m))) {
    throw InvalidSpeed("belt speed " + std::to_string(speed) + " outside [0, " + std::to_string(m) + "]");
  }
  const double lo = std::floor(speed);
  const double hi = std::ceil(speed);
  ShiftWeights w;
  w.lo = static_cast<std::size_t>(lo);
  w.hi = static_cast<std::size_t>(hi);
  if (w.lo != w.hi) {
    w.w_lo = (hi - speed) / (hi - lo);
    w.w_hi = (speed - lo) / (hi - lo);
  }
  return w;
}

/// Shift one material block; returns the mass carried off the end.
inline double shift_block(const ShiftWeights& w, std::span<const double> in, std::span<double> out)
{
  const auto m = static_cast<Eigen::Index>(in.size());
  Eigen::Map<const Vector> x(in.data(), m);
  Eigen::Map<Vector> y(out.data(), m);
  const auto lo = static_cast<Eigen::Index>(w.lo);
  const auto hi = static_cast<Eigen::Index>(w.hi);
  y.head(std::min(lo, m)).setZero();
  double exited = 0.0;
  if (lo < m) {
    y.tail(m - lo) = w.w_lo * x.head(m - lo);
    exited += w.w_lo * x.tail(lo).sum();
  } else {
    exited += w.w_lo * x.sum();
  }
  if (w.w_hi != 0.0) {
    if (hi < m) {
      y.tail(m - hi) += w.w_hi * x.head(m - hi);
      exited += w.w_hi * x.tail(hi).sum();
    } else {
      exited += w.w_hi * x.sum();
    }
  }
  return exited;
}

inline double span_mass(std::span<const double> block, const SortStation& station)
{
  double s = 0.0;
  for (auto j : station.span) { s += block[j]; }
  return s;
}

inline double remaining_fraction(double span_total, double pick_cap)
{
  if (!(span_total > 0.0)) { return 0.0; }
  return std::max(0.0, 1.0 - pick_cap / span_total);
}

}  // namespace detail

/// Shift-by-`speed` matrix `L(speed)` on every material block; identity on the speed element.
inline Matrix integral_motion_matrix(std::size_t speed, const SystemConfig& cfg)
{
  if (speed > cfg.m) {
    throw InvalidSpeed("integral speed " + std::to_string(speed) + " exceeds m=" + std::to_string(cfg.m));
  }
  const auto N = static_cast<Eigen::Index>(cfg.state_size());
  Matrix out = Matrix::Zero(N, N);
  for (std::size_t b = 0; b < cfg.n; ++b) {
    const std::size_t off = b * cfg.m;
    for (std::size_t j = 0; j + speed < cfg.m; ++j) {
      out(static_cast<Eigen::Index>(off + j + speed), static_cast<Eigen::Index>(off + j)) = 1.0;
    }
  }
  out(N - 1, N - 1) = 1.0;
  return out;
}

/// Motion matrix for a real speed, interpolated between floor and ceil shifts.
inline Matrix motion_matrix(double speed, const SystemConfig& cfg)
{
  const auto w = detail::shift_weights(speed, cfg.m);
  if (w.lo == w.hi) { return integral_motion_matrix(w.lo, cfg); }
  return w.w_lo * integral_motion_matrix(w.lo, cfg) + w.w_hi * integral_motion_matrix(w.hi, cfg);
}

inline SeparationParams separation_params(const StateVector& state, const SortStation& station)
{
  const auto m = state.m();
  SeparationParams out;
  out.p = Vector::Ones(static_cast<Eigen::Index>(m));
  double total = 0.0;
  for (auto j : station.span) { total += state.mass(station.material, j); }
  out.eta = total > 0.0 ? station.pick_cap / total : std::numeric_limits<double>::infinity();
  const double keep = std::max(0.0, 1.0 - out.eta);
  for (auto j : station.span) { out.p[static_cast<Eigen::Index>(j)] = keep; }
  return out;
}

/// Block-diagonal matrix of separation parameters evaluated at `state`.
inline Matrix sort_matrix(const StateVector& state, const SystemConfig& cfg)
{
  const auto N = static_cast<Eigen::Index>(cfg.state_size());
  Vector diag = Vector::Ones(N);
  for (const auto& st : cfg.stations) {
    const auto sp = separation_params(state, st);
    diag.segment(static_cast<Eigen::Index>(st.material * cfg.m), static_cast<Eigen::Index>(cfg.m)) = sp.p;
  }
  return diag.asDiagonal();
}

/**
 * Frozen-coefficient transition `A = F(L(r) x) L(r)` for a given state. Applying
 * it to a vector costs O(nm); `matrix()` materializes the dense form.
 */
class TransitionOperator
{
 public:
  TransitionOperator(const StateVector& state, const SystemConfig& cfg)
      : m_(cfg.m), n_(cfg.n), shift_(detail::shift_weights(state.speed(), cfg.m)),
        keep_(Vector::Ones(static_cast<Eigen::Index>(cfg.n * cfg.m)))
  {
    std::vector<double> moved(m_);
    for (const auto& st : cfg.stations) {
      const auto blk = state.block(st.material);
      detail::shift_block(shift_, std::span<const double>(blk.data(), m_), moved);
      const double p = detail::remaining_fraction(detail::span_mass(moved, st), st.pick_cap);
      for (auto j : st.span) { keep_[static_cast<Eigen::Index>(st.material * m_ + j)] = p; }
    }
  }

  /// y = A x. `x` and `y` have length nm+1 and must not alias.
  void apply(std::span<const double> x, std::span<double> y) const
  {
    for (std::size_t b = 0; b < n_; ++b) {
      const std::size_t off = b * m_;
      detail::shift_block(shift_, x.subspan(off, m_), y.subspan(off, m_));
      for (std::size_t j = 0; j < m_; ++j) { y[off + j] *= keep_[static_cast<Eigen::Index>(off + j)]; }
    }
    y[n_ * m_] = x[n_ * m_];
  }

  /// A P A^T for a square matrix P of size nm+1.
  Matrix congruence(const Matrix& P) const
  {
    const auto N = P.rows();
    Matrix AP(N, N);
    for (Eigen::Index c = 0; c < N; ++c) {
      apply(std::span<const double>(P.col(c).data(), static_cast<std::size_t>(N)),
            std::span<double>(AP.col(c).data(), static_cast<std::size_t>(N)));
    }
    // (AP) A^T: column c of the result mixes the columns of AP that A sends to c.
    Matrix out = Matrix::Zero(N, N);
    for (std::size_t b = 0; b < n_; ++b) {
      const std::size_t off = b * m_;
      for (std::size_t j = 0; j < m_; ++j) {
        const auto src = static_cast<Eigen::Index>(off + j);
        if (j + shift_.lo < m_) {
          const auto dst = static_cast<Eigen::Index>(off + j + shift_.lo);
          out.col(dst) += (shift_.w_lo * keep_[dst]) * AP.col(src);
        }
        if (shift_.w_hi != 0.0 && j + shift_.hi < m_) {
          const auto dst = static_cast<Eigen::Index>(off + j + shift_.hi);
          out.col(dst) += (shift_.w_hi * keep_[dst]) * AP.col(src);
        }
      }
    }
    out.col(N - 1) = AP.col(N - 1);
    return out;
  }

  Matrix matrix() const
  {
    const auto N = static_cast<Eigen::Index>(n_ * m_ + 1);
    Matrix out(N, N);
    Vector e = Vector::Zero(N);
    for (Eigen::Index c = 0; c < N; ++c) {
      e[c] = 1.0;
      apply(std::span<const double>(e.data(), static_cast<std::size_t>(N)),
            std::span<double>(out.col(c).data(), static_cast<std::size_t>(N)));
      e[c] = 0.0;
    }
    return out;
  }

 private:
  std::size_t m_;
  std::size_t n_;
  detail::ShiftWeights shift_;
  Vector keep_;
};

namespace detail {

/// Unchecked step writing into `out`, reusing its storage.
inline void step_into(const StateVector& state, double u, const SystemConfig& cfg, std::span<const double> infeed,
                      StepOutcome& out)
{
  const std::size_t m = cfg.m;
  if (out.next.n() != cfg.n || out.next.m() != m) { out.next = StateVector(cfg.n, m); }
  out.picked.assign(cfg.n, 0.0);
  out.exited.resize(cfg.n);
  const auto shift = shift_weights(state.speed(), m);

  for (std::size_t i = 0; i < cfg.n; ++i) {
    const auto in = state.block(i);
    auto blk = out.next.block(i);
    std::span<double> moved(blk.data(), m);
    out.exited[i] = shift_block(shift, std::span<const double>(in.data(), m), moved);

    if (const auto* st = cfg.station_for(i)) {
      const double p = remaining_fraction(span_mass(moved, *st), st->pick_cap);
      double picked = 0.0;
      for (auto j : st->span) {
        const double keep = p * moved[j];
        picked += moved[j] - keep;
        moved[j] = keep;
      }
      out.picked[i] = picked;
    }
    moved[0] += infeed[i];
  }
  out.next.set_speed(std::clamp(state.speed() + u, cfg.r_min, cfg.r_max));
}

}  // namespace detail

/**
 * Advance one timestep: shift by the current speed, sort, inject `infeed` into
 * volume 0, then set the speed to clamp(r + u, r_min, r_max).
 */
inline StepOutcome step(const StateVector& state, double u, const SystemConfig& cfg, std::span<const double> infeed)
{
  if (!(u >= cfg.u_min && u <= cfg.u_max)) {
    throw ContractViolation("step: u=" + std::to_string(u) + " outside [u_min, u_max]");
  }
  if (infeed.size() != cfg.n) { throw ContractViolation("step: infeed must have n entries"); }
  if (state.n() != cfg.n || state.m() != cfg.m) { throw ContractViolation("step: state shape does not match config"); }
  StepOutcome out;
  detail::step_into(state, u, cfg, infeed, out);
  return out;
}

inline StepOutcome step(const StateVector& state, double u, const SystemConfig& cfg, const std::vector<double>& infeed)
{
  return step(state, u, cfg, std::span<const double>(infeed));
}

}  // namespace lcv
