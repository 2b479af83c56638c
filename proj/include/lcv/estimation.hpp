#pragma once

/**
 * @file
 * @brief Measurement binning and the Kalman filter over the LCV state.
 *
 * The camera sees `lambda` consecutive control volumes starting at
 * `first_volume`; the image x-axis maps linearly onto them, volume 0 of the
 * viewport at the left edge. Each detection is split across the volume bands
 * it overlaps in proportion to area.
 */

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <map>
#include <vector>

#include "lcv/core.hpp"

namespace lcv {

struct BBox
{
  double x0{0}, y0{0}, x1{0}, y1{0};

  double area() const noexcept { return (x1 - x0) * (y1 - y0); }
};

struct Detection
{
  std::size_t step{0};
  std::size_t material{0};
  BBox bbox;
};

struct CameraModel
{
  std::size_t first_volume{0};
  std::size_t lambda{1};
  double image_width{640.0};
  double image_height{480.0};
  /// Mass represented by one detected object. Measurements are scaled by it.
  double mass_per_object{1.0};

  void validate(const SystemConfig& cfg) const
  {
    if (lambda < 1) { throw ContractViolation("camera.lambda must be >= 1"); }
    if (first_volume + lambda > cfg.m) { throw ContractViolation("camera: first_volume + lambda must be <= m"); }
    if (!(image_width > 0.0 && image_height > 0.0)) { throw ContractViolation("camera: image size must be positive"); }
    if (!(mass_per_object > 0.0)) { throw ContractViolation("camera.mass_per_object must be > 0"); }
  }

  double band_width() const noexcept { return image_width / static_cast<double>(lambda); }
};

/// Material-major: entry `i*lambda + j` is material i in visible volume j.
struct MeasurementVector
{
  Vector z;
};

struct NoiseConfig
{
  double q_mass{0.01};
  double q_speed{1e-6};
  double r_meas{0.25};

  void validate() const
  {
    if (!(q_mass >= 0.0 && q_speed >= 0.0 && r_meas >= 0.0)) {
      throw ContractViolation("noise: variances must be >= 0");
    }
  }
};

struct FilterState
{
  StateVector mean;
  Matrix cov;
};

/// Fractional-area assignment of detections to the visible volumes.
inline MeasurementVector bin_detections(const std::vector<Detection>& detections, const CameraModel& cam, const SystemConfig& cfg)
{
  const auto lambda = cam.lambda;
  MeasurementVector out{Vector::Zero(static_cast<Eigen::Index>(cfg.n * lambda))};
  const double band = cam.band_width();
  for (const auto& d : detections) {
    if (d.material >= cfg.n) { throw ContractViolation("bin_detections: material index out of range"); }
    const auto& b = d.bbox;
    const double total = b.area();
    if (!(b.x1 > b.x0 && b.y1 > b.y0)) { throw ContractViolation("bin_detections: degenerate bounding box"); }
    const double h = std::max(0.0, std::min(b.y1, cam.image_height) - std::max(b.y0, 0.0));
    if (h <= 0.0) { continue; }
    for (std::size_t j = 0; j < lambda; ++j) {
      const double lo = band * static_cast<double>(j);
      const double hi = j + 1 == lambda ? cam.image_width : band * static_cast<double>(j + 1);
      const double w = std::min(b.x1, hi) - std::max(b.x0, lo);
      if (w > 0.0) { out.z[static_cast<Eigen::Index>(d.material * lambda + j)] += (w * h) / total; }
    }
  }
  return out;
}

/// Row (i, j) selects the mass of material i in volume first_volume + j.
inline Matrix observation_matrix(const CameraModel& cam, const SystemConfig& cfg)
{
  Matrix H = Matrix::Zero(static_cast<Eigen::Index>(cfg.n * cam.lambda), static_cast<Eigen::Index>(cfg.state_size()));
  for (std::size_t i = 0; i < cfg.n; ++i) {
    for (std::size_t j = 0; j < cam.lambda; ++j) {
      H(static_cast<Eigen::Index>(i * cam.lambda + j), static_cast<Eigen::Index>(i * cfg.m + cam.first_volume + j)) = 1.0;
    }
  }
  return H;
}

namespace detail {

inline std::vector<Eigen::Index> observed_indices(const CameraModel& cam, const SystemConfig& cfg)
{
  std::vector<Eigen::Index> idx;
  idx.reserve(cfg.n * cam.lambda);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    for (std::size_t j = 0; j < cam.lambda; ++j) {
      idx.push_back(static_cast<Eigen::Index>(i * cfg.m + cam.first_volume + j));
    }
  }
  return idx;
}

}  // namespace detail

inline Matrix initial_covariance(const SystemConfig& cfg, double mass_var, double speed_var = 0.0)
{
  const auto N = static_cast<Eigen::Index>(cfg.state_size());
  Matrix P = Matrix::Identity(N, N) * mass_var;
  P(N - 1, N - 1) = speed_var;
  return P;
}

/**
 * Propagate mean through the nonlinear step and covariance through the
 * transition frozen at the current mean.
 */
inline FilterState predict(const FilterState& filter, double u, std::span<const double> infeed_estimate,
                           const SystemConfig& cfg, const NoiseConfig& noise)
{
  const TransitionOperator A(filter.mean, cfg);
  FilterState out;
  out.mean = step(filter.mean, u, cfg, infeed_estimate).next;
  out.cov = A.congruence(filter.cov);
  const auto N = out.cov.rows();
  for (Eigen::Index k = 0; k + 1 < N; ++k) { out.cov(k, k) += noise.q_mass; }
  out.cov(N - 1, N - 1) += noise.q_speed;
  return out;
}

/**
 * Kalman update with one-hot H and R = r_meas I, Joseph form covariance.
 * Negative masses in the posterior mean are clamped to zero.
 */
inline FilterState update(const FilterState& filter, const MeasurementVector& meas, const CameraModel& cam,
                          const SystemConfig& cfg, const NoiseConfig& noise)
{
  const auto idx = detail::observed_indices(cam, cfg);
  const auto k = static_cast<Eigen::Index>(idx.size());
  if (meas.z.size() != k) { throw ContractViolation("update: measurement length must be n*lambda"); }
  if (k == 0) { return filter; }

  const Matrix& P = filter.cov;
  const auto N = P.rows();

  // P H^T and H P H^T by index selection.
  Matrix PHt(N, k);
  for (Eigen::Index c = 0; c < k; ++c) { PHt.col(c) = P.col(idx[static_cast<std::size_t>(c)]); }
  Matrix S(k, k);
  for (Eigen::Index r = 0; r < k; ++r) { S.row(r) = PHt.row(idx[static_cast<std::size_t>(r)]); }
  S.diagonal().array() += noise.r_meas;
  S = 0.5 * (S + S.transpose());

  Eigen::LLT<Matrix> llt(S);
  if (llt.info() != Eigen::Success) {
    S.diagonal().array() += 1e-9;
    llt.compute(S);
  }
  Matrix K;
  if (llt.info() == Eigen::Success) {
    K = llt.solve(PHt.transpose()).transpose();
  } else {
    K = S.ldlt().solve(PHt.transpose()).transpose();
  }

  Vector innovation = meas.z;
  for (Eigen::Index r = 0; r < k; ++r) { innovation[r] -= filter.mean.data()[idx[static_cast<std::size_t>(r)]]; }

  FilterState out;
  out.mean = filter.mean;
  out.mean.data() += K * innovation;

  // Joseph form (I - K H) P (I - K H)^T + K R K^T with H a row selection:
  // X = (I - K H) P, then X - (X H^T - r K) K^T.
  Matrix X = P;
  Matrix HP(k, N);
  for (Eigen::Index r = 0; r < k; ++r) { HP.row(r) = P.row(idx[static_cast<std::size_t>(r)]); }
  X.noalias() -= K * HP;
  Matrix W(N, k);
  for (Eigen::Index c = 0; c < k; ++c) { W.col(c) = X.col(idx[static_cast<std::size_t>(c)]); }
  W -= noise.r_meas * K;
  X.noalias() -= W * K.transpose();
  out.cov = 0.5 * (X + X.transpose());

  auto& d = out.mean.data();
  for (Eigen::Index i = 0; i + 1 < d.size(); ++i) { d[i] = std::max(0.0, d[i]); }
  return out;
}

/// Detections grouped by the step they were captured at.
using DetectionFrames = std::map<std::size_t, std::vector<Detection>>;

inline DetectionFrames group_by_step(const std::vector<Detection>& detections)
{
  DetectionFrames frames;
  for (const auto& d : detections) { frames[d.step].push_back(d); }
  return frames;
}

/**
 * Replay a detection stream. Detections stamped `k` observe the state after
 * `k` transitions; `controls[k]` and `infeed_estimates[k]` drive transition k.
 * Steps with no detections are predict-only. Returns K+1 filter states.
 */
inline std::vector<FilterState> run_filter(FilterState initial, const DetectionFrames& frames,
                                           const std::vector<double>& controls,
                                           const std::vector<std::vector<double>>& infeed_estimates,
                                           const SystemConfig& cfg, const CameraModel& cam, const NoiseConfig& noise)
{
  if (controls.size() != infeed_estimates.size()) {
    throw ContractViolation("run_filter: controls and infeed estimates are misaligned");
  }
  if (!frames.empty() && frames.rbegin()->first > controls.size()) {
    throw ContractViolation("run_filter: detections reference a step beyond the control stream");
  }
  auto measure = [&](FilterState f, std::size_t k) {
    if (auto it = frames.find(k); it != frames.end() && !it->second.empty()) {
      auto z = bin_detections(it->second, cam, cfg);
      z.z *= cam.mass_per_object;
      f = update(f, z, cam, cfg, noise);
    }
    return f;
  };

  std::vector<FilterState> out;
  out.reserve(controls.size() + 1);
  out.push_back(measure(std::move(initial), 0));
  for (std::size_t k = 0; k < controls.size(); ++k) {
    auto next = predict(out.back(), controls[k], infeed_estimates[k], cfg, noise);
    out.push_back(measure(std::move(next), k + 1));
  }
  return out;
}

}  // namespace lcv
