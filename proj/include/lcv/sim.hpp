#pragma once

/**
 * @file
 * @brief Closed-loop plant simulation and the paired MPC-vs-constant protocol.
 *
 * Randomness comes from three independent streams derived from the run seed:
 * infeed generation, plant perturbations, and detector synthesis. Changing a
 * detector parameter never changes the infeed or the plant trajectory.
 */

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "lcv/control.hpp"
#include "lcv/core.hpp"
#include "lcv/estimation.hpp"

namespace lcv {

struct RegimeParams
{
  /// Long-run mean infeed rate.
  double mean_rate{0.0};
  /// Gamma shape of the per-regime rate. Larger is steadier.
  double rate_dispersion{2.0};
  /// Mean regime length in steps (geometric).
  double regime_mean_duration{60.0};
};

struct ScriptedPulse
{
  std::size_t material{0};
  std::size_t start{0};
  std::size_t end{0};  ///< exclusive
  double rate{0.0};
};

/// Deterministic schedule: constant base rates plus additive pulses.
struct InfeedScript
{
  std::vector<double> base;
  std::vector<ScriptedPulse> pulses;
};

struct InfeedModel
{
  std::uint64_t seed{0};
  std::vector<RegimeParams> materials;
  std::optional<InfeedScript> script;
  InfeedCoupling coupling{InfeedCoupling::belt};
};

/// schedule[t][i]: infeed rate of material i at step t.
using InfeedSchedule = std::vector<std::vector<double>>;

struct PlantNoise
{
  double slip_prob{0.0};
  double pick_noise{0.0};
  double detector_miss_rate{0.0};
  double bbox_jitter_px{0.0};

  bool plant_is_exact() const noexcept { return slip_prob == 0.0 && pick_noise == 0.0; }
};

enum class MeasurementMode {
  detections,  ///< synthesize bounding boxes and bin them
  exact        ///< observe H x directly every step
};

struct SimSettings
{
  std::size_t steps{3600};
  double r_init{1.0};
  /// Prior variance on every mass element of the initial estimate.
  double p0_mass{1.0};
  MeasurementMode measurement{MeasurementMode::detections};
};

/// Everything a run needs, as parsed from one config document.
struct ConfigBundle
{
  SystemConfig system;
  CameraModel camera;
  NoiseConfig noise;
  PlantNoise plant;
  MpcConfig mpc;
  InfeedModel infeed;
  SimSettings sim;
  std::string hash;
};

struct RandomStreams
{
  std::mt19937_64 infeed;
  std::mt19937_64 plant;
  std::mt19937_64 detector;

  explicit RandomStreams(std::uint64_t seed)
      : infeed(stream(seed, 1)), plant(stream(seed, 2)), detector(stream(seed, 3))
  {
  }

 private:
  static std::mt19937_64 stream(std::uint64_t seed, std::uint32_t id)
  {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), id};
    return std::mt19937_64(seq);
  }
};

/**
 * Piecewise-constant regime infeed. Each material switches regimes
 * independently; regime lengths are geometric with the configured mean and
 * rates are gamma distributed with the configured mean and shape.
 */
inline InfeedSchedule generate_infeed(const InfeedModel& model, std::size_t steps, std::size_t n)
{
  if (steps < 1) { throw ContractViolation("generate_infeed: steps must be >= 1"); }
  InfeedSchedule out(steps, std::vector<double>(n, 0.0));
  if (model.script) {
    const auto& sc = *model.script;
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t i = 0; i < n && i < sc.base.size(); ++i) { out[t][i] = sc.base[i]; }
    }
    for (const auto& p : sc.pulses) {
      if (p.material >= n) { throw ContractViolation("generate_infeed: pulse material out of range"); }
      for (std::size_t t = p.start; t < std::min(p.end, steps); ++t) { out[t][p.material] += p.rate; }
    }
    return out;
  }
  if (model.materials.size() != n) { throw ContractViolation("generate_infeed: need regime parameters per material"); }

  RandomStreams rs(model.seed);
  auto& rng = rs.infeed;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& rp = model.materials[i];
    if (!(rp.mean_rate >= 0.0) || !(rp.regime_mean_duration >= 1.0) || !(rp.rate_dispersion > 0.0)) {
      throw ContractViolation("generate_infeed: invalid regime parameters");
    }
    std::geometric_distribution<std::size_t> duration(1.0 / rp.regime_mean_duration);
    std::gamma_distribution<double> rate(rp.rate_dispersion, rp.mean_rate > 0.0 ? rp.mean_rate / rp.rate_dispersion : 1.0);
    std::size_t t = 0;
    while (t < steps) {
      const std::size_t len = 1 + duration(rng);
      const double r = rp.mean_rate > 0.0 ? rate(rng) : 0.0;
      for (std::size_t k = t; k < std::min(steps, t + len); ++k) { out[k][i] = r; }
      t += len;
    }
  }
  return out;
}

inline InfeedSchedule generate_infeed(const InfeedModel& model, std::size_t steps)
{
  const std::size_t n = model.script ? model.script->base.size() : model.materials.size();
  return generate_infeed(model, steps, n);
}

struct PlantStep
{
  StepOutcome outcome;
  std::vector<Detection> detections;
  /// Mass on each material's station span after motion, before picking.
  std::vector<double> station_mass;
};

namespace detail {

/// Fraction of `mass` held back when each of its ceil(mass/quantum) units slips with probability `p`.
inline double slip_fraction(double mass, double quantum, double p, std::mt19937_64& rng)
{
  if (p <= 0.0 || mass <= 0.0) { return 0.0; }
  if (p >= 1.0) { return 1.0; }
  const auto units = static_cast<std::uint64_t>(std::max(1.0, std::ceil(mass / quantum)));
  std::binomial_distribution<std::uint64_t> held(units, p);
  return static_cast<double>(held(rng)) / static_cast<double>(units);
}

inline std::vector<Detection> synthesize_detections(const StateVector& truth, std::size_t step_index,
                                                    const CameraModel& cam, const PlantNoise& noise,
                                                    std::mt19937_64& rng)
{
  std::vector<Detection> out;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 1.0);
  const double band = cam.band_width();
  const double bw = 0.5 * band;
  const double bh = 0.15 * cam.image_height;
  for (std::size_t i = 0; i < truth.n(); ++i) {
    for (std::size_t j = 0; j < cam.lambda; ++j) {
      const double objects = truth.mass(i, cam.first_volume + j) / cam.mass_per_object;
      auto count = static_cast<std::size_t>(std::floor(objects));
      if (unit(rng) < objects - std::floor(objects)) { ++count; }
      for (std::size_t c = 0; c < count; ++c) {
        const bool missed = unit(rng) < noise.detector_miss_rate;
        const double cx = band * static_cast<double>(j) + bw / 2 + unit(rng) * (band - bw);
        const double cy = bh / 2 + unit(rng) * (cam.image_height - bh);
        BBox b{cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2};
        if (noise.bbox_jitter_px > 0.0) {
          b.x0 += noise.bbox_jitter_px * jitter(rng);
          b.y0 += noise.bbox_jitter_px * jitter(rng);
          b.x1 += noise.bbox_jitter_px * jitter(rng);
          b.y1 += noise.bbox_jitter_px * jitter(rng);
          if (b.x0 > b.x1) { std::swap(b.x0, b.x1); }
          if (b.y0 > b.y1) { std::swap(b.y0, b.y1); }
          if (b.x1 - b.x0 < 1e-6) { b.x1 = b.x0 + 1e-6; }
          if (b.y1 - b.y0 < 1e-6) { b.y1 = b.y0 + 1e-6; }
        }
        if (!missed) { out.push_back(Detection{step_index, i, b}); }
      }
    }
  }
  return out;
}

}  // namespace detail

/**
 * True plant transition. With zero slip and pick noise this is exactly the
 * model step. Slipped mass stays in its source volume for the step; realized
 * picks are the nominal pick scaled by (1 + N(0, pick_noise)) and clamped to
 * [0, min(cap, span mass)]. Detections describe the state after the step and
 * carry `step_index + 1`.
 */
inline PlantStep plant_step(const StateVector& truth, double u, std::span<const double> infeed, std::size_t step_index,
                            const SystemConfig& cfg, const CameraModel& cam, const PlantNoise& noise,
                            std::mt19937_64& plant_rng, std::mt19937_64& detector_rng)
{
  PlantStep out;
  out.station_mass.assign(cfg.n, 0.0);
  const std::size_t m = cfg.m;

  if (noise.plant_is_exact()) {
    out.outcome = step(truth, u, cfg, infeed);
  } else {
    if (!(u >= cfg.u_min && u <= cfg.u_max)) { throw ContractViolation("plant_step: u outside bounds"); }
    const auto shift = detail::shift_weights(truth.speed(), m);
    out.outcome = StepOutcome{StateVector(cfg.n, m), std::vector<double>(cfg.n, 0.0), std::vector<double>(cfg.n, 0.0)};
    std::normal_distribution<double> eps(0.0, 1.0);
    std::vector<double> movers(m), held(m);
    for (std::size_t i = 0; i < cfg.n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        const double v = truth.mass(i, j);
        const double h = detail::slip_fraction(v, cam.mass_per_object, noise.slip_prob, plant_rng);
        held[j] = h * v;
        movers[j] = v - held[j];
      }
      auto blk = out.outcome.next.block(i);
      std::span<double> moved(blk.data(), m);
      out.outcome.exited[i] = detail::shift_block(shift, movers, moved);
      for (std::size_t j = 0; j < m; ++j) { moved[j] += held[j]; }

      if (const auto* st = cfg.station_for(i)) {
        const double span_total = detail::span_mass(moved, *st);
        const double nominal = span_total - detail::remaining_fraction(span_total, st->pick_cap) * span_total;
        double realized = nominal;
        if (noise.pick_noise > 0.0) { realized = nominal * (1.0 + noise.pick_noise * eps(plant_rng)); }
        realized = std::clamp(realized, 0.0, std::min(st->pick_cap, span_total));
        if (span_total > 0.0 && realized > 0.0) {
          const double keep = (span_total - realized) / span_total;
          double picked = 0.0;
          for (auto j : st->span) {
            const double k = keep * moved[j];
            picked += moved[j] - k;
            moved[j] = k;
          }
          out.outcome.picked[i] = picked;
        }
      }
      moved[0] += infeed[i];
    }
    out.outcome.next.set_speed(std::clamp(truth.speed() + u, cfg.r_min, cfg.r_max));
  }

  for (std::size_t i = 0; i < cfg.n; ++i) {
    if (const auto* st = cfg.station_for(i)) {
      double s = out.outcome.picked[i];
      for (auto j : st->span) { s += out.outcome.next.mass(i, j) - (j == 0 ? infeed[i] : 0.0); }
      out.station_mass[i] = s;
    }
  }
  out.detections = detail::synthesize_detections(out.outcome.next, step_index + 1, cam, noise, detector_rng);
  return out;
}

struct Controller
{
  enum class Kind { mpc, constant };
  Kind kind{Kind::mpc};
  /// Target speed for the constant controller.
  double speed{0.0};

  static Controller make_mpc() { return {Kind::mpc, 0.0}; }
  static Controller constant(double r) { return {Kind::constant, r}; }
  std::string name() const { return kind == Kind::mpc ? "mpc" : "constant"; }
};

struct RunRow
{
  std::size_t step{0};
  /// Belt speed used for motion during this step.
  double speed{0.0};
  double u{0.0};
  std::vector<double> station_mass;
  std::vector<double> picked;
  std::vector<double> exited;
  double reward{0.0};
  double cumulative{0.0};
  std::optional<SolverReport> solver;
};

/// Estimator trace for replay comparison.
struct EstimateRow
{
  std::size_t step{0};
  std::vector<double> totals;
  double trace_p{0.0};
};

struct RunRecord
{
  std::uint64_t seed{0};
  std::string controller;
  std::string config_hash;
  std::vector<RunRow> rows;
  std::vector<EstimateRow> estimates;
  std::vector<Detection> detections;
  /// Per-step control and the infeed mass the estimator was told about.
  std::vector<double> controls;
  std::vector<std::vector<double>> infeed_mass;

  double total_value() const { return rows.empty() ? 0.0 : rows.back().cumulative; }

  double average_speed() const
  {
    if (rows.empty()) { return 0.0; }
    double s = 0.0;
    for (const auto& r : rows) { s += r.speed; }
    return s / static_cast<double>(rows.size());
  }

  double profit_rate() const { return rows.empty() ? 0.0 : total_value() / static_cast<double>(rows.size()); }
};

struct RunOptions
{
  /// Feed the controller the true state instead of the filter estimate.
  bool controller_uses_truth{false};
  /// Keep detections, controls, and estimator totals in the record.
  bool keep_trace{false};
};

namespace detail {

inline EstimateRow estimate_row(std::size_t k, const FilterState& f)
{
  EstimateRow e;
  e.step = k;
  for (std::size_t i = 0; i < f.mean.n(); ++i) { e.totals.push_back(total_material(f.mean, i)); }
  e.trace_p = f.cov.trace();
  return e;
}

inline InfeedForecast build_forecast(const InfeedSchedule& schedule, std::size_t k, std::size_t len, std::size_t n,
                                     ForecastMode mode, InfeedCoupling coupling)
{
  InfeedForecast fc;
  fc.coupling = coupling;
  switch (mode) {
    case ForecastMode::queue:
      for (std::size_t l = 0; l < len && k + l < schedule.size(); ++l) { fc.rates.push_back(schedule[k + l]); }
      break;
    case ForecastMode::persistence: {
      const auto last = k > 0 ? schedule[k - 1] : std::vector<double>(n, 0.0);
      fc.rates.assign(len, last);
      break;
    }
    case ForecastMode::none: break;
  }
  return fc;
}

}  // namespace detail

/**
 * One closed-loop run. Each step: the controller picks u from the current
 * estimate, the plant advances, the filter predicts with the commanded u and
 * the known infeed, then updates on the new frame.
 */
inline RunRecord run_closed_loop(const ConfigBundle& b, const Controller& controller, std::uint64_t seed,
                                 const RunOptions& opt = {})
{
  const auto& cfg = b.system;
  auto model = b.infeed;
  model.seed = seed;
  const auto schedule = generate_infeed(model, b.sim.steps, cfg.n);
  RandomStreams rs(seed);

  const bool is_mpc = controller.kind == Controller::Kind::mpc;
  const double r0 = is_mpc ? b.sim.r_init : std::clamp(controller.speed, cfg.r_min, cfg.r_max);
  const std::size_t T = is_mpc ? b.mpc.resolved_horizon(cfg) : 2;

  StateVector truth = StateVector::empty(cfg, r0);
  FilterState filter{StateVector::empty(cfg, r0), initial_covariance(cfg, b.sim.p0_mass)};
  const Matrix H = observation_matrix(b.camera, cfg);

  RunRecord rec;
  rec.seed = seed;
  rec.controller = controller.name();
  rec.config_hash = b.hash;
  rec.rows.reserve(b.sim.steps);
  if (opt.keep_trace) { rec.estimates.push_back(detail::estimate_row(0, filter)); }

  std::optional<ControlSequence> plan;
  std::vector<double> infeed(cfg.n);
  double cumulative = 0.0;

  for (std::size_t k = 0; k < b.sim.steps; ++k) {
    RunRow row;
    row.step = k;
    row.speed = truth.speed();

    if (is_mpc) {
      const StateVector& view = opt.controller_uses_truth ? truth : filter.mean;
      StateVector est = view;
      est.set_speed(std::clamp(est.speed(), cfg.r_min, cfg.r_max));
      const auto fc = detail::build_forecast(schedule, k, T - 1, cfg.n, b.mpc.forecast, model.coupling);
      auto dec = mpc_step(est, plan, fc, cfg, b.mpc);
      row.u = dec.u;
      row.solver = std::move(dec.report);
      plan = std::move(dec.plan);
    } else {
      row.u = std::clamp(controller.speed - truth.speed(), cfg.u_min, cfg.u_max);
    }

    const double scale = model.coupling == InfeedCoupling::belt ? truth.speed() : 1.0;
    for (std::size_t i = 0; i < cfg.n; ++i) { infeed[i] = schedule[k][i] * scale; }

    auto ps = plant_step(truth, row.u, infeed, k, cfg, b.camera, b.plant, rs.plant, rs.detector);
    row.picked = ps.outcome.picked;
    row.exited = ps.outcome.exited;
    row.station_mass = ps.station_mass;
    row.reward = prose_reward(ps.outcome, cfg, b.mpc.mixed_price);
    cumulative += row.reward;
    row.cumulative = cumulative;
    truth = std::move(ps.outcome.next);

    filter = predict(filter, row.u, infeed, cfg, b.noise);
    if (b.sim.measurement == MeasurementMode::exact) {
      filter = update(filter, MeasurementVector{H * truth.data()}, b.camera, cfg, b.noise);
    } else if (!ps.detections.empty()) {
      auto z = bin_detections(ps.detections, b.camera, cfg);
      z.z *= b.camera.mass_per_object;
      filter = update(filter, z, b.camera, cfg, b.noise);
    }

    if (opt.keep_trace) {
      rec.controls.push_back(row.u);
      rec.infeed_mass.push_back(infeed);
      rec.detections.insert(rec.detections.end(), ps.detections.begin(), ps.detections.end());
      rec.estimates.push_back(detail::estimate_row(k + 1, filter));
    }
    rec.rows.push_back(std::move(row));
  }
  return rec;
}

struct PairedRow
{
  std::uint64_t seed{0};
  double mpc_total_value{0.0};
  double avg_mpc_speed{0.0};
  double baseline_total_value{0.0};
  double improvement_pct{0.0};
  double mpc_profit_rate{0.0};
  double baseline_profit_rate{0.0};
};

struct PairedSummary
{
  std::vector<PairedRow> rows;
  double mean_improvement_pct{0.0};
  double median_improvement_pct{0.0};
  double mpc_profit_rate_mean{0.0};
  double mpc_profit_rate_var{0.0};
  double baseline_profit_rate_mean{0.0};
  double baseline_profit_rate_var{0.0};
  std::size_t mpc_wins{0};
};

inline double improvement_pct(double mpc, double baseline)
{
  if (baseline != 0.0) { return 100.0 * (mpc - baseline) / std::abs(baseline); }
  if (mpc == baseline) { return 0.0; }
  return mpc > baseline ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
}

inline double median(std::vector<double> v)
{
  if (v.empty()) { return 0.0; }
  std::sort(v.begin(), v.end());
  const auto h = v.size() / 2;
  return v.size() % 2 == 1 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

/// Sample variance; zero for fewer than two values.
inline std::pair<double, double> mean_and_variance(const std::vector<double>& v)
{
  if (v.empty()) { return {0.0, 0.0}; }
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) { return {mean, 0.0}; }
  double ss = 0.0;
  for (double x : v) { ss += (x - mean) * (x - mean); }
  return {mean, ss / static_cast<double>(v.size() - 1)};
}

/// Aggregates over per-seed rows; rows are reduced in seed order.
inline PairedSummary summarize(std::vector<PairedRow> rows)
{
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.seed < b.seed; });
  PairedSummary s;
  std::vector<double> imp, mpc_rate, base_rate;
  for (const auto& r : rows) {
    imp.push_back(r.improvement_pct);
    mpc_rate.push_back(r.mpc_profit_rate);
    base_rate.push_back(r.baseline_profit_rate);
    if (r.mpc_total_value > r.baseline_total_value) { ++s.mpc_wins; }
  }
  s.mean_improvement_pct = mean_and_variance(imp).first;
  s.median_improvement_pct = median(imp);
  std::tie(s.mpc_profit_rate_mean, s.mpc_profit_rate_var) = mean_and_variance(mpc_rate);
  std::tie(s.baseline_profit_rate_mean, s.baseline_profit_rate_var) = mean_and_variance(base_rate);
  s.rows = std::move(rows);
  return s;
}

struct PairedResult
{
  PairedSummary summary;
  std::vector<RunRecord> mpc_runs;
  std::vector<RunRecord> baseline_runs;
};

inline PairedRow pair_row(const RunRecord& mpc, const RunRecord& base)
{
  PairedRow row;
  row.seed = mpc.seed;
  row.mpc_total_value = mpc.total_value();
  row.avg_mpc_speed = mpc.average_speed();
  row.baseline_total_value = base.total_value();
  row.improvement_pct = improvement_pct(row.mpc_total_value, row.baseline_total_value);
  row.mpc_profit_rate = mpc.profit_rate();
  row.baseline_profit_rate = base.profit_rate();
  return row;
}

/**
 * MPC run per seed, then a constant-speed rerun of the same seed at the MPC
 * run's mean speed. Seeds are spread over `jobs` threads; results do not
 * depend on the thread count.
 */
inline PairedResult paired_experiment(const ConfigBundle& b, const std::vector<std::uint64_t>& seeds,
                                      const RunOptions& opt = {}, std::size_t jobs = 1)
{
  if (seeds.empty()) { throw ContractViolation("paired_experiment: need at least one seed"); }
  PairedResult out;
  out.mpc_runs.resize(seeds.size());
  out.baseline_runs.resize(seeds.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t k = next++; k < seeds.size(); k = next++) {
      try {
        out.mpc_runs[k] = run_closed_loop(b, Controller::make_mpc(), seeds[k], opt);
        out.baseline_runs[k] = run_closed_loop(b, Controller::constant(out.mpc_runs[k].average_speed()), seeds[k], opt);
      } catch (...) {
        const std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) { failure = std::current_exception(); }
      }
    }
  };
  jobs = std::clamp<std::size_t>(jobs, 1, seeds.size());
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) { pool.emplace_back(worker); }
    for (auto& th : pool) { th.join(); }
  }
  if (failure) { std::rethrow_exception(failure); }

  std::vector<PairedRow> rows;
  for (std::size_t k = 0; k < seeds.size(); ++k) { rows.push_back(pair_row(out.mpc_runs[k], out.baseline_runs[k])); }
  out.summary = summarize(std::move(rows));
  return out;
}

}  // namespace lcv
