#pragma once

/**
 * @file
 * @brief Receding-horizon speed control.
 *
 * The decision variables are the speed changes `u_0 .. u_{T-2}` over a horizon
 * of `T` states. The objective is the sum of stage rewards along a forward
 * rollout of the LCV model and is maximized by a box-projected BFGS method
 * with Armijo backtracking; gradients come from finite differences.
 */

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lcv/core.hpp"

namespace lcv {

enum class Accounting { prose, literal };

inline const char* to_string(Accounting a) { return a == Accounting::prose ? "prose" : "literal"; }

inline Accounting parse_accounting(const std::string& s)
{
  if (s == "prose") { return Accounting::prose; }
  if (s == "literal") { return Accounting::literal; }
  throw ContractViolation("unknown accounting mode '" + s + "'");
}

/// How the MPC forecasts infeed over its horizon.
enum class ForecastMode {
  queue,        ///< the upcoming hopper contents are known exactly
  persistence,  ///< the most recent infeed rate is held constant
  none          ///< no arrivals assumed
};

struct MpcConfig
{
  /// Number of states in the horizon; 0 selects ceil(m / r_min).
  std::size_t horizon{0};
  Accounting accounting{Accounting::prose};
  ForecastMode forecast{ForecastMode::queue};
  double mixed_price{0.0};
  double fd_epsilon{1e-3};
  double armijo_c1{1e-4};
  double backtrack_factor{0.5};
  std::size_t max_iters{100};
  std::size_t max_backtracks{30};
  double grad_tol{1e-6};

  std::size_t resolved_horizon(const SystemConfig& cfg) const
  {
    if (horizon != 0) { return horizon; }
    if (!(cfg.r_min > 0.0)) { throw ContractViolation("mpc: r_min must be > 0 to derive the horizon"); }
    return static_cast<std::size_t>(std::ceil(static_cast<double>(cfg.m) / cfg.r_min));
  }

  void validate(const SystemConfig& cfg) const
  {
    if (resolved_horizon(cfg) < 2) { throw ContractViolation("mpc.horizon must be >= 2"); }
    if (!(armijo_c1 > 0.0 && armijo_c1 < 1.0)) { throw ContractViolation("mpc.armijo_c1 must be in (0,1)"); }
    if (!(backtrack_factor > 0.0 && backtrack_factor < 1.0)) { throw ContractViolation("mpc.backtrack_factor must be in (0,1)"); }
    if (!(fd_epsilon > 0.0)) { throw ContractViolation("mpc.fd_epsilon must be > 0"); }
    if (!(mixed_price >= 0.0)) { throw ContractViolation("mpc.mixed_price must be >= 0"); }
    for (const auto& mat : cfg.materials) {
      if (mixed_price > mat.price) { throw ContractViolation("mpc.mixed_price must not exceed any material price"); }
    }
  }
};

struct ControlSequence
{
  Vector u;
};

enum class StopReason { grad_tol, max_iters, no_progress };

inline const char* to_string(StopReason r)
{
  switch (r) {
    case StopReason::grad_tol: return "grad_tol";
    case StopReason::max_iters: return "max_iters";
    case StopReason::no_progress: return "no_progress";
  }
  return "?";
}

struct SolverReport
{
  std::size_t iterations{0};
  double objective{0.0};
  double grad_norm{0.0};
  std::size_t backtracks_total{0};
  StopReason reason{StopReason::grad_tol};
  /// Objective at the initial point and after every accepted iterate.
  std::vector<double> history;

  bool converged() const noexcept { return reason == StopReason::grad_tol; }
};

struct ValueMatrices
{
  Vector V;
  Vector O;
};

/// V_(i,j) = price_i * p_ij and O_(i,j) = price_i * (1 - p_ij); zero on speed.
inline ValueMatrices value_matrices(const StateVector& state, const SystemConfig& cfg)
{
  const auto N = static_cast<Eigen::Index>(cfg.state_size());
  ValueMatrices out{Vector::Zero(N), Vector::Zero(N)};
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const double rho = cfg.materials[i].price;
    Vector p = Vector::Ones(static_cast<Eigen::Index>(cfg.m));
    if (const auto* st = cfg.station_for(i)) { p = separation_params(state, *st).p; }
    const auto off = static_cast<Eigen::Index>(i * cfg.m);
    out.V.segment(off, p.size()) = rho * p;
    out.O.segment(off, p.size()) = rho * (Vector::Ones(p.size()) - p);
  }
  return out;
}

/// [V - O] x evaluated with V, O taken at x.
inline double literal_value(const StateVector& state, const SystemConfig& cfg)
{
  const auto vm = value_matrices(state, cfg);
  return (vm.V - vm.O).dot(state.data());
}

/// Money realized by one step: sorted mass at its price, minus the premium
/// forfeited by unsorted mass sold as mixed.
inline double prose_reward(const StepOutcome& outcome, const SystemConfig& cfg, double mixed_price)
{
  double r = 0.0;
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const double rho = cfg.materials[i].price;
    r += rho * outcome.picked[i] - (rho - mixed_price) * outcome.exited[i];
  }
  return r;
}

/**
 * Reward credited to one step of the horizon. Literal accounting evaluates
 * [V - O] X at the state the step lands in; prose accounting ignores
 * `state_before`.
 */
inline double stage_reward(const StepOutcome& outcome, const StateVector& state_before, const SystemConfig& cfg,
                           Accounting mode, double mixed_price)
{
  (void)state_before;
  switch (mode) {
    case Accounting::prose: return prose_reward(outcome, cfg, mixed_price);
    case Accounting::literal: return literal_value(outcome.next, cfg);
  }
  throw ContractViolation("stage_reward: unknown accounting mode");
}

enum class InfeedCoupling {
  belt,  ///< rates are mass per volume of belt travel; infeed = rate * r
  time   ///< rates are mass per timestep, independent of speed
};

/// Per-step infeed rates over a horizon. Steps beyond the end contribute nothing.
struct InfeedForecast
{
  std::vector<std::vector<double>> rates;
  InfeedCoupling coupling{InfeedCoupling::belt};

  void mass_at(std::size_t l, double speed, std::span<double> out) const
  {
    if (l >= rates.size()) {
      std::fill(out.begin(), out.end(), 0.0);
      return;
    }
    const double scale = coupling == InfeedCoupling::belt ? speed : 1.0;
    for (std::size_t i = 0; i < out.size(); ++i) { out[i] = rates[l][i] * scale; }
  }
};

/// Per-component bounds on the decision vector.
struct Bounds
{
  Vector lo;
  Vector hi;
};

namespace detail {

/// Gradient of the minimized function with components blocked by active bounds zeroed.
inline Vector projected_gradient(const Vector& u, const Vector& g, const Bounds& b)
{
  Vector pg = g;
  for (Eigen::Index l = 0; l < u.size(); ++l) {
    if ((u[l] <= b.lo[l] && g[l] > 0.0) || (u[l] >= b.hi[l] && g[l] < 0.0)) { pg[l] = 0.0; }
  }
  return pg;
}

/// Central differences inside [lo, hi], one-sided within `eps` of either end.
/// `eval(l, v)` returns the objective with u_l replaced by v.
template <class Eval>
Vector fd_stencil(const Vector& u, double J0, const Bounds& b, double eps, Eval&& eval)
{
  Vector g(u.size());
  for (Eigen::Index l = 0; l < u.size(); ++l) {
    const double ul = u[l];
    const auto li = static_cast<std::size_t>(l);
    if (ul + eps > b.hi[l]) {
      g[l] = (J0 - eval(li, ul - eps)) / eps;
    } else if (ul - eps < b.lo[l]) {
      g[l] = (eval(li, ul + eps) - J0) / eps;
    } else {
      g[l] = (eval(li, ul + eps) - eval(li, ul - eps)) / (2.0 * eps);
    }
  }
  return g;
}

}  // namespace detail

/**
 * Finite-horizon rollout of the LCV model from a fixed initial state. Holds
 * everything the objective depends on except the controls.
 *
 * Besides the box [u_min, u_max], a control u_l is only effective while the
 * speed it produces stays in [r_min, r_max]; past that the step clamps the
 * speed and the objective goes flat. `bounds(u)` reports the intersection of
 * both limits given the speeds u produces, and `project(u)` clips u in step
 * order so that no clamp is ever hit.
 */
class HorizonProblem
{
 public:
  HorizonProblem(StateVector x0, InfeedForecast forecast, const SystemConfig& cfg, const MpcConfig& mpc)
      : x0_(std::move(x0)), forecast_(std::move(forecast)), cfg_(&cfg), mpc_(&mpc), T_(mpc.resolved_horizon(cfg))
  {
  }

  /// Number of decision variables, T - 1.
  std::size_t dim() const noexcept { return T_ - 1; }

  double objective(const Vector& u) const
  {
    check(u);
    double acc = initial_term();
    StateVector x = x0_;
    for (std::size_t l = 0; l < dim(); ++l) { advance(x, u[static_cast<Eigen::Index>(l)], l, acc); }
    return acc;
  }

  Bounds bounds(const Vector& u) const
  {
    const auto d = static_cast<Eigen::Index>(dim());
    Bounds b{Vector(d), Vector(d)};
    double r = x0_.speed();
    for (Eigen::Index l = 0; l < d; ++l) {
      b.lo[l] = std::min(0.0, std::max(cfg_->u_min, cfg_->r_min - r));
      b.hi[l] = std::max(0.0, std::min(cfg_->u_max, cfg_->r_max - r));
      r = std::clamp(r + u[l], cfg_->r_min, cfg_->r_max);
    }
    return b;
  }

  Vector project(Vector u) const
  {
    double r = x0_.speed();
    for (Eigen::Index l = 0; l < u.size(); ++l) {
      const double lo = std::min(0.0, std::max(cfg_->u_min, cfg_->r_min - r));
      const double hi = std::max(0.0, std::min(cfg_->u_max, cfg_->r_max - r));
      u[l] = std::clamp(u[l], lo, hi);
      r = std::clamp(r + u[l], cfg_->r_min, cfg_->r_max);
    }
    return u;
  }

  /**
   * Finite-difference gradient, central inside `bounds(u)` and one-sided
   * within `fd_epsilon` of them. A perturbation of u_l leaves the first l
   * steps untouched, so those are replayed from a cached trajectory; results
   * match a from-scratch rollout bit for bit.
   */
  Vector gradient(const Vector& u) const
  {
    check(u);
    const std::size_t d = dim();
    std::vector<StateVector> xs;
    std::vector<double> accs;
    xs.reserve(d + 1);
    accs.reserve(d + 1);
    double acc = initial_term();
    StateVector x = x0_;
    for (std::size_t l = 0; l < d; ++l) {
      xs.push_back(x);
      accs.push_back(acc);
      advance(x, u[static_cast<Eigen::Index>(l)], l, acc);
    }
    const double J0 = acc;

    auto perturbed = [&](std::size_t l, double ul) {
      double a = accs[l];
      StateVector y = xs[l];
      advance(y, ul, l, a);
      for (std::size_t k = l + 1; k < d; ++k) { advance(y, u[static_cast<Eigen::Index>(k)], k, a); }
      return a;
    };
    return detail::fd_stencil(u, J0, bounds(u), mpc_->fd_epsilon, perturbed);
  }

  const SystemConfig& config() const noexcept { return *cfg_; }
  const MpcConfig& mpc() const noexcept { return *mpc_; }
  const StateVector& initial_state() const noexcept { return x0_; }

 private:
  void check(const Vector& u) const
  {
    if (static_cast<std::size_t>(u.size()) != dim()) { throw ContractViolation("rollout: control length must be T-1"); }
    for (Eigen::Index l = 0; l < u.size(); ++l) {
      if (!(u[l] >= cfg_->u_min && u[l] <= cfg_->u_max)) { throw ContractViolation("rollout: control outside bounds"); }
    }
  }

  double initial_term() const
  {
    return mpc_->accounting == Accounting::literal ? literal_value(x0_, *cfg_) : 0.0;
  }

  void advance(StateVector& x, double ul, std::size_t l, double& acc) const
  {
    infeed_.resize(cfg_->n);
    forecast_.mass_at(l, x.speed(), infeed_);
    detail::step_into(x, ul, *cfg_, std::span<const double>(infeed_), scratch_);
    acc += stage_reward(scratch_, x, *cfg_, mpc_->accounting, mpc_->mixed_price);
    std::swap(x, scratch_.next);
  }

  StateVector x0_;
  InfeedForecast forecast_;
  const SystemConfig* cfg_;
  const MpcConfig* mpc_;
  std::size_t T_;
  mutable std::vector<double> infeed_;
  mutable StepOutcome scratch_;
};

inline double rollout_objective(const StateVector& x0, const ControlSequence& u, const InfeedForecast& forecast,
                                const SystemConfig& cfg, const MpcConfig& mpc)
{
  return HorizonProblem(x0, forecast, cfg, mpc).objective(u.u);
}

/// Finite-difference gradient of an arbitrary objective over the box [lo, hi]^d.
inline Vector gradient_fd(const std::function<double(const Vector&)>& J, const Vector& u, double lo, double hi, double eps)
{
  const double J0 = J(u);
  Vector work = u;
  const Bounds b{Vector::Constant(u.size(), lo), Vector::Constant(u.size(), hi)};
  return detail::fd_stencil(u, J0, b, eps, [&](std::size_t l, double v) {
    const auto li = static_cast<Eigen::Index>(l);
    work[li] = v;
    const double r = J(work);
    work[li] = u[li];
    return r;
  });
}

inline Vector gradient_fd(const StateVector& x0, const ControlSequence& u, const InfeedForecast& forecast,
                          const SystemConfig& cfg, const MpcConfig& mpc)
{
  return HorizonProblem(x0, forecast, cfg, mpc).gradient(u.u);
}

/// Objective, gradient, and feasible-set callbacks for `bfgs_maximize`.
struct SmoothProblem
{
  std::function<double(const Vector&)> value;
  std::function<Vector(const Vector&)> gradient;
  std::function<Vector(Vector)> project;
  std::function<Bounds(const Vector&)> bounds;

  /// Plain box [lo, hi]^d.
  static SmoothProblem box(std::function<double(const Vector&)> J, std::function<Vector(const Vector&)> grad,
                           std::size_t d, double lo, double hi)
  {
    const auto n = static_cast<Eigen::Index>(d);
    return SmoothProblem{
        std::move(J), std::move(grad),
        [lo, hi](Vector u) {
          for (Eigen::Index l = 0; l < u.size(); ++l) { u[l] = std::clamp(u[l], lo, hi); }
          return u;
        },
        [n, lo, hi](const Vector&) { return Bounds{Vector::Constant(n, lo), Vector::Constant(n, hi)}; }};
  }
};

/**
 * Maximize `prob.value` over its feasible set.
 *
 * Internally minimizes f = -J. Search direction is -H g with H the BFGS
 * inverse-Hessian estimate (identity at start, reset whenever the direction
 * stops being a descent direction). Trial points are projected back onto the
 * feasible set and accepted on Armijo sufficient decrease, backtracking from a
 * unit step. The update is skipped when s'y <= 1e-10.
 */
inline std::pair<Vector, SolverReport> bfgs_maximize(const SmoothProblem& prob, Vector u_init, const MpcConfig& opt)
{
  SolverReport rep;
  Vector u = prob.project(std::move(u_init));
  double f = -prob.value(u);
  rep.history.push_back(-f);
  if (!std::isfinite(f)) {
    rep.reason = StopReason::no_progress;
    rep.objective = -f;
    return {u, rep};
  }
  Vector g = -prob.gradient(u);
  const auto d = u.size();
  Matrix H = Matrix::Identity(d, d);

  std::optional<StopReason> reason;
  while (!reason) {
    const Bounds b = prob.bounds(u);
    const Vector pg = detail::projected_gradient(u, g, b);
    rep.grad_norm = d > 0 ? pg.lpNorm<Eigen::Infinity>() : 0.0;
    if (rep.grad_norm <= opt.grad_tol) {
      reason = StopReason::grad_tol;
      break;
    }
    if (rep.iterations >= opt.max_iters) {
      reason = StopReason::max_iters;
      break;
    }

    Vector dir = -(H * g);
    for (Eigen::Index l = 0; l < d; ++l) {
      if ((u[l] <= b.lo[l] && dir[l] < 0.0) || (u[l] >= b.hi[l] && dir[l] > 0.0)) { dir[l] = 0.0; }
    }
    if (!(g.dot(dir) < 0.0)) {
      H.setIdentity();
      dir = -pg;
    }

    double alpha = 1.0;
    bool accepted = false;
    Vector trial;
    double f_trial = f;
    for (std::size_t k = 0; k <= opt.max_backtracks; ++k) {
      if (k > 0) {
        alpha *= opt.backtrack_factor;
        ++rep.backtracks_total;
      }
      trial = prob.project(u + alpha * dir);
      const double gs = g.dot(trial - u);
      if (!(gs < 0.0)) { continue; }
      f_trial = -prob.value(trial);
      if (!std::isfinite(f_trial)) {
        reason = StopReason::no_progress;
        break;
      }
      if (f_trial <= f + opt.armijo_c1 * gs) {
        accepted = true;
        break;
      }
    }
    if (reason) { break; }
    if (!accepted) {
      reason = StopReason::no_progress;
      break;
    }

    const Vector g_new = -prob.gradient(trial);
    const Vector s = trial - u;
    const Vector y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-10 * s.norm() * y.norm()) {
      const double rho = 1.0 / sy;
      const Vector Hy = H * y;
      const double yHy = y.dot(Hy);
      // H+ = (I - rho s y^T) H (I - rho y s^T) + rho s s^T, expanded.
      H += (rho * rho * yHy + rho) * (s * s.transpose()) - rho * (Hy * s.transpose() + s * Hy.transpose());
    }
    u = std::move(trial);
    f = f_trial;
    g = g_new;
    ++rep.iterations;
    rep.history.push_back(-f);
  }
  rep.reason = *reason;
  rep.objective = -f;
  return {u, rep};
}

inline std::pair<ControlSequence, SolverReport> bfgs_solve(const HorizonProblem& problem, const ControlSequence& u_init)
{
  SmoothProblem sp{[&](const Vector& v) { return problem.objective(v); },
                   [&](const Vector& v) { return problem.gradient(v); },
                   [&](Vector v) { return problem.project(std::move(v)); },
                   [&](const Vector& v) { return problem.bounds(v); }};
  auto [u, rep] = bfgs_maximize(sp, u_init.u, problem.mpc());
  return {ControlSequence{std::move(u)}, std::move(rep)};
}

inline std::pair<ControlSequence, SolverReport> bfgs_solve(const StateVector& x0, const ControlSequence& u_init,
                                                           const InfeedForecast& forecast, const SystemConfig& cfg,
                                                           const MpcConfig& mpc)
{
  return bfgs_solve(HorizonProblem(x0, forecast, cfg, mpc), u_init);
}

/// Previous plan shifted left one step, last entry repeated; zeros when absent.
inline ControlSequence shift_warm_start(const std::optional<ControlSequence>& previous, std::size_t dim)
{
  ControlSequence out{Vector::Zero(static_cast<Eigen::Index>(dim))};
  if (!previous || previous->u.size() == 0) { return out; }
  const auto& p = previous->u;
  for (Eigen::Index l = 0; l < out.u.size(); ++l) {
    const Eigen::Index src = std::min<Eigen::Index>(l + 1, p.size() - 1);
    out.u[l] = p[src];
  }
  return out;
}

struct MpcDecision
{
  /// Speed change to apply now.
  double u{0.0};
  /// Full optimized plan; pass back as `previous` on the next call.
  ControlSequence plan;
  SolverReport report;
};

inline MpcDecision mpc_step(const StateVector& estimate, const std::optional<ControlSequence>& previous,
                            const InfeedForecast& forecast, const SystemConfig& cfg, const MpcConfig& mpc)
{
  const HorizonProblem problem(estimate, forecast, cfg, mpc);
  auto [plan, rep] = bfgs_solve(problem, shift_warm_start(previous, problem.dim()));
  MpcDecision out;
  out.u = plan.u.size() > 0 ? plan.u[0] : 0.0;
  out.plan = std::move(plan);
  out.report = std::move(rep);
  return out;
}

}  // namespace lcv
