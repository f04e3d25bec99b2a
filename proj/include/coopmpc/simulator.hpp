#pragma once

// Closed-loop lane-change runs: feasibility gating, the waiting-adjusting
// loop, execution of the re-planned cubic, bi-lane chaining and run metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string_view>

#include "coopmpc/core_model.hpp"
#include "coopmpc/mpc_controller.hpp"
#include "coopmpc/trajectory_planner.hpp"

namespace coopmpc {

struct SimConfig {
  SafetyParams params;
  MpcConfig mpc;
  LayoutParams layout;
  double lc_duration{4.0};     ///< planned duration of one lane change [s]
  double wait_budget{2.0};     ///< longest the CAV waits for a gap [s]
  double completion_tol{0.05}; ///< lateral error that ends a lane change [m]
  double end_margin{0.1};      ///< strict-inequality margin for the end position [m]
  double max_lc_time{20.0};    ///< give up on a maneuver that runs this long [s]

  void validate() const {
    params.validate();
    mpc.validate();
    if (!(lc_duration > 0.0)) throw std::invalid_argument("SimConfig: lc_duration must be positive");
    if (!(wait_budget >= 0.0)) throw std::invalid_argument("SimConfig: wait_budget must be >= 0");
    if (!(completion_tol > 0.0)) throw std::invalid_argument("SimConfig: completion_tol must be positive");
  }

  int wait_budget_steps() const {
    return static_cast<int>(std::floor(wait_budget / params.tau + 1e-9));
  }
};

struct RunResult {
  bool initially_feasible{false};
  bool started{false};
  bool started_after_wait{false};
  bool completed{false};
  bool aborted{false};
  bool collision{false};
  int wait_steps{0};
  int lc_steps{0};
  int infeasible_control_steps{0};
  int committed_replans{0};  ///< execution steps planned without an open window
  double total_time{0.0};
  double min_clearance{std::numeric_limits<double>::infinity()};
  /// CAV <-> near CHDV centre gap, tracked while the maneuver executes.
  double min_longitudinal_gap_near{std::numeric_limits<double>::infinity()};
  /// near <-> far CHDV centre gap over the whole run.
  double min_longitudinal_gap_far{std::numeric_limits<double>::infinity()};
  VehicleState cav_exit;

  friend bool operator==(const RunResult&, const RunResult&) = default;
};

struct BiLaneResult {
  RunResult first;
  RunResult second;
  double total_time{0.0};
  bool efficient{false};
  bool completed{false};

  static constexpr double kEfficientTime = 10.0;
};

enum class Phase : std::uint8_t { Waiting, Executing, Done };

inline std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::Waiting: return "waiting";
    case Phase::Executing: return "executing";
    case Phase::Done: return "done";
  }
  return "?";
}

/// One record per simulated step, emitted after the step is applied.
struct StepRecord {
  int stage{1};
  int step{0};
  double time{0.0};
  Phase phase{Phase::Waiting};
  Fleet fleet;
  std::array<double, 4> u{};      // kChdvRoles order
  std::array<double, 4> delta{};  // first slack of each decision
  double cav_accel{0.0};
  double min_clearance{0.0};
  bool control_feasible{true};
  std::array<bool, 4> fallback{};  // kChdvRoles order: QP needed softening
};

using TraceSink = std::function<void(const StepRecord&)>;

/// Lateral geometry of one lane change.
struct LaneFrame {
  double source{0.0};
  double target{0.0};

  double direction() const { return target >= source ? 1.0 : -1.0; }
};

/// Everything the planner needs from the current state.
inline PlanRequest make_plan_request(const VehicleState& cav, double cav_slope, const LaneFrame& lane,
                                     double horizon, double end_margin) {
  PlanRequest req;
  req.theta_i = std::atan(lane.direction() * cav_slope);
  req.y_e = std::abs(lane.target - cav.y);
  req.horizon = horizon;
  req.preferred_end = std::max(cav.v, 0.0) * horizon;
  req.end_margin = end_margin;
  return req;
}

inline std::optional<CubicPlan> plan_for(const Fleet& fleet, double cav_slope, const LaneFrame& lane,
                                         double horizon, const SimConfig& cfg) {
  const auto& cav = fleet[Role::TCAV];
  const PlanRequest req = make_plan_request(cav, cav_slope, lane, horizon, cfg.end_margin);
  if (!(req.y_e > 0.0)) return std::nullopt;
  const auto window =
      future_end_positions(fleet[Role::FHDV_near], fleet[Role::PHDV_near], horizon, cfg.params);
  return plan_step(cav, window, cfg.params, req);
}

/// True iff the planner finds an admissible end position for a fresh maneuver.
inline bool check_initial_feasibility(const Fleet& fleet, const LaneFrame& lane, double T_lc,
                                      const SimConfig& cfg) {
  return plan_for(fleet, 0.0, lane, T_lc, cfg).has_value();
}

/// The CAV is at least l1 clear of both near CHDVs, with extra room for
/// any closing speed to be braked away at d_max.
inline bool near_gaps_clear(const Fleet& fleet, const SafetyParams& p) {
  const auto& cav = fleet[Role::TCAV];
  const auto& f = fleet[Role::FHDV_near];
  const auto& ph = fleet[Role::PHDV_near];
  auto room = [&](double closing) {
    const double c = std::max(closing, 0.0);
    return p.l1 + c * c / (2.0 * -p.d_max);
  };
  return cav.x - f.x >= room(f.v - cav.v) && ph.x - cav.x >= room(cav.v - ph.v);
}

struct AdvanceResult {
  Fleet fleet;
  double cav_slope{0.0};  ///< road-frame dy/dx of the CAV after the step
};

namespace detail {

inline void integrate(VehicleState& s, double a, double tau) {
  if (s.v + a * tau < 0.0) a = -s.v / tau;
  s.x += s.v * tau + 0.5 * a * tau * tau;
  s.v += a * tau;
  s.a = a;
}

}  // namespace detail

/// Applies u(0) of every CHDV decision and moves the CAV along its plan
/// (holding speed in its lane when there is none). Speeds never go negative.
inline AdvanceResult advance(const Fleet& fleet, const StepDecisions& decisions,
                             const std::optional<CubicPlan>& plan, const LaneFrame& lane,
                             const SafetyParams& p) {
  AdvanceResult out{fleet, 0.0};
  for (Role r : kChdvRoles) detail::integrate(out.fleet[r], decisions[r].applied(), p.tau);

  VehicleState& cav = out.fleet[Role::TCAV];
  if (!plan) {
    detail::integrate(cav, 0.0, p.tau);
    return out;
  }
  const double x0 = cav.x;
  const double y0 = cav.y;
  detail::integrate(cav, std::clamp(plan->a_long, p.d_max, p.a_max_L), p.tau);
  const double dx = cav.x - x0;
  const double dir = lane.direction();
  if (dx >= plan->x_e) {
    cav.y = y0 + dir * plan->y_e;
    out.cav_slope = 0.0;
  } else {
    cav.y = plan->to_road(dx, y0, dir);
    out.cav_slope = -dir * plan->slope(dx);
  }
  return out;
}

/// Smallest disc clearance over the pairs that can conflict.
///
/// CHDV pairs share a lane and are always checked. Lane width is below
/// 2 R_buf, so adjacent-lane neighbours driving side by side would register
/// as overlapping discs; pairs involving the CAV are therefore only checked
/// while it is changing lanes (`with_cav`).
inline double min_pair_clearance(const Fleet& f, double R_buf, bool with_cav = true) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = with_cav ? 0 : 1; i < kNumRoles; ++i)
    for (std::size_t j = i + 1; j < kNumRoles; ++j)
      best = std::min(best, disc_clearance(f.s[i], f.s[j], R_buf));
  return best;
}

/// Single lane change under the waiting-adjusting strategy.
///
/// While no admissible end position exists the CAV holds its speed and the
/// CHDVs keep running their MPC against the hold-speed reference. Once the
/// planner succeeds the CAV re-plans every step over the remaining maneuver
/// time until it is within completion_tol of the target lane centre.
inline RunResult run_lane_change(const Scenario& sc, const SimConfig& cfg,
                                 const TraceSink& trace = {}, int stage = 1) {
  cfg.validate();
  const SafetyParams& p = cfg.params;
  const LaneFrame lane{sc.lane_source, sc.lane_target};
  const int budget = cfg.wait_budget_steps();
  const int max_lc_steps = static_cast<int>(std::ceil(cfg.max_lc_time / p.tau));

  RunResult res;
  Fleet fleet = sc.fleet;
  double cav_slope = 0.0;
  Phase phase = Phase::Waiting;
  int step = 0;

  auto near_gap = [](const Fleet& f) {
    return std::min(f[Role::TCAV].x - f[Role::FHDV_near].x, f[Role::PHDV_near].x - f[Role::TCAV].x);
  };
  auto far_gap = [](const Fleet& f) {
    return std::min(f[Role::FHDV_near].x - f[Role::FHDV_far].x,
                    f[Role::PHDV_far].x - f[Role::PHDV_near].x);
  };
  auto observe = [&](const Fleet& f) {
    const double c = min_pair_clearance(f, p.R_buf, phase == Phase::Executing);
    res.min_clearance = std::min(res.min_clearance, c);
    if (c <= 0.0) res.collision = true;
    res.min_longitudinal_gap_far = std::min(res.min_longitudinal_gap_far, far_gap(f));
    if (phase == Phase::Executing)
      res.min_longitudinal_gap_near = std::min(res.min_longitudinal_gap_near, near_gap(f));
    return c;
  };
  observe(fleet);

  auto controls_for = [&](const std::optional<CubicPlan>& plan) {
    const auto& cav = fleet[Role::TCAV];
    const auto ref = plan ? reference_horizon(*plan, cav, cfg.mpc.Np, p.tau, p, cav.y, lane.direction())
                          : hold_speed_horizon(cav, cfg.mpc.Np, p.tau);
    return step_controller(fleet, ref, sc.coop, cfg.mpc, p, plan.has_value());
  };

  while (true) {
    std::optional<CubicPlan> plan;
    std::optional<StepDecisions> dec;
    if (phase == Phase::Waiting) {
      // Start only when the planner has an end position, the CAV is clear of
      // both near CHDVs and every CHDV problem is feasible under the plan.
      plan = plan_for(fleet, cav_slope, lane, cfg.lc_duration, cfg);
      if (plan && !near_gaps_clear(fleet, p)) plan.reset();
      if (plan) {
        dec = controls_for(plan);
        if (!dec->feasible) {
          plan.reset();
          dec.reset();
        }
      }
      if (step == 0) res.initially_feasible = plan.has_value();
      if (plan) {
        phase = Phase::Executing;
        res.started = true;
        res.started_after_wait = res.wait_steps > 0;
      } else if (res.wait_steps >= budget) {
        res.aborted = true;
        break;
      }
    } else {
      const double remaining = std::max(cfg.lc_duration - res.lc_steps * p.tau, p.tau);
      plan = plan_for(fleet, cav_slope, lane, remaining, cfg);
      if (!plan) {
        // Committed: finish the maneuver, still keeping behind the preceding
        // vehicle's projected end position where the rollover bound allows.
        ++res.committed_replans;
        const auto& cav = fleet[Role::TCAV];
        PlanRequest req = make_plan_request(cav, cav_slope, lane, remaining, cfg.end_margin);
        const auto window =
            future_end_positions(fleet[Role::FHDV_near], fleet[Role::PHDV_near], remaining, p);
        req.preferred_end = std::min(*req.preferred_end, window.upper - cav.x - cfg.end_margin);
        plan = plan_rollover_only(cav, p, req);
      }
    }

    if (!dec) dec = controls_for(plan);
    if (!dec->feasible) ++res.infeasible_control_steps;

    const AdvanceResult next = advance(fleet, *dec, plan, lane, p);
    fleet = next.fleet;
    cav_slope = next.cav_slope;
    ++step;
    if (phase == Phase::Executing) ++res.lc_steps;
    else ++res.wait_steps;

    const bool done = phase == Phase::Executing &&
                      std::abs(fleet[Role::TCAV].y - lane.target) <= cfg.completion_tol;
    const double clearance = observe(fleet);

    if (trace) {
      StepRecord rec;
      rec.stage = stage;
      rec.step = step;
      rec.time = step * p.tau;
      rec.phase = done ? Phase::Done : phase;
      rec.fleet = fleet;
      for (std::size_t k = 0; k < kChdvRoles.size(); ++k) {
        rec.u[k] = dec->by_role[k].applied();
        rec.delta[k] = dec->by_role[k].delta[0];
        rec.fallback[k] = dec->by_role[k].fallback;
      }
      rec.cav_accel = fleet[Role::TCAV].a;
      rec.min_clearance = clearance;
      rec.control_feasible = dec->feasible;
      trace(rec);
    }

    if (done) {
      res.completed = true;
      break;
    }
    if (phase == Phase::Executing && res.lc_steps >= max_lc_steps) {
      res.aborted = true;
      break;
    }
  }

  res.total_time = (res.wait_steps + res.lc_steps) * p.tau;
  res.cav_exit = fleet[Role::TCAV];
  return res;
}

/// Two consecutive lane changes, each against its own cohort of four CHDVs.
struct BiLaneScenario {
  Scenario first;
  CoopAssignment second_coop;
  std::array<double, 4> second_speeds{};  ///< kChdvRoles order [m/s]
};

/// splitmix64 finaliser; used to derive independent sub-seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline BiLaneScenario build_bilane_scenario(double mu_mph, double sigma_mph,
                                            const CoopAssignment& first, const CoopAssignment& second,
                                            std::uint64_t seed, const SafetyParams& p = {},
                                            const LayoutParams& layout = {}) {
  BiLaneScenario bi;
  bi.first = build_scenario(mu_mph, sigma_mph, first, seed, p, layout);
  bi.second_coop = second;
  SpeedSampler rng(mix_seed(seed));
  for (auto& v : bi.second_speeds) v = rng.speed_mps(mu_mph, sigma_mph);
  return bi;
}

/// Second-stage scenario around the CAV's exit state, one lane further over.
inline Scenario second_stage(const BiLaneScenario& bi, const VehicleState& cav_exit,
                             const SafetyParams& p, const LayoutParams& layout) {
  Scenario sc;
  sc.coop = bi.second_coop;
  sc.seed = bi.first.seed;
  const double dir = bi.first.lane_target >= bi.first.lane_source ? 1.0 : -1.0;
  sc.lane_source = bi.first.lane_target;
  sc.lane_target = bi.first.lane_target + dir * p.l_w;
  sc.fleet[Role::TCAV] = cav_exit;
  sc.fleet[Role::TCAV].y = sc.lane_source;
  sc.fleet[Role::TCAV].a = 0.0;
  for (std::size_t k = 0; k < kChdvRoles.size(); ++k) sc.fleet[kChdvRoles[k]].v = bi.second_speeds[k];
  detail::place_cohort(sc.fleet, cav_exit.x, sc.lane_target, p, layout);
  return sc;
}

inline BiLaneResult run_bi_lane_change(const BiLaneScenario& bi, const SimConfig& cfg,
                                       const TraceSink& trace = {}) {
  BiLaneResult out;
  out.first = run_lane_change(bi.first, cfg, trace, 1);
  out.total_time = out.first.total_time;
  if (!out.first.completed) return out;

  out.second = run_lane_change(second_stage(bi, out.first.cav_exit, cfg.params, cfg.layout), cfg,
                               trace, 2);
  out.total_time += out.second.total_time;
  out.completed = out.second.completed;
  out.efficient = out.completed && out.total_time <= BiLaneResult::kEfficientTime;
  return out;
}

}  // namespace coopmpc
