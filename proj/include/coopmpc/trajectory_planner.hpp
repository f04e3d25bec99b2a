#pragma once

// Per-step lane-change planning for the CAV: rollover-free end position,
// cubic lateral path, end-position selection against the near CHDVs and the
// longitudinal speed plan.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "coopmpc/core_model.hpp"

namespace coopmpc {

/// Cubic lateral path y(x) = c1 x + c2 x^2 + c3 x^3 in the plan's local frame.
///
/// The local frame has its origin at the CAV and follows the printed sign
/// convention: y(x_e) = -y_e. Callers map it onto the road with the lane-change
/// direction (see `to_road`).
struct CubicPlan {
  double theta_i{0.0};
  double x_e{0.0};
  double y_e{0.0};
  double c1{0.0};
  double c2{0.0};
  double c3{0.0};
  double a_long{0.0};
  double u_i{0.0};

  double lateral(double x) const { return ((c3 * x + c2) * x + c1) * x; }
  double slope(double x) const { return (3.0 * c3 * x + 2.0 * c2) * x + c1; }
  double curvature(double x) const { return 6.0 * c3 * x + 2.0 * c2; }

  /// Lateral road coordinate at local longitudinal offset x, clamped to the end point.
  double to_road(double x, double y_origin, double direction) const {
    const double xc = std::clamp(x, 0.0, x_e);
    return y_origin - direction * lateral(xc);
  }
};

/// Open interval of admissible CAV end positions (absolute, CAV-centre coordinates).
struct EndPositionWindow {
  double lower{0.0};
  double upper{0.0};

  bool empty() const { return !(lower < upper); }
  bool contains(double x) const { return lower < x && x < upper; }
};

/// Minimum rollover-safe longitudinal end position.
inline double rollover_free_end(double u_i, double y_e, double a_s_r) {
  if (!(y_e > 0.0)) throw std::invalid_argument("rollover_free_end: y_e must be positive");
  if (!(a_s_r > 0.0)) throw std::invalid_argument("rollover_free_end: a_s_r must be positive");
  if (!(u_i >= 0.0)) throw std::invalid_argument("rollover_free_end: u_i must be non-negative");
  return 6.0 * y_e * u_i / std::sqrt(6.0 * y_e * a_s_r);
}

inline CubicPlan fit_cubic(double theta_i, double x_e, double y_e) {
  if (!(x_e > 0.0)) throw std::invalid_argument("fit_cubic: x_e must be positive");
  const double t = std::tan(theta_i);
  CubicPlan c;
  c.theta_i = theta_i;
  c.x_e = x_e;
  c.y_e = y_e;
  c.c1 = -t;
  c.c2 = (2.0 * x_e * t - 3.0 * y_e) / (x_e * x_e);
  c.c3 = (2.0 * y_e - x_e * t) / (x_e * x_e * x_e);
  return c;
}

/// Constant acceleration that covers x_target in time T, capped at a_max_L.
inline double longitudinal_accel(double u_i, double x_target, double T, double a_max_L) {
  if (!(T > 0.0)) throw std::invalid_argument("longitudinal_accel: T must be positive");
  const double raw = 2.0 * (x_target - u_i * T) / (T * T);
  return std::min(raw, a_max_L);
}

/// Constant-velocity projection of the near CHDVs over T_lc, shrunk by the
/// CAV/CHDV spacing requirement on both sides.
inline EndPositionWindow future_end_positions(const VehicleState& fhdv, const VehicleState& phdv,
                                              double T_lc, double l1, double l_v) {
  if (!(T_lc > 0.0)) throw std::invalid_argument("future_end_positions: T_lc must be positive");
  const double e_fhdv = fhdv.x + fhdv.v * T_lc;
  const double e_phdv = phdv.x + phdv.v * T_lc;
  return {e_fhdv + l1 + l_v, e_phdv - l1 - l_v};
}

inline EndPositionWindow future_end_positions(const VehicleState& fhdv, const VehicleState& phdv,
                                              double T_lc, const SafetyParams& p) {
  return future_end_positions(fhdv, phdv, T_lc, p.l1, p.l_v);
}

struct PlanRequest {
  double theta_i{0.0};  ///< current course angle towards the target lane [rad]
  double y_e{0.0};      ///< remaining lateral distance (magnitude) [m]
  /// Remaining maneuver duration for the acceleration rule. Non-positive
  /// means "use the rollover time x_f / u_i".
  double horizon{0.0};
  /// End position (relative to the CAV) to aim for when several are
  /// admissible. Unset selects the smallest admissible one.
  std::optional<double> preferred_end;
  double end_margin{0.1};  ///< strict-inequality margin on every bound [m]
};

/// One planning step: returns the lane-change plan, or nullopt when no
/// admissible end position exists.
inline std::optional<CubicPlan> plan_step(const VehicleState& cav, const EndPositionWindow& window,
                                          const SafetyParams& p, const PlanRequest& req) {
  if (!(req.y_e > 0.0)) throw std::invalid_argument("plan_step: remaining lateral distance must be positive");
  const double eps = req.end_margin;
  const double u = std::max(cav.v, 0.0);
  const double x_f = rollover_free_end(u, req.y_e, p.a_s_r);

  const double lo = std::max({x_f, window.lower - cav.x, 0.0}) + eps;
  const double hi = window.upper - cav.x - eps;
  if (!(lo <= hi)) return std::nullopt;

  const double x_e = req.preferred_end ? std::clamp(*req.preferred_end, lo, hi) : lo;

  double T = req.horizon;
  if (!(T > 0.0)) T = u > 0.0 ? x_f / u : p.tau;

  CubicPlan plan = fit_cubic(req.theta_i, x_e, req.y_e);
  plan.u_i = u;
  plan.a_long = std::max(longitudinal_accel(u, x_e, T, p.a_max_L), p.d_max);
  return plan;
}

/// Plan that ignores the near CHDVs; used once a maneuver is committed.
inline CubicPlan plan_rollover_only(const VehicleState& cav, const SafetyParams& p,
                                    const PlanRequest& req) {
  return *plan_step(cav, {-std::numeric_limits<double>::infinity(),
                          std::numeric_limits<double>::infinity()},
                    p, req);
}

struct ReferencePoint {
  double x{0.0};
  double y{0.0};
  double v{0.0};
};

/// Rolls the CAV forward Np steps under the plan's acceleration along the
/// cubic. `y_origin` and `direction` map the local frame onto the road.
inline std::vector<ReferencePoint> reference_horizon(const CubicPlan& plan, const VehicleState& cav,
                                                     int Np, double tau, const SafetyParams& p,
                                                     double y_origin, double direction) {
  const double a = std::clamp(plan.a_long, p.d_max, p.a_max_L);
  std::vector<ReferencePoint> out;
  out.reserve(static_cast<std::size_t>(std::max(Np, 0)));
  double x = cav.x;
  double v = cav.v;
  for (int n = 0; n < Np; ++n) {
    const double a_eff = (v + a * tau < 0.0) ? -v / tau : a;
    x += v * tau + 0.5 * a_eff * tau * tau;
    v += a_eff * tau;
    out.push_back({x, plan.to_road(x - cav.x, y_origin, direction), v});
  }
  return out;
}

/// Reference for a CAV holding its speed in its current lane.
inline std::vector<ReferencePoint> hold_speed_horizon(const VehicleState& cav, int Np, double tau) {
  std::vector<ReferencePoint> out;
  out.reserve(static_cast<std::size_t>(std::max(Np, 0)));
  for (int n = 1; n <= Np; ++n) out.push_back({cav.x + cav.v * tau * n, cav.y, cav.v});
  return out;
}

}  // namespace coopmpc
