#pragma once

// Per-vehicle MPC problems for the four cooperating CHDVs.
//
// Decision vector of every problem: z = [u(0..Nc-1), delta(0..Nc-1)], the
// accelerations followed by the velocity slacks. Near vehicles track the CAV
// reference, far vehicles track the predicted states of their near neighbour.
// Both near problems are solved first; their predictions feed the far ones.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "coopmpc/core_model.hpp"
#include "coopmpc/prediction.hpp"
#include "coopmpc/qp_solver.hpp"
#include "coopmpc/trajectory_planner.hpp"

namespace coopmpc {

struct MpcConfig {
  int Np{5};
  int Nc{4};
  double Q{10.0};          ///< state tracking weight (position and speed)
  double R{10.0};          ///< input weight
  double P{15.0};          ///< velocity-slack weight
  double delta_max{2.0};   ///< slack bound for Inactive vehicles [m/s]
  double gap_margin{2.0};  ///< spacing kept beyond the safety distance [m]
  double disc_margin{0.01};///< keeps buffer discs strictly apart [m]
  /// Comfortable acceleration and deceleration (magnitudes) an Inactive CHDV
  /// accepts [m/s^2]; Active ones use the full [d_max, a_max] range.
  double inactive_accel{1.0};
  double inactive_decel{1.5};
  double qp_tol{1e-8};
  int qp_max_iter{200};

  void validate() const {
    if (Nc < 2) throw std::invalid_argument("MpcConfig: Nc must be >= 2");
    if (Np != Nc + 1) throw std::invalid_argument("MpcConfig: require Np == Nc + 1");
    if (!(Q >= 0.0 && R > 0.0 && P > 0.0)) throw std::invalid_argument("MpcConfig: bad weights");
    if (!(delta_max >= 0.0)) throw std::invalid_argument("MpcConfig: delta_max must be >= 0");
    if (!(inactive_accel > 0.0 && inactive_decel > 0.0))
      throw std::invalid_argument("MpcConfig: inactive_accel and inactive_decel must be positive");
  }
};

struct ControlDecision {
  Eigen::VectorXd u;          ///< Nc accelerations
  Eigen::VectorXd delta;      ///< Nc velocity slacks
  Eigen::VectorXd predicted;  ///< stacked [x; v] over Np steps
  double objective{0.0};
  qp::QpStatus status{qp::QpStatus::Infeasible};
  /// The QP had no solution; the input comes from a softened problem.
  bool fallback{false};

  double applied() const { return u[0]; }
};

enum class NearRole : std::uint8_t { Following, Preceding };
enum class FarRole : std::uint8_t { Following, Preceding };

/// Second-difference matrix C with u' C u = sum (u[i+1] - u[i])^2.
inline Eigen::MatrixXd jerk_matrix(int Nc) {
  if (Nc < 2) throw std::invalid_argument("jerk_matrix: Nc must be >= 2");
  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(Nc, Nc);
  for (int i = 0; i + 1 < Nc; ++i) {
    C(i, i) += 1.0;
    C(i + 1, i + 1) += 1.0;
    C(i, i + 1) -= 1.0;
    C(i + 1, i) -= 1.0;
  }
  return C;
}

/// What an inequality row of a horizon QP protects.
enum class RowKind : std::uint8_t { Velocity, CavSpacing, NeighbourSpacing };

/// A QP over one vehicle's horizon together with the data needed to decode it.
struct HorizonProblem {
  qp::QuadraticProgram qp;
  PredictionMatrices pred;
  Eigen::Vector2d x0;
  double objective_offset{0.0};  ///< constant part of the tracking cost
  std::vector<RowKind> row_kind;   ///< one per row of A_in
  Eigen::VectorXd physical_lb;     ///< box without comfort or secondary-collision tightening
  Eigen::VectorXd physical_ub;
};

namespace detail {

class HorizonQpBuilder {
 public:
  HorizonQpBuilder(const VehicleState& self, const MpcConfig& cfg, const SafetyParams& p)
      : cfg_(cfg),
        d_max_(p.d_max),
        a_max_(p.a_max),
        pred_(build_prediction(build_dynamics(p.tau), cfg.Np, cfg.Nc)) {
    x0_ << self.x, self.v;
    const int nc = cfg.Nc;
    const int n = 2 * nc;
    H_ = Eigen::MatrixXd::Zero(n, n);
    g_ = Eigen::VectorXd::Zero(n);
    H_.topLeftCorner(nc, nc) = 2.0 * (cfg.R * Eigen::MatrixXd::Identity(nc, nc) + jerk_matrix(nc));
    H_.bottomRightCorner(nc, nc) = 2.0 * cfg.P * Eigen::MatrixXd::Identity(nc, nc);
    lb_ = Eigen::VectorXd::Zero(n);
    ub_ = Eigen::VectorXd::Zero(n);
    lb_.head(nc).setConstant(p.d_max);
    ub_.head(nc).setConstant(p.a_max);
  }

  /// Q-weighted tracking of the stacked reference [x1 v1 ... xNp vNp].
  void track(const Eigen::VectorXd& ref) {
    const int nc = cfg_.Nc;
    const Eigen::VectorXd free = pred_.M_x * x0_ - ref;
    H_.topLeftCorner(nc, nc) += 2.0 * cfg_.Q * pred_.M_u.transpose() * pred_.M_u;
    g_.head(nc) += 2.0 * cfg_.Q * pred_.M_u.transpose() * free;
    offset_ += cfg_.Q * free.squaredNorm();
  }

  /// coef * state(step, comp) - slack_coef * delta(slack) <= rhs
  void add_row(int step, int comp, double coef, int slack, double rhs) {
    const int nc = cfg_.Nc;
    const int r = PredictionMatrices::row(step, comp);
    Eigen::RowVectorXd a = Eigen::RowVectorXd::Zero(2 * nc);
    a.head(nc) = coef * pred_.M_u.row(r);
    if (slack >= 0) a[nc + slack] = -1.0;
    rows_.push_back(a);
    rhs_.push_back(rhs - coef * pred_.M_x.row(r).dot(x0_));
    kind_.push_back(comp == 1 ? RowKind::Velocity : partner_);
  }

  /// cx * position(step) + cv * speed(step) <= rhs, a spacing row.
  void add_state_row(int step, double cx, double cv, double rhs) {
    const int nc = cfg_.Nc;
    const int rx = PredictionMatrices::row(step, 0);
    const int rv = PredictionMatrices::row(step, 1);
    Eigen::RowVectorXd a = Eigen::RowVectorXd::Zero(2 * nc);
    a.head(nc) = cx * pred_.M_u.row(rx) + cv * pred_.M_u.row(rv);
    rows_.push_back(a);
    rhs_.push_back(rhs - cx * pred_.M_x.row(rx).dot(x0_) - cv * pred_.M_x.row(rv).dot(x0_));
    kind_.push_back(partner_);
  }

  /// Terminal stopping-distance row against a vehicle whose state at Np is
  /// known: the gap must cover `gap` plus t_g times the closing speed, where
  /// t_g is the current closing speed over twice the braking capability.
  void add_terminal_gap(bool self_follows, double other_x, double other_v, double closing_now,
                        double gap) {
    const double t_g = std::max(closing_now, 0.0) / (2.0 * -d_max_);
    if (!(t_g > 0.0)) return;
    const int n = cfg_.Np;
    if (self_follows) add_state_row(n, 1.0, t_g, other_x + t_g * other_v - gap);
    else add_state_row(n, -1.0, -t_g, -other_x - t_g * other_v - gap);
  }

  /// Vehicle that the spacing rows added from now on keep clear of.
  void partner(RowKind k) { partner_ = k; }

  void tighten_input(double lo, double hi) {
    lb_.head(cfg_.Nc).array() = lb_.head(cfg_.Nc).array().max(lo);
    ub_.head(cfg_.Nc).array() = ub_.head(cfg_.Nc).array().min(hi);
  }

  void slack_bound(double hi) { ub_.tail(cfg_.Nc).setConstant(hi); }

  HorizonProblem finish() && {
    HorizonProblem hp;
    hp.qp.H = std::move(H_);
    hp.qp.g = std::move(g_);
    hp.qp.A_in.resize(static_cast<Eigen::Index>(rows_.size()), 2 * cfg_.Nc);
    hp.qp.b_in.resize(static_cast<Eigen::Index>(rows_.size()));
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      hp.qp.A_in.row(static_cast<Eigen::Index>(i)) = rows_[i];
      hp.qp.b_in[static_cast<Eigen::Index>(i)] = rhs_[i];
    }
    hp.physical_lb = lb_;
    hp.physical_ub = ub_;
    hp.physical_lb.head(cfg_.Nc).setConstant(d_max_);
    hp.physical_ub.head(cfg_.Nc).setConstant(a_max_);
    hp.qp.lb = std::move(lb_);
    hp.qp.ub = std::move(ub_);
    hp.row_kind = std::move(kind_);
    hp.pred = std::move(pred_);
    hp.x0 = x0_;
    hp.objective_offset = offset_;
    return hp;
  }

 private:
  const MpcConfig& cfg_;
  double d_max_;
  double a_max_;
  PredictionMatrices pred_;
  Eigen::Vector2d x0_;
  Eigen::MatrixXd H_;
  Eigen::VectorXd g_;
  Eigen::VectorXd lb_;
  Eigen::VectorXd ub_;
  std::vector<Eigen::RowVectorXd> rows_;
  std::vector<double> rhs_;
  std::vector<RowKind> kind_;
  RowKind partner_{RowKind::CavSpacing};
  double offset_{0.0};
};

inline double slack_cap(Cooperation coop, const MpcConfig& cfg) {
  return coop == Cooperation::Active ? 0.0 : cfg.delta_max;
}

inline void limit_inactive(HorizonQpBuilder& b, Cooperation coop, const MpcConfig& cfg) {
  if (coop == Cooperation::Inactive) b.tighten_input(-cfg.inactive_decel, cfg.inactive_accel);
}

}  // namespace detail

/// Spacing a near CHDV keeps to the CAV: the planner's end-position margin
/// (l1 + l_v) plus gap_margin, so that tracking converges to an open window.
inline double near_tracking_offset(const MpcConfig& cfg, const SafetyParams& p) {
  return p.l1 + p.l_v + cfg.gap_margin;
}

inline double far_tracking_offset(const MpcConfig& cfg, const SafetyParams& p) {
  return p.l2 + cfg.gap_margin;
}

/// QP for a CHDV next to the CAV's insertion gap.
///
/// `ref` is the CAV reference horizon (Np points), `lateral_gaps[n]` the
/// predicted lateral distance between this vehicle and the CAV at step n + 1.
/// `other_near` is the near CHDV on the other side of the insertion gap; it
/// is the real lane neighbour whenever the CAV is not between the two.
inline HorizonProblem build_near_qp(const VehicleState& self, NearRole role, Cooperation coop,
                                    const std::vector<ReferencePoint>& ref,
                                    const VehicleState& far_neighbor, const MpcConfig& cfg,
                                    const SafetyParams& p, const std::vector<double>& lateral_gaps,
                                    const std::optional<VehicleState>& other_near = std::nullopt) {
  cfg.validate();
  if (static_cast<int>(ref.size()) != cfg.Np || static_cast<int>(lateral_gaps.size()) != cfg.Np)
    throw std::invalid_argument("build_near_qp: reference and lateral gaps need Np entries");

  const bool following = role == NearRole::Following;
  const double side = following ? -1.0 : 1.0;  // sign of (self - CAV) when in place
  detail::HorizonQpBuilder b(self, cfg, p);
  detail::limit_inactive(b, coop, cfg);

  Eigen::VectorXd target(2 * cfg.Np);
  const double offset = near_tracking_offset(cfg, p);
  for (int n = 0; n < cfg.Np; ++n) {
    target[2 * n] = ref[n].x + side * offset;
    target[2 * n + 1] = ref[n].v;
  }
  b.track(target);

  const double four_r2 = 4.0 * p.R_buf * p.R_buf;
  for (int n = 1; n <= cfg.Np; ++n) {
    const auto& r = ref[static_cast<std::size_t>(n - 1)];
    const int slack = n <= cfg.Nc ? n - 1 : -1;
    if (following) {
      b.add_row(n, 0, 1.0, -1, r.x - p.l1);   // x - r_x <= -l1
      b.add_row(n, 1, 1.0, slack, r.v);       // v - r_v <= delta
    } else {
      b.add_row(n, 0, -1.0, -1, -r.x - p.l1); // x - r_x >= l1
      b.add_row(n, 1, -1.0, slack, -r.v);     // v - r_v >= -delta
    }
    const double dy = lateral_gaps[static_cast<std::size_t>(n - 1)];
    if (dy < 2.0 * p.R_buf) {
      const double dx_min = std::sqrt(four_r2 - dy * dy) + cfg.disc_margin;
      if (following) b.add_row(n, 0, 1.0, -1, r.x - dx_min);
      else b.add_row(n, 0, -1.0, -1, -r.x - dx_min);
    }
  }

  const auto& last = ref.back();
  const double t_end = cfg.Np * p.tau;
  const double far_x = far_neighbor.x + far_neighbor.v * t_end;
  if (following) b.add_terminal_gap(true, last.x, last.v, self.v - ref.front().v, p.l1);
  else b.add_terminal_gap(false, last.x, last.v, ref.front().v - self.v, p.l1);
  b.partner(RowKind::NeighbourSpacing);
  if (following) b.add_terminal_gap(false, far_x, far_neighbor.v, far_neighbor.v - self.v, p.l2);
  else b.add_terminal_gap(true, far_x, far_neighbor.v, self.v - far_neighbor.v, p.l2);
  if (other_near) {
    const double ox = other_near->x + other_near->v * t_end;
    if (following) b.add_terminal_gap(true, ox, other_near->v, self.v - other_near->v, p.l2);
    else b.add_terminal_gap(false, ox, other_near->v, other_near->v - self.v, p.l2);
  }

  // Keep room for the far neighbour: braking (following) or accelerating
  // (preceding) is limited by the current near/far gap.
  const double tau2 = p.tau * p.tau;
  if (following) {
    const double gap = self.x - far_neighbor.x;
    b.tighten_input(2.0 * (p.l2 - gap) / tau2 + p.d_max, p.a_max);
  } else {
    const double gap = far_neighbor.x - self.x;
    b.tighten_input(p.d_max, p.a_max + 2.0 * (gap - p.l2) / tau2);
  }
  b.slack_bound(detail::slack_cap(coop, cfg));
  return std::move(b).finish();
}

/// QP for a CHDV one position further out, tracking its near neighbour's prediction.
inline HorizonProblem build_far_qp(const VehicleState& self, FarRole role, Cooperation coop,
                                   const Eigen::VectorXd& near_predicted, const MpcConfig& cfg,
                                   const SafetyParams& p) {
  cfg.validate();
  if (near_predicted.size() != 2 * cfg.Np)
    throw std::invalid_argument("build_far_qp: near prediction must have 2 Np entries");

  const bool following = role == FarRole::Following;
  const double side = following ? -1.0 : 1.0;
  detail::HorizonQpBuilder b(self, cfg, p);
  detail::limit_inactive(b, coop, cfg);
  b.partner(RowKind::NeighbourSpacing);

  Eigen::VectorXd target = near_predicted;
  const double offset = far_tracking_offset(cfg, p);
  for (int n = 0; n < cfg.Np; ++n) target[2 * n] += side * offset;
  b.track(target);

  for (int n = 1; n <= cfg.Np; ++n) {
    const double nx = near_predicted[PredictionMatrices::row(n, 0)];
    const double nv = near_predicted[PredictionMatrices::row(n, 1)];
    const int slack = n <= cfg.Nc ? n - 1 : -1;
    if (following) {
      b.add_row(n, 0, 1.0, -1, nx - p.l2);
      b.add_row(n, 1, 1.0, slack, nv);
    } else {
      b.add_row(n, 0, -1.0, -1, -nx - p.l2);
      b.add_row(n, 1, -1.0, slack, -nv);
    }
  }
  const double nx = near_predicted[PredictionMatrices::row(cfg.Np, 0)];
  const double nv = near_predicted[PredictionMatrices::row(cfg.Np, 1)];
  const double near_v0 = near_predicted[PredictionMatrices::row(1, 1)];
  if (following) b.add_terminal_gap(true, nx, nv, self.v - near_v0, p.l2);
  else b.add_terminal_gap(false, nx, nv, near_v0 - self.v, p.l2);

  b.slack_bound(detail::slack_cap(coop, cfg));
  return std::move(b).finish();
}

namespace detail {

/// Copy of `qp` over [z; s] where every row with a positive weight gets its
/// own non-negative slack s_j, penalised by weight_j * s_j^2.
inline qp::QuadraticProgram soften_rows(const qp::QuadraticProgram& qp, const Eigen::VectorXd& lb,
                                        const Eigen::VectorXd& ub, const std::vector<double>& weight) {
  const Eigen::Index n = qp.H.rows();
  const Eigen::Index m = qp.A_in.rows();
  Eigen::Index k = 0;
  for (double w : weight) k += w > 0.0 ? 1 : 0;

  qp::QuadraticProgram out;
  out.H = Eigen::MatrixXd::Zero(n + k, n + k);
  out.H.topLeftCorner(n, n) = qp.H;
  out.g = Eigen::VectorXd::Zero(n + k);
  out.g.head(n) = qp.g;
  out.A_in = Eigen::MatrixXd::Zero(m, n + k);
  out.A_in.leftCols(n) = qp.A_in;
  out.b_in = qp.b_in;
  out.lb = Eigen::VectorXd::Zero(n + k);
  out.ub = Eigen::VectorXd::Constant(n + k, qp::kInf);
  out.lb.head(n) = lb;
  out.ub.head(n) = ub;
  Eigen::Index j = n;
  for (Eigen::Index r = 0; r < m; ++r) {
    const double w = weight[static_cast<std::size_t>(r)];
    if (!(w > 0.0)) continue;
    out.A_in(r, j) = -1.0;
    out.H(j, j) = 2.0 * w;
    ++j;
  }
  return out;
}

}  // namespace detail

/// Penalties on violated rows when the exact problem has no solution.
inline constexpr double kVelocityRowPenalty = 1e3;
inline constexpr double kSpacingRowPenalty = 1e6;

/// Solves one horizon problem.
///
/// When the QP is infeasible the velocity rows are softened first, keeping
/// the vehicle's normal input range. If that still fails, every row is
/// softened (spacing rows far more expensive than velocity rows) and the
/// full physical input range is allowed: emergency braking or acceleration.
/// Rows against the CAV only count as spacing rows while it is merging
/// (`cav_merging`); before that the CAV is still in its own lane and those
/// rows express gap creation, so they are weighted like velocity rows.
inline ControlDecision solve_horizon(const HorizonProblem& hp, const MpcConfig& cfg,
                                     bool cav_merging = true) {
  const int nc = cfg.Nc;
  qp::QpOptions opt;
  opt.tol = cfg.qp_tol;
  opt.max_iter = cfg.qp_max_iter;
  qp::QpSolution sol = qp::solve(hp.qp, opt);

  ControlDecision d;
  d.status = sol.status;
  if (sol.status == qp::QpStatus::Infeasible) {
    d.fallback = true;
    const std::size_t m = hp.row_kind.size();
    std::vector<double> w(m, 0.0);
    for (std::size_t r = 0; r < m; ++r)
      w[r] = hp.row_kind[r] == RowKind::Velocity ? kVelocityRowPenalty : 0.0;
    if (hp.qp.lb.head(nc).maxCoeff() <= hp.qp.ub.head(nc).minCoeff())
      sol = qp::solve(detail::soften_rows(hp.qp, hp.qp.lb, hp.qp.ub, w), opt);
    if (sol.status == qp::QpStatus::Infeasible) {
      for (std::size_t r = 0; r < m; ++r) {
        const RowKind k = hp.row_kind[r];
        const bool spacing = k == RowKind::NeighbourSpacing || (k == RowKind::CavSpacing && cav_merging);
        w[r] = spacing ? kSpacingRowPenalty : kVelocityRowPenalty;
      }
      sol = qp::solve(detail::soften_rows(hp.qp, hp.physical_lb, hp.physical_ub, w), opt);
    }
    if (sol.status == qp::QpStatus::Infeasible)
      throw std::logic_error("solve_horizon: relaxed problem reported infeasible");
  }
  d.u = sol.z.head(nc);
  d.delta = sol.z.segment(nc, nc);
  Eigen::VectorXd z(2 * nc);
  z << d.u, d.delta;
  d.objective = hp.qp.objective(z) + hp.objective_offset;
  d.predicted = predict(hp.pred, hp.x0, d.u);
  return d;
}

/// Decisions of the four CHDVs for one time step.
struct StepDecisions {
  std::array<ControlDecision, 4> by_role;  // indexed like kChdvRoles
  bool feasible{true};                     ///< every QP had a solution

  ControlDecision& operator[](Role r) { return by_role.at(index_of(r) - 1); }
  const ControlDecision& operator[](Role r) const { return by_role.at(index_of(r) - 1); }
};

/// One control step: near vehicles against the CAV reference, then far
/// vehicles against the near predictions. Only u(0) of each is meant to be
/// applied. `cav_merging` is false while the CAV waits in its own lane.
inline StepDecisions step_controller(const Fleet& fleet, const std::vector<ReferencePoint>& cav_ref,
                                     const CoopAssignment& coop, const MpcConfig& cfg,
                                     const SafetyParams& p, bool cav_merging = true) {
  StepDecisions out;
  auto gaps_for = [&](const VehicleState& s) {
    std::vector<double> gaps;
    gaps.reserve(cav_ref.size());
    for (const auto& r : cav_ref) gaps.push_back(std::abs(r.y - s.y));
    return gaps;
  };

  const auto& fn = fleet[Role::FHDV_near];
  const auto& pn = fleet[Role::PHDV_near];
  out[Role::FHDV_near] = solve_horizon(
      build_near_qp(fn, NearRole::Following, coop[Role::FHDV_near], cav_ref, fleet[Role::FHDV_far],
                    cfg, p, gaps_for(fn), pn),
      cfg, cav_merging);
  out[Role::PHDV_near] = solve_horizon(
      build_near_qp(pn, NearRole::Preceding, coop[Role::PHDV_near], cav_ref, fleet[Role::PHDV_far],
                    cfg, p, gaps_for(pn), fn),
      cfg, cav_merging);
  out[Role::FHDV_far] = solve_horizon(
      build_far_qp(fleet[Role::FHDV_far], FarRole::Following, coop[Role::FHDV_far],
                   out[Role::FHDV_near].predicted, cfg, p),
      cfg);
  out[Role::PHDV_far] = solve_horizon(
      build_far_qp(fleet[Role::PHDV_far], FarRole::Preceding, coop[Role::PHDV_far],
                   out[Role::PHDV_near].predicted, cfg, p),
      cfg);

  for (const auto& d : out.by_role) out.feasible = out.feasible && !d.fallback;
  return out;
}

}  // namespace coopmpc
