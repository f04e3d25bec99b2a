#pragma once

// Dense convex QP solver:
//
//   minimize    1/2 z' H z + g' z
//   subject to  A_in z <= b_in,   lb <= z <= ub
//
// Primal active-set method. A feasible start comes from a phase-1 LP
// (minimize the largest constraint violation) solved by proximal-point
// iterations of the same active-set kernel; semidefinite H is handled the same
// way. Working-set changes use lowest-index tie-breaking (Bland's rule), so
// identical inputs always give identical iterates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace coopmpc::qp {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct QuadraticProgram {
  MatrixXd H;
  VectorXd g;
  MatrixXd A_in;  // m x n
  VectorXd b_in;  // m
  VectorXd lb;    // n, may hold -inf
  VectorXd ub;    // n, may hold +inf

  Eigen::Index size() const { return g.size(); }
  Eigen::Index num_inequalities() const { return b_in.size(); }

  /// Problem with n variables, no rows and free bounds.
  static QuadraticProgram unconstrained(const MatrixXd& H, const VectorXd& g) {
    QuadraticProgram qp;
    qp.H = H;
    qp.g = g;
    qp.A_in.resize(0, g.size());
    qp.b_in.resize(0);
    qp.lb = VectorXd::Constant(g.size(), -kInf);
    qp.ub = VectorXd::Constant(g.size(), kInf);
    return qp;
  }

  double objective(const VectorXd& z) const { return 0.5 * z.dot(H * z) + g.dot(z); }

  /// Throws std::invalid_argument on malformed or non-convex input.
  void validate(double psd_tol = 1e-9) const {
    const auto n = size();
    if (H.rows() != n || H.cols() != n) throw std::invalid_argument("qp: H must be n x n");
    if (A_in.cols() != n || A_in.rows() != b_in.size())
      throw std::invalid_argument("qp: A_in must be m x n with b_in of length m");
    if (lb.size() != n || ub.size() != n) throw std::invalid_argument("qp: bounds must have length n");
    if (!H.allFinite() || !g.allFinite() || !A_in.allFinite())
      throw std::invalid_argument("qp: non-finite problem data");
    for (Eigen::Index i = 0; i < b_in.size(); ++i)
      if (std::isnan(b_in[i])) throw std::invalid_argument("qp: NaN in b_in");
    const double scale = 1.0 + H.cwiseAbs().maxCoeff();
    if ((H - H.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
      throw std::invalid_argument("qp: H must be symmetric");
    if (n > 0) {
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(H, Eigen::EigenvaluesOnly);
      if (es.eigenvalues().minCoeff() < -psd_tol)
        throw std::invalid_argument("qp: H must be positive semidefinite");
    }
  }
};

enum class QpStatus : std::uint8_t { Optimal, Infeasible, MaxIter };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::Optimal: return "Optimal";
    case QpStatus::Infeasible: return "Infeasible";
    case QpStatus::MaxIter: return "MaxIter";
  }
  return "?";
}

struct QpSolution {
  VectorXd z;
  double objective{kInf};
  QpStatus status{QpStatus::Infeasible};
  double primal_residual{kInf};
  double stationarity_residual{kInf};
  int iterations{0};
  // KKT multipliers (all >= 0): H z + g + A_in' l_in - l_lb + l_ub = 0.
  VectorXd lambda_in;
  VectorXd lambda_lb;
  VectorXd lambda_ub;
};

struct QpOptions {
  double tol{1e-8};
  int max_iter{200};
};

/// Largest violation of the constraints at z (0 when feasible).
inline double primal_residual(const QuadraticProgram& qp, const VectorXd& z) {
  double r = 0.0;
  if (qp.num_inequalities() > 0) r = std::max(r, (qp.A_in * z - qp.b_in).maxCoeff());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    r = std::max(r, qp.lb[i] - z[i]);
    r = std::max(r, z[i] - qp.ub[i]);
  }
  return std::max(r, 0.0);
}

namespace detail {

/// Rows c' z <= d of the reduced (free-variable) problem, tagged with their origin.
struct RowSet {
  enum class Kind : std::uint8_t { Inequality, Lower, Upper };
  struct Tag {
    Kind kind;
    Eigen::Index index;  // row of A_in, or variable index in the full problem
  };
  MatrixXd C;
  VectorXd d;
  std::vector<Tag> tags;
};

struct KernelResult {
  VectorXd z;
  std::vector<int> working;  // row indices, in insertion order
  VectorXd mu;               // multipliers for `working`
  int iterations{0};
  bool converged{false};
};

/// Primal active-set kernel for strictly convex H from a feasible start.
class ActiveSetKernel {
 public:
  ActiveSetKernel(const MatrixXd& H, const VectorXd& g, const MatrixXd& C, const VectorXd& d)
      : H_(H), g_(g), C_(C), d_(d), llt_(H), row_norm_(C.rowwise().norm()) {
    if (factorised() && C.rows() > 0) {
      HinvCt_ = llt_.solve(C.transpose());
      gram_ = C * HinvCt_;
    }
  }

  bool factorised() const { return llt_.info() == Eigen::Success; }

  KernelResult run(VectorXd z, std::vector<int> working, int max_iter, double tol) const {
    const Eigen::Index n = z.size();
    const Eigen::Index m = C_.rows();
    std::vector<char> in_w(static_cast<std::size_t>(m), 0);
    for (int i : working) in_w[static_cast<std::size_t>(i)] = 1;

    KernelResult res;
    // Set after a full, unblocked step: z then minimises over the working
    // set and any remaining step is rounding noise.
    bool at_subspace_min = false;
    for (int it = 0; it < max_iter; ++it) {
      res.iterations = it + 1;
      const VectorXd grad = H_ * z + g_;
      VectorXd p(n);
      VectorXd mu;
      solve_eqp(grad, working, p, mu);

      const double pscale = 1.0 + z.cwiseAbs().maxCoeff();
      if (at_subspace_min || p.cwiseAbs().maxCoeff() <= 1e-13 * pscale) {
        at_subspace_min = false;
        // Stationary on the working set: drop the lowest-index row with a
        // negative multiplier, otherwise optimal.
        int drop_pos = -1;
        int drop_row = std::numeric_limits<int>::max();
        for (std::size_t k = 0; k < working.size(); ++k) {
          if (mu[static_cast<Eigen::Index>(k)] < -tol && working[k] < drop_row) {
            drop_row = working[k];
            drop_pos = static_cast<int>(k);
          }
        }
        if (drop_pos < 0) {
          res.z = std::move(z);
          res.working = std::move(working);
          res.mu = std::move(mu);
          res.converged = true;
          return res;
        }
        in_w[static_cast<std::size_t>(drop_row)] = 0;
        working.erase(working.begin() + drop_pos);
        continue;
      }

      double alpha = 1.0;
      int block = -1;
      const double pnorm = p.norm();
      for (Eigen::Index i = 0; i < m; ++i) {
        if (in_w[static_cast<std::size_t>(i)]) continue;
        const double cp = C_.row(i).dot(p);
        if (cp <= 1e-12 * row_norm_[i] * pnorm) continue;
        const double slack = d_[i] - C_.row(i).dot(z);
        const double ai = std::max(slack, 0.0) / cp;
        if (ai < alpha) {
          alpha = ai;
          block = static_cast<int>(i);
        }
      }
      z += alpha * p;
      if (block >= 0) {
        working.push_back(block);
        in_w[static_cast<std::size_t>(block)] = 1;
      } else {
        at_subspace_min = true;
      }
    }
    res.z = std::move(z);
    res.working = std::move(working);
    VectorXd p(n);
    solve_eqp(H_ * res.z + g_, res.working, p, res.mu);
    res.converged = false;
    return res;
  }

 private:
  // Equality-constrained step: min 1/2 p'Hp + grad'p  s.t. C_W p = 0, via
  // the Schur complement C_W H^-1 C_W' picked from the precomputed Gram matrix.
  void solve_eqp(const VectorXd& grad, const std::vector<int>& working, VectorXd& p,
                 VectorXd& mu) const {
    const auto k = static_cast<Eigen::Index>(working.size());
    const VectorXd Hinvg = llt_.solve(grad);
    if (k == 0) {
      p = -Hinvg;
      mu.resize(0);
      return;
    }
    MatrixXd S(k, k);
    VectorXd rhs(k);
    for (Eigen::Index a = 0; a < k; ++a) {
      const int ra = working[static_cast<std::size_t>(a)];
      rhs[a] = -C_.row(ra).dot(Hinvg);
      for (Eigen::Index b = 0; b < k; ++b) S(a, b) = gram_(ra, working[static_cast<std::size_t>(b)]);
    }
    mu = S.ldlt().solve(rhs);
    p = -Hinvg;
    for (Eigen::Index a = 0; a < k; ++a) p -= mu[a] * HinvCt_.col(working[static_cast<std::size_t>(a)]);
  }

  const MatrixXd& H_;
  const VectorXd& g_;
  const MatrixXd& C_;
  const VectorXd& d_;
  Eigen::LLT<MatrixXd> llt_;
  VectorXd row_norm_;
  MatrixXd HinvCt_;  // H^-1 C'
  MatrixXd gram_;    // C H^-1 C'
};

/// Phase 1: find z with C z <= d by minimising the common violation s >= 0
/// with proximal-point iterations. Returns false when the minimal violation
/// stays above tol.
inline bool find_feasible(const MatrixXd& C, const VectorXd& d, VectorXd& z, double tol,
                          int max_iter, int& iterations) {
  const Eigen::Index n = z.size();
  const Eigen::Index m = C.rows();
  auto violation = [&](const VectorXd& zz) {
    return m == 0 ? 0.0 : std::max(0.0, (C * zz - d).maxCoeff());
  };
  if (m == 0) return true;
  double s = violation(z);
  if (s <= 1e-12 * (1.0 + d.cwiseAbs().maxCoeff())) return true;

  // Variables w = [z; s]. Rows: C z - s <= d, and -s <= 0.
  MatrixXd Cw(m + 1, n + 1);
  Cw.setZero();
  Cw.topLeftCorner(m, n) = C;
  Cw.col(n).head(m).setConstant(-1.0);
  Cw(m, n) = -1.0;
  VectorXd dw(m + 1);
  dw.head(m) = d;
  dw[m] = 0.0;

  const double scale = 1.0 + d.cwiseAbs().maxCoeff() + z.cwiseAbs().maxCoeff();
  const double rho = 1e-3 / scale;
  const MatrixXd Hw = MatrixXd::Identity(n + 1, n + 1) * rho;
  VectorXd w(n + 1);
  w.head(n) = z;
  w[n] = s;
  std::vector<int> working;

  for (int outer = 0; outer < 100 && iterations < max_iter; ++outer) {
    VectorXd gw = -rho * w;
    gw[n] += 1.0;
    ActiveSetKernel kernel(Hw, gw, Cw, dw);
    KernelResult r = kernel.run(w, working, max_iter - iterations, 1e-14);
    iterations += r.iterations;
    const double step = (r.z - w).cwiseAbs().maxCoeff();
    w = r.z;
    working = r.working;
    if (w[n] <= 1e-13 * scale || violation(w.head(n)) <= 0.0) {
      z = w.head(n);
      return violation(z) <= tol;
    }
    if (r.converged && step <= 1e-12 * scale) break;
  }
  z = w.head(n);
  return violation(z) <= tol;
}

/// Elastic start: min f(z) + M s + (eps/2) s^2 subject to C z - s <= d from
/// the feasible point (z, max violation). With M large the minimiser has
/// s = 0 whenever the constraints are consistent; z is replaced only then.
inline void elastic_start(const MatrixXd& H, const VectorXd& g, const MatrixXd& C, const VectorXd& d,
                          VectorXd& z, double hscale, int max_iter, int& iterations) {
  const Eigen::Index n = z.size();
  const Eigen::Index m = C.rows();
  MatrixXd Cw = MatrixXd::Zero(m + 1, n + 1);
  Cw.topLeftCorner(m, n) = C;
  Cw.col(n).head(m).setConstant(-1.0);
  Cw(m, n) = -1.0;
  VectorXd dw(m + 1);
  dw.head(m) = d;
  dw[m] = 0.0;
  MatrixXd Hw = MatrixXd::Zero(n + 1, n + 1);
  Hw.topLeftCorner(n, n) = H;
  Hw(n, n) = 1e-6 * hscale;
  VectorXd gw(n + 1);
  gw.head(n) = g;
  gw[n] = 1e3 * (hscale + g.cwiseAbs().maxCoeff());
  VectorXd w(n + 1);
  w.head(n) = z;
  w[n] = std::max(0.0, (C * z - d).maxCoeff());

  ActiveSetKernel kernel(Hw, gw, Cw, dw);
  const KernelResult r = kernel.run(w, {}, max_iter, 0.0);
  iterations += r.iterations;
  const double scale = 1.0 + d.cwiseAbs().maxCoeff();
  if ((C * r.z.head(n) - d).maxCoeff() <= 1e-12 * scale) z = r.z.head(n);
}

}  // namespace detail

/// Solves the QP. Infeasible is reported only after phase 1 certifies that no
/// point meets the constraints within tol. MaxIter returns the last iterate.
inline QpSolution solve(const QuadraticProgram& qp, const QpOptions& opt = {}) {
  qp.validate();
  const Eigen::Index n = qp.size();
  const Eigen::Index m = qp.num_inequalities();
  const double tol = opt.tol;

  QpSolution sol;
  sol.lambda_in = VectorXd::Zero(m);
  sol.lambda_lb = VectorXd::Zero(n);
  sol.lambda_ub = VectorXd::Zero(n);

  // Pin variables whose box has (numerically) zero width.
  VectorXd z_full = VectorXd::Zero(n);
  std::vector<Eigen::Index> free_idx;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (qp.lb[i] > qp.ub[i] + tol) {
      sol.z = z_full;
      sol.status = QpStatus::Infeasible;
      sol.primal_residual = qp.lb[i] - qp.ub[i];
      return sol;
    }
    if (std::isfinite(qp.lb[i]) && std::isfinite(qp.ub[i]) && qp.ub[i] - qp.lb[i] <= tol) {
      z_full[i] = 0.5 * (qp.lb[i] + qp.ub[i]);
    } else {
      free_idx.push_back(i);
    }
  }
  const auto nf = static_cast<Eigen::Index>(free_idx.size());

  // Reduced problem over the free variables.
  MatrixXd Hf(nf, nf);
  VectorXd gf(nf);
  MatrixXd Af(m, nf);
  for (Eigen::Index a = 0; a < nf; ++a) {
    gf[a] = qp.g[free_idx[a]] + qp.H.row(free_idx[a]).dot(z_full);
    Af.col(a) = qp.A_in.col(free_idx[a]);
    for (Eigen::Index b = 0; b < nf; ++b) Hf(a, b) = qp.H(free_idx[a], free_idx[b]);
  }
  const VectorXd bf = m > 0 ? VectorXd(qp.b_in - qp.A_in * z_full) : VectorXd(0);

  detail::RowSet rows;
  {
    std::vector<std::pair<VectorXd, double>> tmp;
    using Kind = detail::RowSet::Kind;
    for (Eigen::Index r = 0; r < m; ++r) {
      if (!std::isfinite(bf[r])) {
        if (bf[r] < 0) {
          sol.z = z_full;
          sol.status = QpStatus::Infeasible;
          return sol;
        }
        continue;
      }
      tmp.emplace_back(Af.row(r).transpose(), bf[r]);
      rows.tags.push_back({Kind::Inequality, r});
    }
    for (Eigen::Index a = 0; a < nf; ++a) {
      const Eigen::Index i = free_idx[a];
      if (std::isfinite(qp.lb[i])) {
        VectorXd c = VectorXd::Zero(nf);
        c[a] = -1.0;
        tmp.emplace_back(c, -qp.lb[i]);
        rows.tags.push_back({Kind::Lower, i});
      }
      if (std::isfinite(qp.ub[i])) {
        VectorXd c = VectorXd::Zero(nf);
        c[a] = 1.0;
        tmp.emplace_back(c, qp.ub[i]);
        rows.tags.push_back({Kind::Upper, i});
      }
    }
    rows.C.resize(static_cast<Eigen::Index>(tmp.size()), nf);
    rows.d.resize(static_cast<Eigen::Index>(tmp.size()));
    for (std::size_t r = 0; r < tmp.size(); ++r) {
      rows.C.row(static_cast<Eigen::Index>(r)) = tmp[r].first.transpose();
      rows.d[static_cast<Eigen::Index>(r)] = tmp[r].second;
    }
  }

  // Rows that lost all their free variables are either trivially satisfied or
  // make the problem infeasible.
  for (Eigen::Index r = 0; r < rows.C.rows(); ++r) {
    if (rows.C.row(r).cwiseAbs().maxCoeff() == 0.0 && rows.d[r] < -tol) {
      sol.z = z_full;
      sol.status = QpStatus::Infeasible;
      sol.primal_residual = -rows.d[r];
      return sol;
    }
  }

  // Phase 1 from the box projection of the unconstrained minimiser when that
  // is feasible already, else from the box projection of the origin.
  auto project = [&](const VectorXd& v) {
    VectorXd out(nf);
    for (Eigen::Index a = 0; a < nf; ++a)
      out[a] = std::clamp(v[a], qp.lb[free_idx[a]], qp.ub[free_idx[a]]);
    return out;
  };
  auto row_violation = [&](const VectorXd& v) {
    return rows.C.rows() == 0 ? 0.0 : (rows.C * v - rows.d).maxCoeff();
  };
  VectorXd zf = project(VectorXd::Zero(nf));
  int iterations = 0;
  const double hscale = 1.0 + (nf > 0 ? Hf.cwiseAbs().maxCoeff() : 0.0);
  Eigen::LLT<MatrixXd> h_llt(Hf);
  const bool h_pd = nf > 0 && h_llt.info() == Eigen::Success &&
                    Eigen::SelfAdjointEigenSolver<MatrixXd>(Hf, Eigen::EigenvaluesOnly)
                            .eigenvalues()
                            .minCoeff() > 1e-10 * hscale;
  if (nf > 0 && row_violation(zf) > 0.0) {
    const VectorXd cand = project(h_llt.solve(-gf));
    if (h_pd && cand.allFinite() && row_violation(cand) <= 0.0) {
      zf = cand;
    } else if (h_pd) {
      detail::elastic_start(Hf, gf, rows.C, rows.d, zf, hscale, opt.max_iter, iterations);
    }
  }
  int phase1_iterations = 0;
  const bool feasible =
      detail::find_feasible(rows.C, rows.d, zf, tol, opt.max_iter, phase1_iterations);
  iterations += phase1_iterations;
  if (!feasible) {
    for (Eigen::Index a = 0; a < nf; ++a) z_full[free_idx[a]] = zf[a];
    sol.z = z_full;
    sol.objective = qp.objective(z_full);
    sol.status = QpStatus::Infeasible;
    sol.primal_residual = primal_residual(qp, z_full);
    sol.iterations = iterations;
    return sol;
  }

  // Phase 2. Strictly convex problems are solved directly; otherwise a
  // proximal term is added and re-centred until the iterate settles.
  detail::KernelResult result;
  bool converged = false;
  int main_iters = 0;
  {
    std::vector<int> working;
    if (nf == 0) {
      result.z = zf;
      converged = true;
    } else if (h_pd) {
      detail::ActiveSetKernel kernel(Hf, gf, rows.C, rows.d);
      result = kernel.run(zf, working, opt.max_iter, tol * 1e-3);
      main_iters = result.iterations;
      converged = result.converged;
    } else {
      const double rho = 1e-4 * hscale;
      const MatrixXd Hp = Hf + rho * MatrixXd::Identity(nf, nf);
      VectorXd centre = zf;
      for (int outer = 0; outer < 1000 && main_iters < 50 * opt.max_iter; ++outer) {
        const VectorXd gp = gf - rho * centre;
        detail::ActiveSetKernel kernel(Hp, gp, rows.C, rows.d);
        result = kernel.run(centre, working, opt.max_iter, tol * 1e-3);
        main_iters += result.iterations;
        if (!result.converged) break;
        working = result.working;
        const double step = (result.z - centre).cwiseAbs().maxCoeff();
        centre = result.z;
        if (step <= 1e-13 * (1.0 + centre.cwiseAbs().maxCoeff())) {
          converged = true;
          break;
        }
      }
    }
  }

  for (Eigen::Index a = 0; a < nf; ++a) z_full[free_idx[a]] = result.z[a];
  sol.z = z_full;
  sol.iterations = iterations + main_iters;

  // Map working-set multipliers back to the full problem.
  using Kind = detail::RowSet::Kind;
  for (std::size_t k = 0; k < result.working.size(); ++k) {
    const double mu = std::max(0.0, result.mu[static_cast<Eigen::Index>(k)]);
    const auto& tag = rows.tags[static_cast<std::size_t>(result.working[k])];
    switch (tag.kind) {
      case Kind::Inequality: sol.lambda_in[tag.index] += mu; break;
      case Kind::Lower: sol.lambda_lb[tag.index] += mu; break;
      case Kind::Upper: sol.lambda_ub[tag.index] += mu; break;
    }
  }
  // Pinned variables absorb the remaining gradient through their bounds.
  VectorXd r = qp.H * z_full + qp.g;
  if (m > 0) r += qp.A_in.transpose() * sol.lambda_in;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::find(free_idx.begin(), free_idx.end(), i) != free_idx.end()) continue;
    if (r[i] > 0.0) sol.lambda_lb[i] = r[i];
    else sol.lambda_ub[i] = -r[i];
  }
  r += sol.lambda_ub - sol.lambda_lb;

  sol.objective = qp.objective(z_full);
  sol.primal_residual = primal_residual(qp, z_full);
  sol.stationarity_residual = r.size() > 0 ? r.cwiseAbs().maxCoeff() : 0.0;
  const double kkt_scale = 1.0 + hscale + (nf > 0 ? gf.cwiseAbs().maxCoeff() : 0.0);
  if (converged && sol.primal_residual <= tol && sol.stationarity_residual <= tol * kkt_scale)
    sol.status = QpStatus::Optimal;
  else
    sol.status = QpStatus::MaxIter;
  return sol;
}

/// True iff some point satisfies every constraint within tol.
inline bool check_feasible(const QuadraticProgram& qp, double tol = 1e-8) {
  const Eigen::Index n = qp.size();
  QuadraticProgram probe = qp;
  probe.H = MatrixXd::Identity(n, n);
  probe.g = VectorXd::Zero(n);
  QpOptions opt;
  opt.tol = tol;
  opt.max_iter = 1000;
  return solve(probe, opt).status != QpStatus::Infeasible;
}

}  // namespace coopmpc::qp
