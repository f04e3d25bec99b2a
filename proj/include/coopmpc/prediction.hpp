#pragma once

// Double-integrator dynamics and condensed prediction matrices over the MPC
// horizon. State is [position; speed], the input is the acceleration.

#include <algorithm>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace coopmpc {

struct LinearDynamics {
  Eigen::Matrix2d A;
  Eigen::Vector2d B;
  double tau{0.0};
};

inline LinearDynamics build_dynamics(double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("build_dynamics: tau must be positive");
  LinearDynamics d;
  d.A << 1.0, tau, 0.0, 1.0;
  d.B << 0.5 * tau * tau, tau;
  d.tau = tau;
  return d;
}

/// Stacked prediction X = M_x x0 + M_u U over Np = Nc + 1 steps.
///
/// Block row n (0-based) is the state after n + 1 steps. The input after the
/// control horizon is held at u(Nc - 1), so the last block row carries
/// (A + I) B in its final column.
struct PredictionMatrices {
  Eigen::MatrixXd M_x;  // (2 Np) x 2
  Eigen::MatrixXd M_u;  // (2 Np) x Nc
  int Np{0};
  int Nc{0};

  /// Row of the stacked vector holding the position (component 0) or speed
  /// (component 1) after `step` steps, step in [1, Np].
  static int row(int step, int component) { return 2 * (step - 1) + component; }
};

inline PredictionMatrices build_prediction(const LinearDynamics& dyn, int Np, int Nc) {
  if (Nc < 1) throw std::invalid_argument("build_prediction: Nc must be >= 1");
  if (Np != Nc + 1) throw std::invalid_argument("build_prediction: require Np == Nc + 1");

  PredictionMatrices m;
  m.Np = Np;
  m.Nc = Nc;
  m.M_x.setZero(2 * Np, 2);
  m.M_u.setZero(2 * Np, Nc);

  // powers[k] = A^k
  std::vector<Eigen::Matrix2d> powers(static_cast<std::size_t>(Np + 1));
  powers[0].setIdentity();
  for (int k = 1; k <= Np; ++k) powers[k] = dyn.A * powers[k - 1];

  for (int n = 1; n <= Np; ++n) {
    m.M_x.block<2, 2>(2 * (n - 1), 0) = powers[n];
    // State after n steps: sum_{j<n} A^{n-1-j} B u_{min(j, Nc-1)}.
    for (int j = 0; j < n; ++j) {
      const int col = std::min(j, Nc - 1);
      m.M_u.block<2, 1>(2 * (n - 1), col) += powers[n - 1 - j] * dyn.B;
    }
  }
  return m;
}

inline Eigen::VectorXd predict(const PredictionMatrices& m, const Eigen::Vector2d& x0,
                               const Eigen::VectorXd& U) {
  if (U.size() != m.Nc) throw std::invalid_argument("predict: input sequence length must equal Nc");
  return m.M_x * x0 + m.M_u * U;
}

}  // namespace coopmpc
