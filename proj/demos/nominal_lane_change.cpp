// Nominal lane change: every vehicle at 60 mph, all four CHDVs Active.
// Prints one line per step and the run summary.

#include <cstdio>

#include "coopmpc/simulator.hpp"

int main() {
  using namespace coopmpc;

  SimConfig cfg;
  const Scenario sc = build_scenario(60.0, 0.0, CoopAssignment::all(Cooperation::Active), 1, cfg.params,
                                     cfg.layout);

  std::printf("%5s %-10s %8s %6s %7s %7s %7s %7s %7s\n", "t", "phase", "cav_x", "cav_y", "gap_f",
              "gap_p", "u_fn", "u_pn", "clear");
  const TraceSink print = [](const StepRecord& r) {
    const auto& f = r.fleet;
    std::printf("%5.1f %-10s %8.2f %6.2f %7.2f %7.2f %7.2f %7.2f %7.2f\n", r.time,
                std::string(to_string(r.phase)).c_str(), f[Role::TCAV].x, f[Role::TCAV].y,
                f[Role::TCAV].x - f[Role::FHDV_near].x, f[Role::PHDV_near].x - f[Role::TCAV].x, r.u[0],
                r.u[1], r.min_clearance);
  };
  const RunResult res = run_lane_change(sc, cfg, print);

  std::printf("\nstarted=%d completed=%d wait=%.1fs lane-change=%.1fs min clearance=%.2fm\n",
              res.started, res.completed, res.wait_steps * cfg.params.tau, res.lc_steps * cfg.params.tau,
              res.min_clearance);
  return res.completed && !res.collision ? 0 : 1;
}
