#include <cmath>

#include <gtest/gtest.h>

#include "coopmpc/simulator.hpp"

using namespace coopmpc;

namespace {

StepDecisions constant_inputs(double u, int nc = 4) {
  StepDecisions d;
  for (auto& c : d.by_role) {
    c.u = Eigen::VectorXd::Constant(nc, u);
    c.delta = Eigen::VectorXd::Zero(nc);
  }
  return d;
}

/// Near pair packed as tightly as the layout allows, every CHDV Inactive.
Scenario wedge(double mu) {
  LayoutParams tight;
  tight.t_h = 0.05;
  return build_scenario(mu, 0.0, CoopAssignment::all(Cooperation::Inactive), 1, SafetyParams{}, tight);
}

}  // namespace

TEST(Advance, ConstantAccelerationStep) {
  Fleet f;
  for (auto& s : f.s) s = {0.0, 3.7, 10.0, 0.0};
  f[Role::TCAV].y = 0.0;
  const auto next = advance(f, constant_inputs(2.0), std::nullopt, {0.0, 3.7}, SafetyParams{});
  for (Role r : kChdvRoles) {
    EXPECT_NEAR(next.fleet[r].x, 2.04, 1e-12);
    EXPECT_NEAR(next.fleet[r].v, 10.4, 1e-12);
    EXPECT_DOUBLE_EQ(next.fleet[r].y, 3.7);
  }
  // Without a plan the CAV holds its speed in its lane.
  EXPECT_NEAR(next.fleet[Role::TCAV].x, 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(next.fleet[Role::TCAV].v, 10.0);
  EXPECT_DOUBLE_EQ(next.fleet[Role::TCAV].y, 0.0);
}

TEST(Advance, ZeroInputIsPureDrift) {
  Fleet f;
  double x = 0.0;
  for (auto& s : f.s) {
    s = {x, 3.7, 5.0 + x, 0.0};
    x += 10.0;
  }
  const auto next = advance(f, constant_inputs(0.0), std::nullopt, {0.0, 3.7}, SafetyParams{});
  for (std::size_t i = 0; i < kNumRoles; ++i) EXPECT_NEAR(next.fleet.s[i].x, f.s[i].x + f.s[i].v * 0.2, 1e-12);
}

TEST(Advance, SpeedsNeverNegative) {
  Fleet f;
  for (auto& s : f.s) s = {0.0, 3.7, 0.3, 0.0};
  const auto next = advance(f, constant_inputs(-5.08), std::nullopt, {0.0, 3.7}, SafetyParams{});
  for (Role r : kChdvRoles) {
    EXPECT_EQ(next.fleet[r].v, 0.0);
    EXPECT_NEAR(next.fleet[r].x, 0.03, 1e-12);
  }
}

TEST(Advance, CavFollowsItsCubic) {
  const SafetyParams p;
  Fleet f;
  f[Role::TCAV] = {10.0, 0.0, 20.0, 0.0};
  CubicPlan plan = fit_cubic(0.0, 40.0, 3.7);
  plan.a_long = 1.0;
  const LaneFrame lane{0.0, 3.7};
  const auto next = advance(f, constant_inputs(0.0), plan, lane, p);
  const double dx = next.fleet[Role::TCAV].x - 10.0;
  EXPECT_NEAR(dx, 4.02, 1e-12);
  EXPECT_NEAR(next.fleet[Role::TCAV].y, plan.to_road(dx, 0.0, 1.0), 1e-9);
  EXPECT_NEAR(next.cav_slope, -plan.slope(dx), 1e-12);
  EXPECT_GT(next.fleet[Role::TCAV].y, 0.0);
}

TEST(InitialFeasibility, GenerousAndZeroGap) {
  const SimConfig cfg;
  Fleet f;
  f[Role::TCAV] = {0.0, 0.0, 25.0, 0.0};
  f[Role::FHDV_near] = {-200.0, 3.7, 25.0, 0.0};
  f[Role::PHDV_near] = {200.0, 3.7, 25.0, 0.0};
  EXPECT_TRUE(check_initial_feasibility(f, {0.0, 3.7}, cfg.lc_duration, cfg));
  f[Role::FHDV_near].x = 0.0;
  f[Role::PHDV_near].x = 0.0;
  EXPECT_FALSE(check_initial_feasibility(f, {0.0, 3.7}, cfg.lc_duration, cfg));
}

TEST(InitialFeasibility, AgreesWithPlanner) {
  const SimConfig cfg;
  Fleet f;
  f[Role::TCAV] = {0.0, 0.0, 20.0, 0.0};
  f[Role::FHDV_near] = {-30.0, 3.7, 20.0, 0.0};
  f[Role::PHDV_near] = {30.0, 3.7, 20.0, 0.0};
  const double T = cfg.lc_duration;
  const auto window = future_end_positions(f[Role::FHDV_near], f[Role::PHDV_near], T, cfg.params);
  PlanRequest req;
  req.y_e = 3.7;
  req.horizon = T;
  req.preferred_end = 20.0 * T;
  EXPECT_EQ(check_initial_feasibility(f, {0.0, 3.7}, T, cfg),
            plan_step(f[Role::TCAV], window, cfg.params, req).has_value());
}

TEST(RunLaneChange, NominalRun) {
  SimConfig cfg;
  const Scenario sc = build_scenario(60.0, 0.0, CoopAssignment::all(Cooperation::Active), 1, cfg.params,
                                     cfg.layout);
  const RunResult r = run_lane_change(sc, cfg);
  EXPECT_TRUE(r.started);
  EXPECT_TRUE(r.completed);
  EXPECT_FALSE(r.collision);
  EXPECT_EQ(r.wait_steps, 0);
  EXPECT_FALSE(r.started_after_wait);
  EXPECT_GE(r.lc_steps * cfg.params.tau, 3.0);
  EXPECT_LE(r.lc_steps * cfg.params.tau, 8.0);
  EXPECT_NEAR(r.total_time, (r.wait_steps + r.lc_steps) * cfg.params.tau, 1e-12);
  EXPECT_NEAR(r.cav_exit.y, sc.lane_target, cfg.completion_tol);
  EXPECT_GT(r.min_clearance, 0.0);
}

TEST(RunLaneChange, WedgeWaitsThenStarts) {
  // Inactive CHDVs still drift apart while tracking, so the CAV starts late.
  SimConfig cfg;
  const Scenario sc = wedge(60.0);
  ASSERT_LT(sc.fleet[Role::PHDV_near].x - sc.fleet[Role::FHDV_near].x, 2 * cfg.params.R_buf + cfg.params.l_v + 1e-9);
  const RunResult r = run_lane_change(sc, cfg);
  EXPECT_FALSE(r.initially_feasible);
  EXPECT_TRUE(r.started);
  EXPECT_TRUE(r.started_after_wait);
  EXPECT_GT(r.wait_steps, 0);
  EXPECT_LE(r.wait_steps, cfg.wait_budget_steps());
  EXPECT_FALSE(r.collision);
}

TEST(RunLaneChange, WedgeAbortsAtShortBudget) {
  SimConfig cfg;
  cfg.wait_budget = 0.4;
  const RunResult r = run_lane_change(wedge(60.0), cfg);
  EXPECT_FALSE(r.initially_feasible);
  EXPECT_FALSE(r.started);
  EXPECT_TRUE(r.aborted);
  EXPECT_EQ(r.wait_steps, cfg.wait_budget_steps());
  EXPECT_NEAR(r.total_time, cfg.wait_budget, 1e-9);
  EXPECT_FALSE(r.collision);
}

TEST(RunLaneChange, ZeroBudgetAbortsImmediately) {
  SimConfig cfg;
  cfg.wait_budget = 0.0;
  const RunResult r = run_lane_change(wedge(60.0), cfg);
  EXPECT_TRUE(r.aborted);
  EXPECT_FALSE(r.started);
  EXPECT_EQ(r.wait_steps, 0);
  EXPECT_EQ(r.total_time, 0.0);
}

TEST(RunLaneChange, TraceHasOneRecordPerStep) {
  SimConfig cfg;
  const Scenario sc = build_scenario(55.0, 4.0, CoopAssignment::all(Cooperation::Active), 3, cfg.params,
                                     cfg.layout);
  std::vector<StepRecord> recs;
  const RunResult r = run_lane_change(sc, cfg, [&](const StepRecord& rec) { recs.push_back(rec); });
  ASSERT_EQ(static_cast<int>(recs.size()), r.wait_steps + r.lc_steps);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(recs[i].step, static_cast<int>(i) + 1);
    EXPECT_NEAR(recs[i].time, 0.2 * static_cast<double>(i + 1), 1e-12);
  }
  if (r.completed) { EXPECT_EQ(recs.back().phase, Phase::Done); }
}

TEST(RunLaneChange, DeterministicAndSafeAcrossSeeds) {
  SimConfig cfg;
  const SafetyParams& p = cfg.params;
  const CoopAssignment combos[] = {CoopAssignment::all(Cooperation::Active),
                                   CoopAssignment::all(Cooperation::Inactive),
                                   {Cooperation::Active, Cooperation::Inactive, Cooperation::Active,
                                    Cooperation::Inactive}};
  int started = 0;
  for (std::uint64_t seed = 1; seed <= 12; ++seed) {
    for (const auto& coop : combos) {
      const Scenario sc = build_scenario(40.0 + 3.0 * static_cast<double>(seed), 6.0, coop, seed, p, cfg.layout);
      bool speeds_ok = true;
      bool phases_ok = true;
      const RunResult a = run_lane_change(sc, cfg, [&](const StepRecord& rec) {
        for (const auto& s : rec.fleet.s) speeds_ok = speeds_ok && s.v >= 0.0;
        for (Role r : kChdvRoles) phases_ok = phases_ok && rec.fleet[r].y == sc.lane_target;
      });
      const RunResult b = run_lane_change(sc, cfg);
      EXPECT_EQ(a, b);
      EXPECT_TRUE(speeds_ok);
      EXPECT_TRUE(phases_ok) << "CHDVs stay in their lane";
      EXPECT_FALSE(a.collision) << seed;
      if (a.started) {
        ++started;
        EXPECT_LE(a.wait_steps, cfg.wait_budget_steps());
        EXPECT_EQ(a.started_after_wait, a.wait_steps > 0);
        EXPECT_GE(a.min_longitudinal_gap_near, p.l1 - 1e-6);
      }
      EXPECT_GE(a.min_longitudinal_gap_far, p.l2 - 1e-6);
      EXPECT_NEAR(a.total_time, (a.wait_steps + a.lc_steps) * p.tau, 1e-12);
    }
  }
  EXPECT_GT(started, 0);
}

TEST(BiLane, InstantStagesTakeTwiceASingleStage) {
  SimConfig cfg;
  cfg.wait_budget = 6.0;
  const auto all = CoopAssignment::all(Cooperation::Active);
  const auto bi = build_bilane_scenario(60.0, 0.0, all, all, 1, cfg.params, cfg.layout);
  const auto single = run_lane_change(bi.first, cfg);
  const auto res = run_bi_lane_change(bi, cfg);
  ASSERT_TRUE(res.completed);
  EXPECT_EQ(res.first.wait_steps, 0);
  EXPECT_EQ(res.second.wait_steps, 0);
  EXPECT_NEAR(res.total_time, res.first.total_time + res.second.total_time, 1e-12);
  EXPECT_NEAR(res.total_time, 2.0 * single.total_time, 2.0 * cfg.params.tau);
  EXPECT_EQ(res.efficient, res.total_time <= 10.0);
  EXPECT_NEAR(res.second.cav_exit.y, 2.0 * cfg.params.l_w, cfg.completion_tol);
}

TEST(BiLane, FirstStageAbortIsNotEfficient) {
  SimConfig cfg;
  cfg.wait_budget = 0.4;
  LayoutParams tight;
  tight.t_h = 0.05;
  const auto none = CoopAssignment::all(Cooperation::Inactive);
  const auto bi = build_bilane_scenario(60.0, 0.0, none, none, 1, cfg.params, tight);
  cfg.layout = tight;
  const auto res = run_bi_lane_change(bi, cfg);
  EXPECT_TRUE(res.first.aborted);
  EXPECT_FALSE(res.efficient);
  EXPECT_FALSE(res.completed);
  EXPECT_EQ(res.second, RunResult{});
}

TEST(BiLane, SecondStageCohortAroundExit) {
  const SafetyParams p;
  const auto bi = build_bilane_scenario(60.0, 5.0, CoopAssignment{}, CoopAssignment{}, 4);
  const VehicleState exit{120.0, 3.7, 27.0, 0.5};
  const Scenario sc = second_stage(bi, exit, p, LayoutParams{});
  EXPECT_DOUBLE_EQ(sc.lane_source, 3.7);
  EXPECT_DOUBLE_EQ(sc.lane_target, 7.4);
  EXPECT_DOUBLE_EQ(sc.fleet[Role::TCAV].x, 120.0);
  EXPECT_DOUBLE_EQ(sc.fleet[Role::TCAV].a, 0.0);
  EXPECT_NEAR(sc.fleet[Role::TCAV].x, 0.5 * (sc.fleet[Role::FHDV_near].x + sc.fleet[Role::PHDV_near].x), 1e-12);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(sc.fleet[kChdvRoles[k]].v, bi.second_speeds[k]);
}

TEST(BiLane, ActiveBeatsInactiveOnPairedSeeds) {
  SimConfig cfg;
  cfg.wait_budget = 6.0;
  const auto act = CoopAssignment::all(Cooperation::Active);
  const auto ina = CoopAssignment::all(Cooperation::Inactive);
  auto time_of = [](const BiLaneResult& r) {
    return r.completed ? r.total_time : std::numeric_limits<double>::infinity();
  };
  int wins = 0;
  int total = 0;
  for (double mu : {50.0, 65.0}) {
    for (std::uint64_t seed = 1; seed <= 15; ++seed) {
      const auto a = run_bi_lane_change(build_bilane_scenario(mu, 6.0, act, act, seed, cfg.params, cfg.layout), cfg);
      const auto i = run_bi_lane_change(build_bilane_scenario(mu, 6.0, ina, ina, seed, cfg.params, cfg.layout), cfg);
      ++total;
      wins += time_of(a) <= time_of(i) ? 1 : 0;
    }
  }
  EXPECT_GE(wins, static_cast<int>(std::ceil(0.8 * total))) << wins << " of " << total;
}

TEST(MixSeed, SplitMixReference) {
  // First output of the splitmix64 generator seeded with 0.
  EXPECT_EQ(mix_seed(0), 0xe220a8397b1dcdafULL);
}
