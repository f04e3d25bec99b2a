// Command-line front end: single runs, sweeps and trace replay.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "coopmpc/experiment.hpp"

namespace {

using namespace coopmpc;

struct Common {
  std::string config_path;
  std::optional<double> wait_budget;
  std::optional<std::uint64_t> base_seed;
  int threads{0};
  std::string out;
};

/// Config file plus flag overrides. `out_is_dir` routes --out into output_path.
SweepConfig load(const Common& c, bool out_is_dir) {
  SweepConfig cfg = c.config_path.empty() ? SweepConfig{} : load_sweep_config(c.config_path);
  if (c.wait_budget) {
    cfg.wait_budget = *c.wait_budget;
    cfg.bi_wait_budget = *c.wait_budget;
  }
  if (c.base_seed) cfg.base_seed = *c.base_seed;
  if (out_is_dir && !c.out.empty()) cfg.output_path = c.out;
  cfg.validate();
  return cfg;
}

struct RunArgs {
  std::uint64_t seed{1};
  double mu{60.0};
  double sigma{5.0};
  std::string combo{"100"};
  bool bi_lane{false};
  std::string second{"100"};
};

void add_run_options(CLI::App* app, RunArgs& a) {
  app->add_option("--seed", a.seed, "scenario seed");
  app->add_option("--mu", a.mu, "mean speed [mph]");
  app->add_option("--sigma", a.sigma, "speed standard deviation [mph]");
  app->add_option("--combo", a.combo, "cooperation combo: 0, 50-fhdv, 50-phdv, 50-near, 50-far, 100");
  app->add_flag("--bi-lane", a.bi_lane, "two consecutive lane changes");
  app->add_option("--second", a.second, "combo of the second cohort (bi-lane)");
}

/// Runs one scenario; every step record goes to `trace` when given.
nlohmann::json run_one(const SweepConfig& cfg, const RunArgs& a, const TraceSink& trace) {
  nlohmann::json out;
  out["seed"] = a.seed;
  out["mu"] = a.mu;
  out["sigma"] = a.sigma;
  out["combo"] = a.combo;
  out["config_hash"] = config_hash(cfg);
  if (a.bi_lane) {
    const SimConfig sim = bi_sim(cfg);
    const auto bi = build_bilane_scenario(a.mu, a.sigma, named_combo(a.combo).coop,
                                          named_combo(a.second).coop, a.seed, sim.params, sim.layout);
    out["second"] = a.second;
    out["result"] = to_json(run_bi_lane_change(bi, sim, trace));
  } else {
    const SimConfig sim = single_sim(cfg);
    const auto sc = build_scenario(a.mu, a.sigma, named_combo(a.combo).coop, a.seed, sim.params, sim.layout);
    out["result"] = to_json(run_lane_change(sc, sim, trace));
  }
  return out;
}

std::unique_ptr<std::ostream> open_out(const std::string& path) {
  auto f = std::make_unique<std::ofstream>(path, std::ios::binary | std::ios::trunc);
  if (!*f) throw std::runtime_error("cannot write " + path);
  return f;
}

TraceSink jsonl_sink(std::ostream& os) {
  return [&os](const StepRecord& r) { os << to_json(r).dump() << '\n'; };
}

int cmd_run(const Common& c, const RunArgs& a) {
  const SweepConfig cfg = load(c, false);
  std::unique_ptr<std::ostream> trace_file;
  TraceSink sink;
  if (!c.out.empty()) {
    trace_file = open_out(c.out);
    sink = jsonl_sink(*trace_file);
  }
  std::cout << run_one(cfg, a, sink).dump(2) << '\n';
  return 0;
}

int cmd_replay(const Common& c, RunArgs a, const std::string& record) {
  if (!record.empty()) {
    std::ifstream in(record);
    if (!in) throw std::runtime_error("cannot read record " + record);
    const auto j = nlohmann::json::parse(in);
    a.seed = j.at("seed").get<std::uint64_t>();
    a.mu = j.at("mu").get<double>();
    a.sigma = j.at("sigma").get<double>();
    a.combo = j.at("combo").get<std::string>();
    a.bi_lane = j.contains("second");
    if (a.bi_lane) a.second = j.at("second").get<std::string>();
  }
  const SweepConfig cfg = load(c, false);
  if (c.out.empty()) {
    run_one(cfg, a, jsonl_sink(std::cout));
  } else {
    auto f = open_out(c.out);
    run_one(cfg, a, jsonl_sink(*f));
  }
  return 0;
}

int cmd_sweep(const Common& c, bool bi_lane) {
  SweepConfig cfg = load(c, true);
  if (bi_lane) cfg.bi_lane = true;
  const int threads = c.threads > 0 ? c.threads : default_threads();

  std::vector<SweepGrid> grids = run_feasibility_sweep(cfg, threads);
  if (cfg.bi_lane)
    for (auto& g : run_time_sweep(cfg, threads)) grids.push_back(std::move(g));
  export_sweep(grids, cfg, cfg.output_path);

  for (const auto& g : grids)
    std::printf("%-20s %-28s %s\n", std::string(to_string(g.metric)).c_str(), g.combo_name.c_str(),
                format_number(g.average()).c_str());
  std::printf("wrote %s (config %s)\n", cfg.output_path.c_str(), config_hash(cfg).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cooperative lane-change MPC experiments"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "flat JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--wait-budget", common.wait_budget, "CAV wait budget [s]");
    sub->add_option("--out", common.out, "output path");
  };

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "single scenario; prints the result, --out writes the step trace");
  add_common(run);
  add_run_options(run, run_args);

  RunArgs replay_args;
  std::string record;
  auto* replay = app.add_subcommand("replay", "re-emit the step trace of a stored seed and config");
  add_common(replay);
  add_run_options(replay, replay_args);
  replay->add_option("--record", record, "result file written by `run`")->check(CLI::ExistingFile);

  bool sweep_bi = false;
  auto* sweep = app.add_subcommand("sweep", "feasibility (and bi-lane time) sweeps; --out is a directory");
  add_common(sweep);
  sweep->add_option("--threads", common.threads, "worker threads (default: COOPMPC_THREADS or all cores)");
  sweep->add_option("--seed", common.base_seed, "base seed of the sweep");
  sweep->add_flag("--bi-lane", sweep_bi, "also run the bi-lane time sweep");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(common, run_args);
    if (*replay) return cmd_replay(common, replay_args, record);
    if (*sweep) return cmd_sweep(common, sweep_bi);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
