#pragma once

// Monte Carlo sweeps over (mu, sigma) velocity grids: named cooperation
// combos, paired seeds, a deterministic worker pool, grid export and the
// flat key/value config file.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "coopmpc/core_model.hpp"
#include "coopmpc/simulator.hpp"

namespace coopmpc {

struct NamedCombo {
  std::string name;
  CoopAssignment coop;
};

/// Known cooperation combos. "50-fhdv" makes both FHDVs Active, "50-near"
/// both near CHDVs, and so on.
inline std::optional<CoopAssignment> combo_by_name(std::string_view name) {
  constexpr auto A = Cooperation::Active;
  constexpr auto I = Cooperation::Inactive;
  if (name == "0") return CoopAssignment::all(I);
  if (name == "100") return CoopAssignment::all(A);
  if (name == "50-fhdv") return CoopAssignment{A, I, A, I};
  if (name == "50-phdv") return CoopAssignment{I, A, I, A};
  if (name == "50-near") return CoopAssignment{A, A, I, I};
  if (name == "50-far") return CoopAssignment{I, I, A, A};
  return std::nullopt;
}

inline NamedCombo named_combo(const std::string& name) {
  auto c = combo_by_name(name);
  if (!c) throw std::invalid_argument("unknown cooperation combo: " + name);
  return {name, *c};
}

/// Bi-lane pair "first+second", e.g. "50-phdv+100".
struct ComboPair {
  NamedCombo first;
  NamedCombo second;

  std::string name() const { return first.name + "+" + second.name; }
};

inline ComboPair combo_pair(const std::string& name) {
  const auto plus = name.find('+');
  if (plus == std::string::npos) throw std::invalid_argument("combo pair needs '+': " + name);
  return {named_combo(name.substr(0, plus)), named_combo(name.substr(plus + 1))};
}

struct SweepConfig {
  std::vector<double> mu_grid{40, 45, 50, 55, 60, 65, 70, 75, 80};
  std::vector<double> sigma_grid{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  int seeds_per_cell{100};
  std::vector<std::string> coop_combos{"0", "50-fhdv", "50-phdv", "100"};
  std::vector<std::string> bi_pairs{"0+0",       "50-phdv+50-phdv", "50-phdv+100",
                                    "100+100",   "50-near+50-near", "50-far+50-far"};
  double wait_budget{2.0};     ///< single lane change [s]
  double bi_wait_budget{6.0};  ///< each stage of a bi-lane change [s]
  bool bi_lane{false};
  std::uint64_t base_seed{1};
  std::string output_path{"out"};
  SimConfig sim;

  void validate() const {
    if (mu_grid.empty() || sigma_grid.empty()) throw std::invalid_argument("sweep: grids must be non-empty");
    if (seeds_per_cell < 1) throw std::invalid_argument("sweep: seeds_per_cell must be >= 1");
    for (double mu : mu_grid)
      if (!(mu > 0.0)) throw std::invalid_argument("sweep: mu values must be positive");
    for (double s : sigma_grid)
      if (!(s >= 0.0)) throw std::invalid_argument("sweep: sigma values must be >= 0");
    if (!(wait_budget >= 0.0 && bi_wait_budget >= 0.0))
      throw std::invalid_argument("sweep: wait budgets must be >= 0");
    for (const auto& c : coop_combos) named_combo(c);
    for (const auto& c : bi_pairs) combo_pair(c);
    sim.validate();
  }

  std::size_t cells() const { return mu_grid.size() * sigma_grid.size(); }
  std::size_t runs_per_combo() const { return cells() * static_cast<std::size_t>(seeds_per_cell); }
};

/// Scenario seed of one run. Independent of the combo, so every combo sees
/// the same initial conditions (paired seeds).
inline std::uint64_t run_seed(std::uint64_t base, std::size_t i_mu, std::size_t i_sigma, int s) {
  std::uint64_t h = mix_seed(base);
  h = mix_seed(h ^ static_cast<std::uint64_t>(i_mu));
  h = mix_seed(h ^ static_cast<std::uint64_t>(i_sigma));
  return mix_seed(h ^ static_cast<std::uint64_t>(s));
}

// ---------------------------------------------------------------------------
// Worker pool

/// Thread count from COOPMPC_THREADS, else the hardware concurrency.
inline int default_threads() {
  if (const char* env = std::getenv("COOPMPC_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

/// Calls fn(i) for i in [0, n) on `threads` workers. Results are written by
/// index, so the output never depends on scheduling. The first exception
/// stops the pool and is rethrown.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max(threads, 1), std::max<std::size_t>(n, 1));
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;

  auto work = [&] {
    while (!failed.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };

  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Sweeps

enum class Metric : std::uint8_t { FeasibilityRate, MeanTotalTime, EfficientFraction };

inline std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::FeasibilityRate: return "feasibility_rate";
    case Metric::MeanTotalTime: return "mean_total_time";
    case Metric::EfficientFraction: return "efficient_fraction";
  }
  return "?";
}

/// One scalar per (sigma, mu) cell; NaN marks a cell with no data.
struct SweepGrid {
  Metric metric{Metric::FeasibilityRate};
  std::string combo_name;
  std::vector<double> mu_grid;
  std::vector<double> sigma_grid;
  std::vector<double> cells;  // row-major, rows = sigma, columns = mu

  double& at(std::size_t i_sigma, std::size_t i_mu) { return cells.at(i_sigma * mu_grid.size() + i_mu); }
  double at(std::size_t i_sigma, std::size_t i_mu) const {
    return cells.at(i_sigma * mu_grid.size() + i_mu);
  }

  /// Mean over cells that hold data; NaN when none do.
  double average() const {
    double sum = 0.0;
    int n = 0;
    for (double c : cells)
      if (!std::isnan(c)) {
        sum += c;
        ++n;
      }
    return n > 0 ? sum / n : std::nan("");
  }

  /// Mean of each sigma row.
  std::vector<double> row_means() const {
    std::vector<double> out;
    for (std::size_t r = 0; r < sigma_grid.size(); ++r) {
      double sum = 0.0;
      int n = 0;
      for (std::size_t c = 0; c < mu_grid.size(); ++c)
        if (!std::isnan(at(r, c))) {
          sum += at(r, c);
          ++n;
        }
      out.push_back(n > 0 ? sum / n : std::nan(""));
    }
    return out;
  }
};

/// Runs of one combo, indexed (i_sigma * |mu| + i_mu) * seeds + s.
struct ComboRuns {
  std::string name;
  std::vector<RunResult> runs;
};

struct ComboBiRuns {
  std::string name;
  std::vector<BiLaneResult> runs;
};

namespace detail {

struct RunIndex {
  std::size_t combo;
  std::size_t i_sigma;
  std::size_t i_mu;
  int seed;
};

inline RunIndex unflatten(const SweepConfig& cfg, std::size_t i) {
  const std::size_t per_combo = cfg.runs_per_combo();
  const std::size_t s = static_cast<std::size_t>(cfg.seeds_per_cell);
  RunIndex r;
  r.combo = i / per_combo;
  std::size_t rest = i % per_combo;
  r.seed = static_cast<int>(rest % s);
  rest /= s;
  r.i_mu = rest % cfg.mu_grid.size();
  r.i_sigma = rest / cfg.mu_grid.size();
  return r;
}

template <class Run>
SweepGrid make_grid(const SweepConfig& cfg, Metric metric, const std::string& name,
                    const std::vector<Run>& runs, double (*value)(const Run&), bool (*counts)(const Run&)) {
  SweepGrid g{metric, name, cfg.mu_grid, cfg.sigma_grid, {}};
  g.cells.assign(cfg.cells(), std::nan(""));
  const std::size_t s = static_cast<std::size_t>(cfg.seeds_per_cell);
  for (std::size_t cell = 0; cell < cfg.cells(); ++cell) {
    double sum = 0.0;
    int n = 0;
    for (std::size_t k = 0; k < s; ++k) {
      const Run& r = runs[cell * s + k];
      if (!counts(r)) continue;
      sum += value(r);
      ++n;
    }
    if (n > 0) g.cells[cell] = sum / n;
  }
  return g;
}

}  // namespace detail

inline SimConfig single_sim(const SweepConfig& cfg) {
  SimConfig s = cfg.sim;
  s.wait_budget = cfg.wait_budget;
  return s;
}

inline SimConfig bi_sim(const SweepConfig& cfg) {
  SimConfig s = cfg.sim;
  s.wait_budget = cfg.bi_wait_budget;
  return s;
}

/// Single lane changes for every combo, cell and seed.
inline std::vector<ComboRuns> run_single_sweep(const SweepConfig& cfg, int threads) {
  cfg.validate();
  const SimConfig sim = single_sim(cfg);
  std::vector<NamedCombo> combos;
  for (const auto& c : cfg.coop_combos) combos.push_back(named_combo(c));

  std::vector<ComboRuns> out(combos.size());
  for (std::size_t c = 0; c < combos.size(); ++c) {
    out[c].name = combos[c].name;
    out[c].runs.resize(cfg.runs_per_combo());
  }
  parallel_for(combos.size() * cfg.runs_per_combo(), threads, [&](std::size_t i) {
    const auto ix = detail::unflatten(cfg, i);
    const auto sc = build_scenario(cfg.mu_grid[ix.i_mu], cfg.sigma_grid[ix.i_sigma], combos[ix.combo].coop,
                                   run_seed(cfg.base_seed, ix.i_mu, ix.i_sigma, ix.seed),
                                   sim.params, sim.layout);
    out[ix.combo].runs[i % cfg.runs_per_combo()] = run_lane_change(sc, sim);
  });
  return out;
}

/// Bi-lane changes for every combo pair, cell and seed.
inline std::vector<ComboBiRuns> run_bi_sweep(const SweepConfig& cfg, int threads) {
  cfg.validate();
  const SimConfig sim = bi_sim(cfg);
  std::vector<ComboPair> pairs;
  for (const auto& p : cfg.bi_pairs) pairs.push_back(combo_pair(p));

  std::vector<ComboBiRuns> out(pairs.size());
  for (std::size_t c = 0; c < pairs.size(); ++c) {
    out[c].name = pairs[c].name();
    out[c].runs.resize(cfg.runs_per_combo());
  }
  parallel_for(pairs.size() * cfg.runs_per_combo(), threads, [&](std::size_t i) {
    const auto ix = detail::unflatten(cfg, i);
    const auto& pair = pairs[ix.combo];
    const auto bi = build_bilane_scenario(cfg.mu_grid[ix.i_mu], cfg.sigma_grid[ix.i_sigma],
                                          pair.first.coop, pair.second.coop,
                                          run_seed(cfg.base_seed, ix.i_mu, ix.i_sigma, ix.seed),
                                          sim.params, sim.layout);
    out[ix.combo].runs[i % cfg.runs_per_combo()] = run_bi_lane_change(bi, sim);
  });
  return out;
}

inline SweepGrid feasibility_grid(const SweepConfig& cfg, const ComboRuns& c) {
  return detail::make_grid<RunResult>(
      cfg, Metric::FeasibilityRate, c.name, c.runs,
      [](const RunResult& r) { return r.started ? 1.0 : 0.0; }, [](const RunResult&) { return true; });
}

inline SweepGrid efficient_grid(const SweepConfig& cfg, const ComboBiRuns& c) {
  return detail::make_grid<BiLaneResult>(
      cfg, Metric::EfficientFraction, c.name, c.runs,
      [](const BiLaneResult& r) { return r.efficient ? 1.0 : 0.0; },
      [](const BiLaneResult&) { return true; });
}

/// Mean total time over the runs that completed both lane changes.
inline SweepGrid total_time_grid(const SweepConfig& cfg, const ComboBiRuns& c) {
  return detail::make_grid<BiLaneResult>(
      cfg, Metric::MeanTotalTime, c.name, c.runs, [](const BiLaneResult& r) { return r.total_time; },
      [](const BiLaneResult& r) { return r.completed; });
}

/// Feasibility (started fraction) grid for each configured combo.
inline std::vector<SweepGrid> run_feasibility_sweep(const SweepConfig& cfg, int threads) {
  std::vector<SweepGrid> out;
  for (const auto& c : run_single_sweep(cfg, threads)) out.push_back(feasibility_grid(cfg, c));
  return out;
}

/// Efficient-fraction and mean-total-time grids for each configured pair.
inline std::vector<SweepGrid> run_time_sweep(const SweepConfig& cfg, int threads) {
  std::vector<SweepGrid> out;
  for (const auto& c : run_bi_sweep(cfg, threads)) {
    out.push_back(efficient_grid(cfg, c));
    out.push_back(total_time_grid(cfg, c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config file

/// Flat JSON object of key/value pairs. Every key is optional; unknown keys
/// are rejected so that typos do not silently fall back to defaults.
inline nlohmann::json to_json(const SweepConfig& c) {
  const auto& p = c.sim.params;
  const auto& m = c.sim.mpc;
  nlohmann::json j;
  j["mu_grid"] = c.mu_grid;
  j["sigma_grid"] = c.sigma_grid;
  j["seeds_per_cell"] = c.seeds_per_cell;
  j["coop_combos"] = c.coop_combos;
  j["bi_pairs"] = c.bi_pairs;
  j["wait_budget"] = c.wait_budget;
  j["bi_wait_budget"] = c.bi_wait_budget;
  j["bi_lane"] = c.bi_lane;
  j["base_seed"] = c.base_seed;
  j["output_path"] = c.output_path;
  j["d_max"] = p.d_max;
  j["a_max"] = p.a_max;
  j["a_max_L"] = p.a_max_L;
  j["a_s_r"] = p.a_s_r;
  j["tau"] = p.tau;
  j["l1"] = p.l1;
  j["l2"] = p.l2;
  j["l_v"] = p.l_v;
  j["R_buf"] = p.R_buf;
  j["l_w"] = p.l_w;
  j["Np"] = m.Np;
  j["Nc"] = m.Nc;
  j["Q"] = m.Q;
  j["R"] = m.R;
  j["P"] = m.P;
  j["delta_max"] = m.delta_max;
  j["gap_margin"] = m.gap_margin;
  j["disc_margin"] = m.disc_margin;
  j["inactive_accel"] = m.inactive_accel;
  j["inactive_decel"] = m.inactive_decel;
  j["qp_tol"] = m.qp_tol;
  j["qp_max_iter"] = m.qp_max_iter;
  j["t_h"] = c.sim.layout.t_h;
  j["min_gap"] = c.sim.layout.min_gap;
  j["lc_duration"] = c.sim.lc_duration;
  j["completion_tol"] = c.sim.completion_tol;
  j["end_margin"] = c.sim.end_margin;
  j["max_lc_time"] = c.sim.max_lc_time;
  return j;
}

inline SweepConfig sweep_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  SweepConfig c;
  const nlohmann::json known = to_json(c);
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw std::invalid_argument("config: unknown key '" + key + "'");

  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) j.at(key).get_to(dst);
  };
  auto& p = c.sim.params;
  auto& m = c.sim.mpc;
  get("mu_grid", c.mu_grid);
  get("sigma_grid", c.sigma_grid);
  get("seeds_per_cell", c.seeds_per_cell);
  get("coop_combos", c.coop_combos);
  get("bi_pairs", c.bi_pairs);
  get("wait_budget", c.wait_budget);
  get("bi_wait_budget", c.bi_wait_budget);
  get("bi_lane", c.bi_lane);
  get("base_seed", c.base_seed);
  get("output_path", c.output_path);
  get("d_max", p.d_max);
  get("a_max", p.a_max);
  get("a_max_L", p.a_max_L);
  get("a_s_r", p.a_s_r);
  get("tau", p.tau);
  get("l1", p.l1);
  get("l2", p.l2);
  get("l_v", p.l_v);
  get("R_buf", p.R_buf);
  get("l_w", p.l_w);
  get("Np", m.Np);
  get("Nc", m.Nc);
  get("Q", m.Q);
  get("R", m.R);
  get("P", m.P);
  get("delta_max", m.delta_max);
  get("gap_margin", m.gap_margin);
  get("disc_margin", m.disc_margin);
  get("inactive_accel", m.inactive_accel);
  get("inactive_decel", m.inactive_decel);
  get("qp_tol", m.qp_tol);
  get("qp_max_iter", m.qp_max_iter);
  get("t_h", c.sim.layout.t_h);
  get("min_gap", c.sim.layout.min_gap);
  get("lc_duration", c.sim.lc_duration);
  get("completion_tol", c.sim.completion_tol);
  get("end_margin", c.sim.end_margin);
  get("max_lc_time", c.sim.max_lc_time);
  c.validate();
  return c;
}

inline SweepConfig load_sweep_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config file " + path.string() + ": " + e.what());
  }
  return sweep_config_from_json(j);
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Hash of the canonical serialisation (keys sorted, shortest round-trip numbers).
inline std::string config_hash(const SweepConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json(c).dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Records

inline nlohmann::json to_json(const VehicleState& v) {
  return {{"x", v.x}, {"y", v.y}, {"v", v.v}, {"a", v.a}};
}

inline nlohmann::json to_json(const RunResult& r) {
  nlohmann::json j;
  j["initially_feasible"] = r.initially_feasible;
  j["started"] = r.started;
  j["started_after_wait"] = r.started_after_wait;
  j["completed"] = r.completed;
  j["aborted"] = r.aborted;
  j["collision"] = r.collision;
  j["wait_steps"] = r.wait_steps;
  j["lc_steps"] = r.lc_steps;
  j["infeasible_control_steps"] = r.infeasible_control_steps;
  j["committed_replans"] = r.committed_replans;
  j["total_time"] = r.total_time;
  auto finite = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  j["min_clearance"] = finite(r.min_clearance);
  j["min_longitudinal_gap_near"] = finite(r.min_longitudinal_gap_near);
  j["min_longitudinal_gap_far"] = finite(r.min_longitudinal_gap_far);
  j["cav_exit"] = to_json(r.cav_exit);
  return j;
}

inline nlohmann::json to_json(const BiLaneResult& r) {
  return {{"first", to_json(r.first)},
          {"second", to_json(r.second)},
          {"total_time", r.total_time},
          {"efficient", r.efficient},
          {"completed", r.completed}};
}

/// One line of the step trace.
inline nlohmann::json to_json(const StepRecord& rec) {
  nlohmann::json j;
  j["stage"] = rec.stage;
  j["step"] = rec.step;
  j["t"] = rec.time;
  j["phase"] = to_string(rec.phase);
  nlohmann::json vehicles = nlohmann::json::object();
  for (std::size_t i = 0; i < kNumRoles; ++i)
    vehicles[std::string(to_string(static_cast<Role>(i)))] = to_json(rec.fleet.s[i]);
  j["vehicles"] = vehicles;
  nlohmann::json u = nlohmann::json::object(), delta = nlohmann::json::object(),
                 fallback = nlohmann::json::object();
  for (std::size_t k = 0; k < kChdvRoles.size(); ++k) {
    const std::string name(to_string(kChdvRoles[k]));
    u[name] = rec.u[k];
    delta[name] = rec.delta[k];
    fallback[name] = rec.fallback[k];
  }
  j["u"] = u;
  j["delta"] = delta;
  j["fallback"] = fallback;
  j["cav_accel"] = rec.cav_accel;
  j["min_clearance"] = rec.min_clearance;
  j["control_feasible"] = rec.control_feasible;
  return j;
}

// ---------------------------------------------------------------------------
// Export

inline std::string format_number(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// Comma-separated table: header row "sigma\mu,<mu...>", one row per sigma.
inline std::string grid_csv(const SweepGrid& g) {
  std::ostringstream os;
  os << "sigma\\mu";
  for (double mu : g.mu_grid) os << ',' << format_number(mu);
  os << '\n';
  for (std::size_t r = 0; r < g.sigma_grid.size(); ++r) {
    os << format_number(g.sigma_grid[r]);
    for (std::size_t c = 0; c < g.mu_grid.size(); ++c) os << ',' << format_number(g.at(r, c));
    os << '\n';
  }
  return os.str();
}

inline std::string grid_file_name(const SweepGrid& g) {
  return std::string(to_string(g.metric)) + "_" + g.combo_name + ".csv";
}

inline nlohmann::json grid_summary(const SweepGrid& g, int seeds_per_cell, const std::string& hash) {
  nlohmann::json j;
  j["combo"] = g.combo_name;
  j["metric"] = to_string(g.metric);
  const double avg = g.average();
  j["average"] = std::isnan(avg) ? nlohmann::json(nullptr) : nlohmann::json(avg);
  j["seeds_per_cell"] = seeds_per_cell;
  j["cells"] = g.cells.size();
  j["config_hash"] = hash;
  j["file"] = grid_file_name(g);
  return j;
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline void export_grid(const SweepGrid& g, const std::filesystem::path& path) {
  write_file(path, grid_csv(g));
}

/// Writes one CSV per grid into `dir` plus summary.json listing them.
inline void export_sweep(const std::vector<SweepGrid>& grids, const SweepConfig& cfg,
                         const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
  const std::string hash = config_hash(cfg);
  nlohmann::json summary;
  summary["config_hash"] = hash;
  summary["grids"] = nlohmann::json::array();
  for (const auto& g : grids) {
    export_grid(g, dir / grid_file_name(g));
    summary["grids"].push_back(grid_summary(g, cfg.seeds_per_cell, hash));
  }
  write_file(dir / "summary.json", summary.dump(2) + "\n");
}

}  // namespace coopmpc
