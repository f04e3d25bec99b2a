#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "coopmpc/experiment.hpp"
#include "oracles.hpp"

using namespace coopmpc;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("coopmpc_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

SweepConfig small_sweep() {
  SweepConfig cfg;
  cfg.mu_grid = {50, 60, 70};
  cfg.sigma_grid = {1, 4, 7, 10};
  cfg.seeds_per_cell = 8;
  cfg.coop_combos = {"0", "100"};
  return cfg;
}

}  // namespace

TEST(Combos, Names) {
  EXPECT_EQ(named_combo("0").coop.active_count(), 0);
  EXPECT_EQ(named_combo("100").coop.active_count(), 4);
  const auto fh = named_combo("50-fhdv").coop;
  EXPECT_EQ(fh[Role::FHDV_near], Cooperation::Active);
  EXPECT_EQ(fh[Role::FHDV_far], Cooperation::Active);
  EXPECT_EQ(fh[Role::PHDV_near], Cooperation::Inactive);
  const auto near = named_combo("50-near").coop;
  EXPECT_EQ(near[Role::FHDV_near], Cooperation::Active);
  EXPECT_EQ(near[Role::PHDV_near], Cooperation::Active);
  EXPECT_EQ(near[Role::FHDV_far], Cooperation::Inactive);
  EXPECT_THROW(named_combo("75"), std::invalid_argument);
  const auto pair = combo_pair("50-phdv+100");
  EXPECT_EQ(pair.name(), "50-phdv+100");
  EXPECT_THROW(combo_pair("100"), std::invalid_argument);
}

TEST(SweepConfig, DefaultsAndValidation) {
  SweepConfig cfg;
  EXPECT_EQ(cfg.mu_grid.size(), 9u);
  EXPECT_EQ(cfg.mu_grid.front(), 40.0);
  EXPECT_EQ(cfg.mu_grid.back(), 80.0);
  EXPECT_EQ(cfg.sigma_grid.size(), 10u);
  EXPECT_EQ(cfg.seeds_per_cell, 100);
  EXPECT_EQ(cfg.wait_budget, 2.0);
  EXPECT_NO_THROW(cfg.validate());
  cfg.seeds_per_cell = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = SweepConfig{};
  cfg.mu_grid.clear();
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = SweepConfig{};
  cfg.coop_combos = {"bogus"};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Config, RoundTripAndUnknownKey) {
  SweepConfig cfg = small_sweep();
  cfg.sim.params.l1 = 6.0;
  cfg.sim.mpc.delta_max = 1.5;
  cfg.base_seed = 99;
  const SweepConfig back = sweep_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
  EXPECT_EQ(config_hash(back), config_hash(cfg));

  nlohmann::json j = to_json(cfg);
  j["mu_gird"] = {1, 2};
  EXPECT_THROW(sweep_config_from_json(j), std::invalid_argument);
  EXPECT_THROW(sweep_config_from_json(nlohmann::json::array()), std::invalid_argument);

  nlohmann::json partial = {{"seeds_per_cell", 3}, {"tau", 0.1}};
  const SweepConfig p = sweep_config_from_json(partial);
  EXPECT_EQ(p.seeds_per_cell, 3);
  EXPECT_EQ(p.sim.params.tau, 0.1);
  EXPECT_EQ(p.mu_grid, SweepConfig{}.mu_grid);
}

TEST(Config, LoadFromFile) {
  const fs::path dir = scratch_dir("config");
  write_file(dir / "cfg.json", R"({"mu_grid": [55], "sigma_grid": [2, 3], "wait_budget": 6})");
  const SweepConfig cfg = load_sweep_config(dir / "cfg.json");
  EXPECT_EQ(cfg.mu_grid, std::vector<double>{55});
  EXPECT_EQ(cfg.sigma_grid.size(), 2u);
  EXPECT_EQ(cfg.wait_budget, 6.0);
  EXPECT_THROW(load_sweep_config(dir / "missing.json"), std::runtime_error);
}

TEST(Config, HashChangesWithEveryField) {
  const SweepConfig base;
  const std::string h0 = config_hash(base);
  const nlohmann::json j0 = to_json(base);
  std::set<std::string> hashes{h0};
  for (const auto& [key, value] : j0.items()) {
    nlohmann::json j = j0;
    if (value.is_boolean()) j[key] = !value.get<bool>();
    else if (value.is_number_integer() || value.is_number_unsigned()) j[key] = value.get<std::int64_t>() + 1;
    else if (value.is_number()) j[key] = value.get<double>() * 1.01 + 0.001;
    else if (value.is_string()) j[key] = value.get<std::string>() + "_x";
    else if (value.is_array() && key.find("grid") != std::string::npos) j[key].push_back(3.0);
    else if (value.is_array()) j[key].erase(j[key].begin());
    SweepConfig c;
    try {
      c = sweep_config_from_json(j);
    } catch (const std::invalid_argument&) {
      // Perturbation broke an invariant (e.g. Np != Nc + 1); hash the raw change instead.
      EXPECT_NE(fnv1a(j.dump()), fnv1a(j0.dump())) << key;
      continue;
    }
    const std::string h = config_hash(c);
    EXPECT_NE(h, h0) << key;
    hashes.insert(h);
  }
  EXPECT_GT(hashes.size(), j0.size() - 3);
  EXPECT_EQ(config_hash(base), h0);
  EXPECT_EQ(h0.size(), 16u);
}

TEST(Export, OneByOneGridIsTwoByTwo) {
  SweepGrid g{Metric::FeasibilityRate, "100", {60}, {5}, {0.75}};
  const fs::path dir = scratch_dir("one");
  export_grid(g, dir / "g.csv");
  const auto rows = read_csv(dir / "g.csv");
  ASSERT_EQ(rows.size(), 2u);
  ASSERT_EQ(rows[0].size(), 2u);
  ASSERT_EQ(rows[1].size(), 2u);
  EXPECT_EQ(rows[0][1], "60.000000");
  EXPECT_EQ(rows[1][0], "5.000000");
  EXPECT_EQ(rows[1][1], "0.750000");
}

TEST(Export, ReExportIsByteIdentical) {
  SweepGrid g{Metric::MeanTotalTime, "0+0", {40, 50}, {1, 2, 3}, {7.2, 8.1, std::nan(""), 9.0, 1.0 / 3.0, 12.5}};
  const fs::path dir = scratch_dir("bytes");
  export_grid(g, dir / "a.csv");
  export_grid(g, dir / "b.csv");
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
  EXPECT_EQ(read_csv(dir / "a.csv")[2][1], "");  // NaN cell stays empty
}

TEST(Export, UnwritablePathIsReported) {
  SweepGrid g{Metric::FeasibilityRate, "100", {60}, {5}, {0.75}};
  try {
    export_grid(g, "/nonexistent_dir_coopmpc/x.csv");
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent_dir_coopmpc/x.csv"), std::string::npos);
  }
}

TEST(Export, SummaryAverageMatchesCells) {
  SweepConfig cfg = small_sweep();
  cfg.seeds_per_cell = 3;
  const fs::path dir = scratch_dir("summary");
  const auto grids = run_feasibility_sweep(cfg, 2);
  export_sweep(grids, cfg, dir);
  const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(summary.at("config_hash"), config_hash(cfg));
  ASSERT_EQ(summary.at("grids").size(), grids.size());
  for (const auto& entry : summary.at("grids")) {
    const auto rows = read_csv(dir / entry.at("file").get<std::string>());
    ASSERT_EQ(rows.size(), cfg.sigma_grid.size() + 1);
    double sum = 0.0;
    int n = 0;
    for (std::size_t r = 1; r < rows.size(); ++r)
      for (std::size_t c = 1; c < rows[r].size(); ++c) {
        if (rows[r][c].empty()) continue;
        sum += std::stod(rows[r][c]);
        ++n;
      }
    ASSERT_GT(n, 0);
    EXPECT_NEAR(entry.at("average").get<double>(), sum / n, 1e-6);
    EXPECT_EQ(entry.at("seeds_per_cell"), 3);
    EXPECT_EQ(entry.at("config_hash"), config_hash(cfg));
  }
}

TEST(Sweep, ThreadCountDoesNotChangeResults) {
  SweepConfig cfg = small_sweep();
  cfg.seeds_per_cell = 2;
  const auto a = run_single_sweep(cfg, 1);
  const auto b = run_single_sweep(cfg, 3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t c = 0; c < a.size(); ++c) EXPECT_EQ(a[c].runs, b[c].runs);
}

TEST(Sweep, ParallelForPropagatesErrors) {
  EXPECT_THROW(parallel_for(100, 3,
                            [](std::size_t i) {
                              if (i == 37) throw std::runtime_error("boom");
                            }),
               std::runtime_error);
}

TEST(Sweep, HomogeneousFlowIsFullyFeasible) {
  SweepConfig cfg;
  cfg.mu_grid = {60};
  cfg.sigma_grid = {0};
  cfg.seeds_per_cell = 3;
  cfg.coop_combos = {"100"};
  const auto grids = run_feasibility_sweep(cfg, 1);
  ASSERT_EQ(grids.size(), 1u);
  EXPECT_EQ(grids[0].at(0, 0), 1.0);
}

TEST(Sweep, RunSeedsArePairedAcrossCombos) {
  EXPECT_EQ(run_seed(1, 2, 3, 4), run_seed(1, 2, 3, 4));
  EXPECT_NE(run_seed(1, 2, 3, 4), run_seed(1, 3, 2, 4));
  EXPECT_NE(run_seed(1, 2, 3, 4), run_seed(2, 2, 3, 4));
}

class SweepProperties : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = new SweepConfig(small_sweep());
    runs_ = new std::vector<ComboRuns>(run_single_sweep(*cfg_, default_threads()));
  }
  static void TearDownTestSuite() {
    delete runs_;
    delete cfg_;
  }
  static SweepConfig* cfg_;
  static std::vector<ComboRuns>* runs_;
};

SweepConfig* SweepProperties::cfg_ = nullptr;
std::vector<ComboRuns>* SweepProperties::runs_ = nullptr;

TEST_F(SweepProperties, FeasibilityDegradesWithSigma) {
  for (const auto& c : *runs_) {
    const SweepGrid g = feasibility_grid(*cfg_, c);
    for (double v : g.cells) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_LE(oracle::spearman(cfg_->sigma_grid, g.row_means()), 0.0) << c.name;
  }
}

TEST_F(SweepProperties, ActiveStartedSetContainsInactive) {
  const auto& none = (*runs_)[0];
  const auto& full = (*runs_)[1];
  ASSERT_EQ(none.name, "0");
  ASSERT_EQ(full.name, "100");
  const std::size_t s = static_cast<std::size_t>(cfg_->seeds_per_cell);
  int superset_cells = 0;
  for (std::size_t cell = 0; cell < cfg_->cells(); ++cell) {
    bool superset = true;
    for (std::size_t k = 0; k < s; ++k)
      if (none.runs[cell * s + k].started && !full.runs[cell * s + k].started) superset = false;
    superset_cells += superset ? 1 : 0;
  }
  EXPECT_GE(superset_cells, static_cast<int>(std::ceil(0.9 * static_cast<double>(cfg_->cells()))));
}

TEST_F(SweepProperties, NoCollisions) {
  for (const auto& c : *runs_)
    for (const auto& r : c.runs) {
      EXPECT_FALSE(r.collision);
      EXPECT_GE(r.min_longitudinal_gap_far, cfg_->sim.params.l2 - 1e-6);
      if (r.started) { EXPECT_GE(r.min_longitudinal_gap_near, cfg_->sim.params.l1 - 1e-6); }
    }
}

TEST(Records, RunResultJson) {
  RunResult r;
  r.started = true;
  r.wait_steps = 3;
  const auto j = to_json(r);
  EXPECT_EQ(j.at("started"), true);
  EXPECT_EQ(j.at("wait_steps"), 3);
  EXPECT_TRUE(j.at("min_clearance").is_null());
}
