#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cgms/pipeline.hpp"

using namespace cgms;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cgms_test_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

nlohmann::json minimal_config() {
  return nlohmann::json::parse(R"({
    "name": "smoke",
    "grid": {"nx": 20, "ny": 20, "Nx": 4, "Ny": 4},
    "medium": {"type": "inclusion", "M": 4, "jitter_cells": 1},
    "clusters": [1],
    "basis": [1],
    "error_subset_size": 4,
    "seed": 3
  })");
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(CGMS_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Config, DefaultsAndRejections) {
  const ExperimentConfig c = parse_config(minimal_config());
  EXPECT_EQ(c.nx, 20);
  EXPECT_EQ(c.medium.M, 4);
  EXPECT_EQ(c.medium.seed, 3u);
  EXPECT_EQ(c.basis, (std::vector<int>{1}));

  auto bad = minimal_config();
  bad["bogus"] = 1;
  EXPECT_THROW(parse_config(bad), config_error);
  bad = minimal_config();
  bad["grid"]["Nx"] = 3;
  EXPECT_THROW(parse_config(bad), config_error);
  bad = minimal_config();
  bad["basis"] = {0};
  EXPECT_THROW(parse_config(bad), config_error);
  bad = minimal_config();
  bad["basis"] = {1000};
  EXPECT_THROW(parse_config(bad), config_error);
  bad = minimal_config();
  bad["modes"] = {"galerkin"};
  EXPECT_THROW(parse_config(bad), config_error);
  bad = minimal_config();
  bad["grid"]["nx"] = "twenty";
  EXPECT_THROW(parse_config(bad), config_error);
}

TEST(Config, SeedOverrideReplacesAllSeeds) {
  auto j = minimal_config();
  j["medium"]["seed"] = 99;
  ExperimentConfig c = parse_config(j);
  EXPECT_EQ(c.medium.seed, 99u);
  override_seed(c, 12);
  EXPECT_EQ(c.seed, 12u);
  EXPECT_EQ(c.medium.seed, 12u);
}

TEST(Cli, MinimalRunWritesAllOutputs) {
  const fs::path dir = scratch("minimal");
  const fs::path cfg = write_config(dir, minimal_config());
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir / "out").string()), 0);
  for (const char* f : {"report.json", "errors.csv", "online_trace.csv", "clusters_J1.csv"})
    EXPECT_TRUE(fs::exists(dir / "out" / f)) << f;
  EXPECT_EQ(count_lines(slurp(dir / "out" / "errors.csv")), 2);
  const auto report = nlohmann::json::parse(slurp(dir / "out" / "report.json"));
  EXPECT_EQ(report["config"], minimal_config());
  EXPECT_TRUE(report.contains("timing_seconds"));
  EXPECT_EQ(report["errors"].size(), 1u);
}

TEST(Cli, RerunIsByteIdentical) {
  const fs::path dir = scratch("determinism");
  auto j = minimal_config();
  j["clusters"] = {1, 2};
  j["basis"] = {1, 3};
  j["modes"] = {"per-realization", "ensemble"};
  j["online"] = {{"rounds", 1}, {"n_basis", 1}};
  const fs::path cfg = write_config(dir, j);
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir / "a").string()), 0);
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir / "b").string() + " --threads 2"), 0);
  for (const char* f : {"errors.csv", "online_trace.csv", "clusters_J1.csv", "clusters_J2.csv"})
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  EXPECT_EQ(count_lines(slurp(dir / "a" / "errors.csv")), 1 + 2 * 2 * 2);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("exit");
  auto j = minimal_config();
  j["grid"]["Nx"] = 3;
  EXPECT_EQ(cli("run --config " + write_config(dir, j).string() + " --out " + (dir / "o").string()), 2);
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_EQ(cli("run --config " + (dir / "broken.json").string() + " --out " + (dir / "o").string()), 2);
  EXPECT_EQ(cli("run --out x"), 2);
  EXPECT_EQ(cli("frobnicate"), 2);
  j = minimal_config();
  j["medium"] = {{"type", "file"}, {"path", (dir / "missing").string()}};
  EXPECT_EQ(cli("run --config " + write_config(dir, j).string() + " --out " + (dir / "o").string()), 2);
}

TEST(Cli, GenerateEnsembleThenRunFromFile) {
  const fs::path dir = scratch("generate");
  const fs::path cfg = write_config(dir, minimal_config());
  ASSERT_EQ(cli("generate-ensemble --config " + cfg.string() + " --out " + (dir / "ens").string()), 0);
  const PermeabilityEnsemble ens = load_ensemble(dir / "ens");
  EXPECT_EQ(ens.size(), 4);
  auto j = minimal_config();
  j["medium"] = {{"type", "file"}, {"path", (dir / "ens").string()}};
  const fs::path cfg2 = dir / "from_file.json";
  std::ofstream(cfg2) << j.dump();
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + (dir / "gen").string()), 0);
  ASSERT_EQ(cli("run --config " + cfg2.string() + " --out " + (dir / "file").string()), 0);
  EXPECT_EQ(slurp(dir / "gen" / "errors.csv"), slurp(dir / "file" / "errors.csv"));
}

TEST(Compare, IdenticalPerturbedAndMismatched) {
  const fs::path dir = scratch("compare");
  const std::string header = "J,n_basis,mode,e1_omega,e2_omega,e1_S,e2_S\n";
  std::ofstream(dir / "a.csv") << header << "1,1,per-realization,0.2,0.1,0.3,0.05\n1,3,per-realization,0.1,0.05,0.2,0.02\n";
  std::ofstream(dir / "b.csv") << header << "1,1,per-realization,0.2,0.1,0.33,0.05\n1,3,per-realization,0.1,0.05,0.2,0.02\n";
  std::ofstream(dir / "c.csv") << header << "1,1,per-realization,0.2,0.1,0.3,0.05\n";
  const ErrorTable a = read_error_table(dir / "a.csv"), b = read_error_table(dir / "b.csv");
  EXPECT_TRUE(compare_tables(a, a, 0.01).empty());
  const auto d = compare_tables(a, b, 0.01);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_TRUE(d[0].flagged);
  EXPECT_EQ(d[0].column, "e1_S");
  EXPECT_NEAR(d[0].relative, 0.03 / 0.33, 1e-12);
  for (const auto& x : compare_tables(a, b, 0.2)) EXPECT_FALSE(x.flagged);
  EXPECT_THROW(compare_tables(a, read_error_table(dir / "c.csv"), 0.01), config_error);

  EXPECT_EQ(cli("compare " + (dir / "a.csv").string() + " " + (dir / "a.csv").string()), 0);
  EXPECT_EQ(cli("compare " + (dir / "a.csv").string() + " " + (dir / "b.csv").string() + " --tol 0.01"), 1);
  EXPECT_EQ(cli("compare " + (dir / "a.csv").string() + " " + (dir / "b.csv").string() + " --tol 0.2"), 0);
  EXPECT_EQ(cli("compare " + (dir / "a.csv").string() + " " + (dir / "c.csv").string()), 2);
}

TEST(Run, BasisListGivesNonincreasingErrors) {
  const fs::path dir = scratch("basis");
  auto j = minimal_config();
  j["basis"] = {1, 3, 5};
  const RunReport rep = run_experiment(parse_config(j), dir);
  ASSERT_EQ(rep.rows.size(), 3u);
  EXPECT_LE(rep.rows[1].report.e1_S, rep.rows[0].report.e1_S);
  EXPECT_LE(rep.rows[2].report.e1_S, rep.rows[1].report.e1_S);
}

TEST(Run, KLCacheDoesNotChangeResults) {
  const fs::path dir = scratch("cache");
  auto j = minimal_config();
  j["clusters"] = {2};
  j["localreduce"] = {{"layers", 2}};
  run_experiment(parse_config(j), dir / "cold");
  j["cache_dir"] = (dir / "kl").string();
  run_experiment(parse_config(j), dir / "fill");
  run_experiment(parse_config(j), dir / "warm");
  EXPECT_FALSE(fs::is_empty(dir / "kl"));
  const std::string cold = slurp(dir / "cold" / "errors.csv");
  EXPECT_EQ(cold, slurp(dir / "fill" / "errors.csv"));
  EXPECT_EQ(cold, slurp(dir / "warm" / "errors.csv"));
  EXPECT_EQ(slurp(dir / "cold" / "clusters_J2.csv"), slurp(dir / "warm" / "clusters_J2.csv"));
}

TEST(Run, ClusterCsvCoversEveryRealization) {
  const fs::path dir = scratch("clusters");
  auto j = minimal_config();
  j["clusters"] = {3};
  run_experiment(parse_config(j), dir);
  std::ifstream in(dir / "clusters_J3.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "i,omega,label");
  std::map<int, std::set<int>> seen;
  while (std::getline(in, line)) {
    int i, omega, label;
    ASSERT_EQ(std::sscanf(line.c_str(), "%d,%d,%d", &i, &omega, &label), 3);
    EXPECT_GE(label, 0);
    EXPECT_LT(label, 3);
    seen[i].insert(omega);
  }
  EXPECT_EQ(seen.size(), 9u);
  for (const auto& [i, s] : seen) EXPECT_EQ(s.size(), 4u);
}
