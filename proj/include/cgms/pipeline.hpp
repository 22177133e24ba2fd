#pragma once

// Experiment driver: JSON configuration, the full pipeline (ensemble ->
// fine reference -> local reduction -> clustering -> offline bases ->
// coarse solves -> online enrichment -> errors) and its output files.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "cgms/clustering.hpp"
#include "cgms/errors.hpp"
#include "cgms/fem.hpp"
#include "cgms/fields.hpp"
#include "cgms/grid.hpp"
#include "cgms/localreduce.hpp"
#include "cgms/offline.hpp"
#include "cgms/online.hpp"
#include "cgms/solver.hpp"

namespace cgms {

inline constexpr const char* version_string = "0.1.0";

struct MediumSpec {
  std::string type = "inclusion";  // inclusion | logsine | file
  int M = 100;
  std::uint64_t seed = 1;
  std::string path;
  InclusionMediumConfig inclusion = InclusionMediumConfig::defaults(4);
};

struct OnlineSpec {
  bool enabled = false;
  int clusters = 1;
  int n_basis = 3;
  OnlineOptions options{};
  CouplingMode mode = CouplingMode::per_realization;
};

struct ExperimentConfig {
  std::string name = "experiment";
  int nx = 100, ny = 100, Nx = 10, Ny = 10;
  MediumSpec medium{};
  double source = 1.0;
  int subset_size = 0;        // 0: max(8, ceil(0.1 M))
  int error_subset_size = 10;
  std::vector<int> clusters{1};
  std::vector<int> basis{1, 3, 5};
  std::vector<CouplingMode> modes{CouplingMode::per_realization};
  LocalReduceOptions localreduce{};
  OfflineOptions offline{};
  KMeansOptions kmeans{};
  OnlineSpec online{};
  bool oracle = false;        // realization-wise GMsFEM errors on S
  std::uint64_t seed = 1;
  int threads = 0;
  std::string cache_dir;
  nlohmann::json raw;         // verbatim echo

  void validate() const {
    if (nx < 2 || ny < 2 || Nx < 2 || Ny < 2) throw config_error("grid sizes must be at least 2");
    if (nx % Nx != 0 || ny % Ny != 0) throw config_error("fine grid must refine the coarse grid");
    if (medium.M < 1) throw config_error("medium.M must be positive");
    if (medium.type != "inclusion" && medium.type != "logsine" && medium.type != "file")
      throw config_error("medium.type must be inclusion, logsine or file");
    if (medium.type == "file" && medium.path.empty()) throw config_error("medium.path is required for file media");
    if (medium.type == "inclusion") medium.inclusion.validate();
    if (subset_size < 0 || error_subset_size < 1) throw config_error("subset sizes must be positive");
    if (clusters.empty() || basis.empty() || modes.empty()) throw config_error("clusters, basis and modes must be nonempty");
    const int max_basis = 4 * (nx / Nx + ny / Ny);  // fine boundary nodes of a 2x2-coarse-cell D_i
    for (int b : basis)
      if (b < 1 || b > max_basis)
        throw config_error("basis count " + std::to_string(b) + " outside [1, " + std::to_string(max_basis) + "]");
    for (int J : clusters)
      if (J < 1) throw config_error("cluster counts must be positive");
    if (localreduce.layers < 0) throw config_error("localreduce.layers must be nonnegative");
    if (!(localreduce.range.eps > 0.0) || !(localreduce.range.alpha > 1.0) || localreduce.range.k_probe < 1 ||
        localreduce.range.k_init < 1)
      throw config_error("range finder needs eps > 0, alpha > 1, k_probe >= 1, k_init >= 1");
    if (!(localreduce.energy_tol > 0.0 && localreduce.energy_tol <= 1.0)) throw config_error("energy_tol must lie in (0, 1]");
    if (kmeans.max_iter < 1 || kmeans.restarts < 1) throw config_error("kmeans.max_iter and restarts must be positive");
    if (online.enabled) {
      if (online.options.rounds < 1) throw config_error("online.rounds must be at least 1");
      if (online.clusters < 1) throw config_error("online.clusters must be positive");
      if (online.n_basis < 1 || online.n_basis > max_basis) throw config_error("online.n_basis out of range");
      if (!(online.options.theta > 0.0 && online.options.theta <= 1.0)) throw config_error("online.theta must lie in (0, 1]");
    }
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw config_error(where + " must be an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw config_error("unknown key '" + it.key() + "' in " + where);
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline CouplingMode parse_mode(const std::string& s) {
  if (s == "per-realization") return CouplingMode::per_realization;
  if (s == "ensemble") return CouplingMode::ensemble;
  throw config_error("mode must be per-realization or ensemble, got '" + s + "'");
}

inline Inclusion parse_shape(const nlohmann::json& j) {
  reject_unknown(j, {"shape", "cx", "cy", "wx", "wy"}, "inclusion");
  Inclusion s;
  const std::string shape = j.value("shape", "rectangle");
  if (shape == "rectangle")
    s.shape = Shape::rectangle;
  else if (shape == "ellipse")
    s.shape = Shape::ellipse;
  else
    throw config_error("inclusion shape must be rectangle or ellipse");
  s.cx = j.at("cx");
  s.cy = j.at("cy");
  s.wx = j.at("wx");
  s.wy = j.at("wy");
  return s;
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::read;
  ExperimentConfig c;
  c.raw = j;
  try {
    detail::reject_unknown(j, {"name", "grid", "medium", "source", "subset_size", "error_subset_size", "clusters", "basis",
                               "modes", "localreduce", "offline", "kmeans", "online", "oracle", "seed", "threads",
                               "cache_dir"},
                           "config");
    read(j, "name", c.name);
    if (j.contains("grid")) {
      const auto& g = j.at("grid");
      detail::reject_unknown(g, {"nx", "ny", "Nx", "Ny"}, "grid");
      read(g, "nx", c.nx);
      read(g, "ny", c.ny);
      read(g, "Nx", c.Nx);
      read(g, "Ny", c.Ny);
    }
    read(j, "seed", c.seed);
    c.medium.seed = c.seed;
    if (j.contains("medium")) {
      const auto& m = j.at("medium");
      detail::reject_unknown(m, {"type", "M", "seed", "path", "background", "contrast_min", "contrast_max", "jitter_cells",
                                 "inclusions", "channels"},
                             "medium");
      read(m, "type", c.medium.type);
      read(m, "M", c.medium.M);
      read(m, "seed", c.medium.seed);
      read(m, "path", c.medium.path);
      auto& inc = c.medium.inclusion;
      read(m, "background", inc.background);
      read(m, "contrast_min", inc.contrast_min);
      read(m, "contrast_max", inc.contrast_max);
      read(m, "jitter_cells", inc.jitter_cells);
      if (m.contains("inclusions")) {
        inc.inclusions.clear();
        for (const auto& s : m.at("inclusions")) inc.inclusions.push_back(detail::parse_shape(s));
      }
      if (m.contains("channels")) {
        inc.channels.clear();
        for (const auto& s : m.at("channels")) inc.channels.push_back(detail::parse_shape(s));
      }
    }
    c.medium.inclusion.seed = c.medium.seed;
    read(j, "source", c.source);
    read(j, "subset_size", c.subset_size);
    read(j, "error_subset_size", c.error_subset_size);
    read(j, "clusters", c.clusters);
    read(j, "basis", c.basis);
    if (j.contains("modes")) {
      c.modes.clear();
      for (const auto& s : j.at("modes")) c.modes.push_back(detail::parse_mode(s.get<std::string>()));
    }
    if (j.contains("localreduce")) {
      const auto& l = j.at("localreduce");
      detail::reject_unknown(l, {"layers", "eps", "alpha", "k_init", "k_probe", "k_max", "energy_tol", "include_source"},
                             "localreduce");
      read(l, "layers", c.localreduce.layers);
      read(l, "eps", c.localreduce.range.eps);
      read(l, "alpha", c.localreduce.range.alpha);
      read(l, "k_init", c.localreduce.range.k_init);
      read(l, "k_probe", c.localreduce.range.k_probe);
      read(l, "k_max", c.localreduce.range.k_max);
      read(l, "energy_tol", c.localreduce.energy_tol);
      read(l, "include_source", c.localreduce.include_source);
    }
    if (j.contains("offline")) {
      const auto& o = j.at("offline");
      detail::reject_unknown(o, {"randomized", "eigen_threshold", "layers"}, "offline");
      read(o, "randomized", c.offline.randomized);
      read(o, "eigen_threshold", c.offline.spectral.eigen_threshold);
      c.offline.layers = c.localreduce.layers;
      read(o, "layers", c.offline.layers);
    } else {
      c.offline.layers = c.localreduce.layers;
    }
    c.offline.range = c.localreduce.range;
    if (j.contains("kmeans")) {
      const auto& k = j.at("kmeans");
      detail::reject_unknown(k, {"max_iter", "restarts"}, "kmeans");
      read(k, "max_iter", c.kmeans.max_iter);
      read(k, "restarts", c.kmeans.restarts);
    }
    if (j.contains("online")) {
      const auto& o = j.at("online");
      detail::reject_unknown(o, {"rounds", "clusters", "n_basis", "selection", "theta", "norm", "mode"}, "online");
      c.online.enabled = true;
      read(o, "rounds", c.online.options.rounds);
      read(o, "clusters", c.online.clusters);
      read(o, "n_basis", c.online.n_basis);
      read(o, "theta", c.online.options.theta);
      const std::string sel = o.value("selection", "cluster-max");
      if (sel == "cluster-max")
        c.online.options.selection = OnlineSelection::cluster_max;
      else if (sel == "top-fraction")
        c.online.options.selection = OnlineSelection::top_fraction;
      else
        throw config_error("online.selection must be cluster-max or top-fraction");
      const std::string norm = o.value("norm", "l2");
      if (norm == "l2")
        c.online.options.norm = ResidualNorm::l2;
      else if (norm == "energy-dual")
        c.online.options.norm = ResidualNorm::energy_dual;
      else
        throw config_error("online.norm must be l2 or energy-dual");
      c.online.mode = detail::parse_mode(o.value("mode", "per-realization"));
    }
    read(j, "oracle", c.oracle);
    read(j, "threads", c.threads);
    read(j, "cache_dir", c.cache_dir);
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("invalid config: ") + e.what());
  }
  c.localreduce.seed = derive_seed(c.seed, stream::random_boundary);
  c.offline.seed = derive_seed(c.seed, stream::random_boundary, {1});
  c.kmeans.seed = derive_seed(c.seed, stream::kmeans);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot read config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

/// Replaces every seed (the base seed and the medium seed) and re-derives streams.
inline void override_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.raw["seed"] = seed;
  if (c.raw.contains("medium")) c.raw["medium"].erase("seed");
  c = parse_config(c.raw);
}

inline PermeabilityEnsemble make_ensemble(const ExperimentConfig& c) {
  const auto [fine, coarse] = build_grids(c.nx, c.ny, c.Nx, c.Ny);
  PermeabilityEnsemble ens;
  if (c.medium.type == "inclusion") {
    ens = generate_inclusion_medium(fine, c.medium.inclusion, c.medium.M);
  } else if (c.medium.type == "logsine") {
    ens = generate_logsine_medium(fine, c.medium.seed, c.medium.M);
  } else {
    ens = load_ensemble(c.medium.path);
    if (ens.grid.nx != c.nx || ens.grid.ny != c.ny)
      throw config_error("ensemble grid " + std::to_string(ens.grid.nx) + "x" + std::to_string(ens.grid.ny) +
                         " does not match the config grid");
  }
  ens.validate();
  return ens;
}

// ---------------------------------------------------------------------------
// Run

struct ErrorRow {
  int J = 1;
  int n_basis = 1;
  CouplingMode mode = CouplingMode::per_realization;
  ErrorReport report;
};

struct RunReport {
  std::vector<ErrorRow> rows;
  std::vector<TraceRow> online_trace;
  std::map<int, ErrorReport> oracle;  // n_basis -> realization-wise GMsFEM errors on S
  std::vector<int> error_subset;
  nlohmann::json details;
};

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12e", v);
  return buf;
}

namespace detail {

class StageTimer {
 public:
  explicit StageTimer(nlohmann::json& sink) : sink_(sink) {}
  template <class Fn>
  auto operator()(const std::string& stage, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    if constexpr (std::is_void_v<decltype(fn())>) {
      wrap(stage, fn);
      sink_[stage] = sink_.value(stage, 0.0) + seconds_since(t0);
    } else {
      auto out = wrap(stage, fn);
      sink_[stage] = sink_.value(stage, 0.0) + seconds_since(t0);
      return out;
    }
  }

 private:
  template <class Fn>
  static auto wrap(const std::string& stage, Fn& fn) {
    try {
      return fn();
    } catch (const numerical_error& e) {
      throw numerical_error("stage " + stage + ": " + e.what());
    }
  }
  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  nlohmann::json& sink_;
};

inline nlohmann::json to_json(const ErrorReport& r) {
  return {{"e1_omega", r.e1_omega}, {"e2_omega", r.e2_omega}, {"e1_S", r.e1_S}, {"e2_S", r.e2_S},
          {"relative", {{"e1_omega", r.r1_omega}, {"e2_omega", r.r2_omega}, {"e1_S", r.r1_S}, {"e2_S", r.r2_S}}}};
}

}  // namespace detail

/// Per-neighborhood cluster partitions for a cluster count J.
inline std::vector<ClusterPartition> cluster_neighborhoods(const std::vector<Neighborhood>& nbs, const PermeabilityEnsemble& ens,
                                                           const std::vector<FeatureTable>& features, int J,
                                                           const KMeansOptions& base, nlohmann::json* info = nullptr,
                                                           int threads = 0) {
  std::vector<ClusterPartition> parts(nbs.size());
  std::vector<KMeansResult> results(nbs.size());
  const int Jc = std::min(J, ens.size());
  parallel_for(static_cast<int>(nbs.size()), threads, [&](int i) {
    if (Jc == 1) {
      parts[i] = single_cluster_partition(nbs[i], ens);
      results[i].clusters = 1;
      return;
    }
    KMeansOptions o = base;
    o.clusters = Jc;
    o.seed = derive_seed(base.seed, static_cast<std::uint64_t>(i));
    results[i] = kmeans(features[i].rows, o);
    parts[i] = make_partition(nbs[i], ens, results[i].labels);
  });
  if (info) {
    nlohmann::json per = nlohmann::json::array();
    for (std::size_t i = 0; i < nbs.size(); ++i)
      per.push_back({{"i", i}, {"clusters", parts[i].clusters}, {"objective", results[i].objective},
                     {"iterations", results[i].iterations}, {"reduced", results[i].reduced}});
    *info = std::move(per);
  }
  return parts;
}

inline void write_cluster_csv(const std::filesystem::path& path, const std::vector<ClusterPartition>& parts) {
  std::ofstream out(path);
  out << "i,omega,label\n";
  for (const auto& p : parts)
    for (std::size_t m = 0; m < p.labels.size(); ++m) out << p.neighborhood << ',' << m << ',' << p.labels[m] << '\n';
}

inline RunReport run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  RunReport rep;
  nlohmann::json timing = nlohmann::json::object();
  detail::StageTimer timed(timing);
  const int threads = cfg.threads;

  const auto [fine, coarse] = build_grids(cfg.nx, cfg.ny, cfg.Nx, cfg.Ny);
  const PermeabilityEnsemble ens = timed("ensemble", [&] { return make_ensemble(cfg); });
  const int M = ens.size();
  const Vector source = constant_source(fine, cfg.source);
  const std::vector<Neighborhood> nbs = all_neighborhoods(fine, coarse);
  const FineProblem fp = timed("fine_assembly", [&] { return make_fine_problem(ens, source, threads); });
  const std::vector<Vector> u_h = timed("fine_reference", [&] { return fine_reference_solve(fp, threads); });
  rep.error_subset = default_error_subset(M, cfg.error_subset_size, cfg.seed);
  const std::span<const double> w(ens.weights.data(), ens.weights.size());

  std::set<int> cluster_counts(cfg.clusters.begin(), cfg.clusters.end());
  if (cfg.online.enabled) cluster_counts.insert(cfg.online.clusters);
  const bool need_features = std::any_of(cluster_counts.begin(), cluster_counts.end(), [M](int J) { return std::min(J, M) > 1; });

  std::vector<FeatureTable> features;
  nlohmann::json lr_info = nlohmann::json::array();
  std::vector<int> subset;
  if (need_features) {
    subset = cfg.subset_size > 0 ? std::vector<int>() : default_snapshot_subset(M);
    if (cfg.subset_size > 0)
      for (int s = 0; s < std::min(cfg.subset_size, M); ++s) subset.push_back(s);
    const std::vector<NeighborhoodReduction> red = timed("localreduce", [&] {
      return reduce_all_neighborhoods(nbs, ens, subset, cfg.localreduce, &source, cfg.cache_dir.empty() ? fs::path() : fs::path(cfg.cache_dir),
                                      threads);
    });
    for (const auto& r : red) {
      features.push_back(build_features(r.neighborhood, r.reduced));
      lr_info.push_back({{"i", r.neighborhood}, {"k", r.count.k}, {"capped", r.count.capped}, {"L", r.kl.L},
                         {"retained_energy", r.kl.retained_fraction()}, {"regularized_solves", r.regularized}});
    }
  }

  const int n_max = *std::max_element(cfg.basis.begin(), cfg.basis.end());
  nlohmann::json clustering_info = nlohmann::json::object();
  std::map<int, std::vector<ClusterPartition>> partitions;
  for (int J : cluster_counts) {
    nlohmann::json info;
    partitions[J] = timed("clustering", [&] { return cluster_neighborhoods(nbs, ens, features, J, cfg.kmeans, &info, threads); });
    clustering_info[std::to_string(J)] = info;
    write_cluster_csv(out_dir / ("clusters_J" + std::to_string(J) + ".csv"), partitions[J]);
  }

  for (int J : cfg.clusters) {
    OfflineOptions oo = cfg.offline;
    oo.spectral.n_basis = n_max;
    const auto bases = timed("offline", [&] { return build_offline_bases(coarse, nbs, partitions[J], ens, oo, threads); });
    for (int nb_count : cfg.basis) {
      // Ascending eigenpairs: the n-basis space is a prefix of the n_max one.
      std::vector<std::vector<OfflineBasis>> trimmed = bases;
      for (auto& per_i : trimmed)
        for (auto& b : per_i) {
          const int keep = std::min(nb_count, b.retained());
          b.fields = b.fields.leftCols(keep).eval();
          b.eigenfunctions = b.eigenfunctions.leftCols(keep).eval();
        }
      const OfflineSpace space = assemble_offline_space(fine, nbs, partitions[J], trimmed);
      for (CouplingMode mode : cfg.modes) {
        const CoarseSolution sol = timed(std::string("coarse_") + to_string(mode), [&] { return solve_coarse(space, fp, w, mode, threads); });
        rep.rows.push_back({J, nb_count, mode, compute_errors(fp.mass, u_h, sol.fields, w, rep.error_subset)});
      }
    }
  }

  if (cfg.oracle) {
    for (int nb_count : cfg.basis) {
      SpectralOptions so = cfg.offline.spectral;
      so.n_basis = nb_count;
      const std::vector<Vector> u_or =
          timed("oracle", [&] { return realization_gmsfem(fp, ens, coarse, nbs, rep.error_subset, so, threads); });
      std::vector<Vector> ref_S, or_S;
      for (std::size_t t = 0; t < rep.error_subset.size(); ++t) {
        ref_S.push_back(u_h[rep.error_subset[t]]);
        or_S.push_back(u_or[t]);
      }
      std::vector<int> all(ref_S.size());
      std::iota(all.begin(), all.end(), 0);
      const std::vector<double> ws = uniform_weights(static_cast<int>(ref_S.size()));
      ErrorReport r = compute_errors(fp.mass, ref_S, or_S, ws, all);
      r.subset = rep.error_subset;
      rep.oracle[nb_count] = r;
    }
  }

  if (cfg.online.enabled) {
    OfflineOptions oo = cfg.offline;
    oo.spectral.n_basis = cfg.online.n_basis;
    const auto& parts = partitions[cfg.online.clusters];
    const auto bases = timed("offline", [&] { return build_offline_bases(coarse, nbs, parts, ens, oo, threads); });
    OfflineSpace space = assemble_offline_space(fine, nbs, parts, bases);
    const EnrichmentResult er = timed("online", [&] {
      return enrich(std::move(space), nbs, fp, ens, u_h, rep.error_subset, rep.error_subset, cfg.online.mode, cfg.online.options,
                    threads);
    });
    rep.online_trace = er.trace;
  }

  // Output files.
  {
    std::ofstream csv(out_dir / "errors.csv");
    csv << "J,n_basis,mode,e1_omega,e2_omega,e1_S,e2_S\n";
    for (const auto& r : rep.rows)
      csv << r.J << ',' << r.n_basis << ',' << to_string(r.mode) << ',' << format_number(r.report.r1_omega) << ','
          << format_number(r.report.r2_omega) << ',' << format_number(r.report.r1_S) << ',' << format_number(r.report.r2_S)
          << '\n';
  }
  {
    std::ofstream csv(out_dir / "online_trace.csv");
    csv << "round,dofs,e1_S,e2_S\n";
    for (const auto& t : rep.online_trace)
      csv << t.round << ',' << t.dofs << ',' << format_number(t.errors.r1_S) << ',' << format_number(t.errors.r2_S) << '\n';
  }
  if (!rep.oracle.empty()) {
    std::ofstream csv(out_dir / "oracle.csv");
    csv << "n_basis,e1_S,e2_S\n";
    for (const auto& [n, r] : rep.oracle) csv << n << ',' << format_number(r.r1_S) << ',' << format_number(r.r2_S) << '\n';
  }

  nlohmann::json report;
  report["config"] = cfg.raw;
  report["version"] = version_string;
  report["seeds"] = {{"base", cfg.seed}, {"medium", cfg.medium.seed}};
  report["normalization"] =
      "relative values divide each metric by the same metric applied to the fine reference solution (u_H = 0); "
      "errors.csv and online_trace.csv hold relative values as fractions";
  report["snapshot_source"] = cfg.localreduce.include_source ? "source-driven" : "harmonic";
  report["residual_sign"] = "r(v) = l(v) - a(u_ms, v)";
  report["error_subset"] = rep.error_subset;
  report["snapshot_subset"] = subset;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : rep.rows) {
    nlohmann::json row = detail::to_json(r.report);
    row["J"] = r.J;
    row["n_basis"] = r.n_basis;
    row["mode"] = to_string(r.mode);
    rows.push_back(std::move(row));
  }
  report["errors"] = std::move(rows);
  if (!rep.oracle.empty()) {
    nlohmann::json o = nlohmann::json::array();
    for (const auto& [n, r] : rep.oracle) {
      nlohmann::json row = detail::to_json(r);
      row["n_basis"] = n;
      o.push_back(std::move(row));
    }
    report["realization_gmsfem"] = std::move(o);
  }
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& t : rep.online_trace) {
    nlohmann::json row = detail::to_json(t.errors);
    row["round"] = t.round;
    row["dofs"] = t.dofs;
    row["added"] = t.added;
    trace.push_back(std::move(row));
  }
  report["online_trace"] = std::move(trace);
  report["localreduce"] = std::move(lr_info);
  report["clustering"] = std::move(clustering_info);
  report["timing_seconds"] = timing;
  std::ofstream(out_dir / "report.json") << report.dump(2) << '\n';
  rep.details = std::move(report);
  return rep;
}

// ---------------------------------------------------------------------------
// Table comparison

struct TableDiff {
  int J = 0;
  int n_basis = 0;
  std::string mode;
  std::string column;
  double a = 0.0, b = 0.0, relative = 0.0;
  bool flagged = false;
};

using ErrorTable = std::map<std::tuple<int, int, std::string>, std::vector<double>>;

inline const std::vector<std::string>& error_columns() {
  static const std::vector<std::string> cols{"e1_omega", "e2_omega", "e1_S", "e2_S"};
  return cols;
}

inline ErrorTable read_error_table(const std::filesystem::path& path_in) {
  const std::filesystem::path path =
      std::filesystem::is_directory(path_in) ? path_in / "errors.csv" : path_in;
  std::ifstream in(path);
  if (!in) throw config_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "J,n_basis,mode,e1_omega,e2_omega,e1_S,e2_S") throw config_error(path.string() + " is not an errors.csv table");
  ErrorTable t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw config_error("malformed row in " + path.string() + ": " + line);
    try {
      std::vector<double> v;
      for (int c = 3; c < 7; ++c) v.push_back(std::stod(cells[c]));
      t[{std::stoi(cells[0]), std::stoi(cells[1]), cells[2]}] = std::move(v);
    } catch (const std::exception&) {
      throw config_error("malformed number in " + path.string() + ": " + line);
    }
  }
  return t;
}

/// Per-cell relative differences |a - b| / max(|a|, |b|); cells beyond tol are flagged.
inline std::vector<TableDiff> compare_tables(const ErrorTable& a, const ErrorTable& b, double tol) {
  if (a.size() != b.size()) throw config_error("tables cover different experiment grids");
  for (const auto& [key, _] : a)
    if (!b.count(key)) throw config_error("tables cover different experiment grids");
  std::vector<TableDiff> out;
  for (const auto& [key, va] : a) {
    const auto& vb = b.at(key);
    for (std::size_t c = 0; c < va.size(); ++c) {
      if (va[c] == vb[c]) continue;
      TableDiff d;
      std::tie(d.J, d.n_basis, d.mode) = key;
      d.column = error_columns()[c];
      d.a = va[c];
      d.b = vb[c];
      d.relative = std::abs(va[c] - vb[c]) / std::max(std::abs(va[c]), std::abs(vb[c]));
      d.flagged = d.relative > tol;
      out.push_back(d);
    }
  }
  return out;
}

}  // namespace cgms
