#pragma once

// Offline stage: per-(neighborhood, cluster) snapshot spaces of harmonic
// extensions on the cluster-mean coefficient, the local spectral problem,
// and the global offline space with cluster-indicator supports.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cgms/clustering.hpp"
#include "cgms/errors.hpp"
#include "cgms/fem.hpp"
#include "cgms/grid.hpp"
#include "cgms/localreduce.hpp"
#include "cgms/parallel.hpp"

namespace cgms {

struct OfflineSnapshotSpace {
  int neighborhood = -1;
  int cluster = -1;
  Vector kappa;     // cellwise coefficient on D_i
  Matrix snapshots; // D_i nodes x count
};

/// One kappa-harmonic extension per fine boundary node of D_i, with delta
/// boundary data.
inline OfflineSnapshotSpace build_snapshot_space(const Neighborhood& nb, const Vector& kappa, int cluster = -1) {
  const Patch& P = nb.patch;
  OfflineSnapshotSpace s;
  s.neighborhood = nb.id;
  s.cluster = cluster;
  s.kappa = kappa;
  try {
    const DirichletSolver solver(assemble_stiffness(P, kappa), P.boundary_nodes());
    const auto nb_count = static_cast<Eigen::Index>(P.boundary_nodes().size());
    s.snapshots = solver.solve_many(Matrix(), Matrix::Identity(nb_count, nb_count));
  } catch (const numerical_error& e) {
    throw numerical_error("snapshot space (i=" + std::to_string(nb.id) + ", j=" + std::to_string(cluster) +
                          "): " + e.what());
  }
  return s;
}

/// Randomized variant: harmonic extensions of random boundary data on D_i^+
/// restricted to D_i, with the count certified by the range finder. `kappa_plus`
/// is cellwise on D_i^+.
inline OfflineSnapshotSpace build_randomized_snapshot_space(const Neighborhood& nb, const OversampledNeighborhood& plus,
                                                            const Vector& kappa_plus, const RangeFinderOptions& opt,
                                                            std::uint64_t seed, int cluster = -1) {
  const Patch& P = plus.patch;
  const DirichletSolver solver(assemble_stiffness(P, kappa_plus), P.boundary_nodes());
  const int nbnd = static_cast<int>(P.boundary_nodes().size());
  const std::uint64_t s_seed = derive_seed(seed, static_cast<std::uint64_t>(cluster) + 1);
  const Vector zero = Vector::Zero(P.num_nodes());
  auto image_of = [&](int j) {
    const Vector psi = solver.solve(zero, sample_random_boundary(nbnd, s_seed, nb.id, j));
    Vector out(static_cast<Eigen::Index>(plus.inner_nodes.size()));
    for (std::size_t l = 0; l < plus.inner_nodes.size(); ++l) out[static_cast<Eigen::Index>(l)] = psi[plus.inner_nodes[l]];
    return out;
  };
  RangeFinderOptions o = opt;
  if (o.k_max <= 0) o.k_max = static_cast<int>(nb.patch.boundary_nodes().size());
  const RangeCertificate cert = certify_range(image_of, nbnd, o);
  OfflineSnapshotSpace s;
  s.neighborhood = nb.id;
  s.cluster = cluster;
  s.kappa = Vector(nb.patch.num_cells());
  for (int c = 0; c < nb.patch.num_cells(); ++c) {
    const int g = nb.patch.global_cell(c);
    const int gx = g % nb.patch.grid().nx - P.box().x0, gy = g / nb.patch.grid().nx - P.box().y0;
    s.kappa[c] = kappa_plus[gy * P.cells_x() + gx];
  }
  s.snapshots = cert.basis;
  return s;
}

struct SpectralOptions {
  int n_basis = 3;
  double eigen_threshold = 0.0;  // > 0: keep all eigenpairs below it (at least one, at most n_basis)
};

struct OfflineBasis {
  int neighborhood = -1;
  int cluster = -1;
  Vector eigenvalues;  // all, ascending
  Matrix eigenfunctions;  // D_i nodes x retained, snapshot-space eigenfunctions
  Matrix fields;          // D_i nodes x retained, chi_i * phi_k
  int retained() const { return static_cast<int>(fields.cols()); }
};

/// Local spectral problem in the snapshot space: A-side int kappa grad.grad,
/// S-side int kappa |grad chi|^2 (.)(.) with |grad chi|^2 taken at fine-cell
/// centers. Keeps the smallest eigenpairs.
inline OfflineBasis spectral_decompose(const OfflineSnapshotSpace& snap, const Neighborhood& nb, const CoarseGrid& coarse,
                                       const SpectralOptions& opt) {
  const Patch& P = nb.patch;
  const Eigen::Index dim = snap.snapshots.cols();
  if (opt.n_basis < 1) throw config_error("n_basis must be at least 1");
  if (opt.n_basis > dim)
    throw config_error("n_basis " + std::to_string(opt.n_basis) + " exceeds snapshot dimension " + std::to_string(dim) +
                       " in neighborhood " + std::to_string(nb.id));
  const SparseMatrix K = assemble_stiffness(P, snap.kappa);
  const Vector w = snap.kappa.cwiseProduct(partition_of_unity_gradient_sq(coarse, nb));
  const SparseMatrix Mw = assemble_mass(P, std::span<const double>(w.data(), w.size()));
  const Matrix& Psi = snap.snapshots;
  const Matrix A = Psi.transpose() * (K * Psi);
  const Matrix S = Psi.transpose() * (Mw * Psi);
  EigenDecomposition eig;
  try {
    eig = generalized_eig(A, S);
  } catch (const numerical_error& e) {
    throw numerical_error("spectral problem (i=" + std::to_string(nb.id) + ", j=" + std::to_string(snap.cluster) +
                          "): " + e.what());
  }
  int keep = opt.n_basis;
  if (opt.eigen_threshold > 0.0) {
    keep = 1;
    while (keep < opt.n_basis && eig.values(keep) < opt.eigen_threshold) ++keep;
  }
  OfflineBasis b;
  b.neighborhood = nb.id;
  b.cluster = snap.cluster;
  b.eigenvalues = eig.values;
  b.eigenfunctions = Psi * eig.vectors.leftCols(keep);
  const Vector chi = partition_of_unity(coarse, nb);
  b.fields = chi.asDiagonal() * b.eigenfunctions;
  return b;
}

enum class ColumnKind { offline, online };

/// One global basis function: field on the interior fine nodes of D_i,
/// active for the realizations of cluster j of neighborhood i.
struct BasisColumn {
  int neighborhood = -1;
  int cluster = -1;
  int index = 0;           // k within (i, j) and kind
  ColumnKind kind = ColumnKind::offline;
  int realization = -1;    // online: the omega whose residual produced it
  int round = 0;           // online: enrichment round (1-based)
  std::vector<int> nodes;  // global fine nodes
  Vector values;
};

struct OfflineSpace {
  FineGrid grid;
  std::vector<std::vector<int>> labels;  // [i][omega]

  std::vector<BasisColumn> columns;

  int dimension() const { return static_cast<int>(columns.size()); }
  int realizations() const { return labels.empty() ? 0 : static_cast<int>(labels[0].size()); }

  bool active(int column, int omega) const {
    const BasisColumn& c = columns[column];
    return labels[c.neighborhood][omega] == c.cluster;
  }
  std::vector<int> active_columns(int omega) const {
    std::vector<int> out;
    for (int p = 0; p < dimension(); ++p)
      if (active(p, omega)) out.push_back(p);
    return out;
  }
  int count(ColumnKind kind) const {
    return static_cast<int>(std::count_if(columns.begin(), columns.end(), [kind](const BasisColumn& c) { return c.kind == kind; }));
  }
};

/// Column built from a field on all D_i nodes (boundary values are dropped;
/// they vanish for chi_i-weighted and online fields).
inline BasisColumn make_column(const Neighborhood& nb, int cluster, int index, const Vector& field_on_di,
                               ColumnKind kind = ColumnKind::offline) {
  BasisColumn c;
  c.neighborhood = nb.id;
  c.cluster = cluster;
  c.index = index;
  c.kind = kind;
  const auto interior = nb.patch.interior_nodes();
  c.nodes.reserve(interior.size());
  c.values.resize(static_cast<Eigen::Index>(interior.size()));
  for (std::size_t q = 0; q < interior.size(); ++q) {
    c.nodes.push_back(nb.patch.global_node(interior[q]));
    c.values[static_cast<Eigen::Index>(q)] = field_on_di[interior[q]];
  }
  return c;
}

inline OfflineSpace assemble_offline_space(const FineGrid& grid, const std::vector<Neighborhood>& nbs,
                                           const std::vector<ClusterPartition>& partitions,
                                           const std::vector<std::vector<OfflineBasis>>& bases) {
  if (partitions.size() != nbs.size() || bases.size() != nbs.size())
    throw config_error("one partition and basis set per neighborhood required");
  OfflineSpace space;
  space.grid = grid;
  for (const auto& p : partitions) space.labels.push_back(p.labels);
  for (std::size_t i = 0; i < nbs.size(); ++i) {
    if (static_cast<int>(bases[i].size()) != partitions[i].clusters)
      throw config_error("neighborhood " + std::to_string(i) + ": one basis per cluster required");
    std::vector<char> seen(bases[i].size(), 0);
    for (const OfflineBasis& b : bases[i]) {
      if (b.neighborhood != static_cast<int>(i) || b.cluster < 0 || b.cluster >= partitions[i].clusters)
        throw std::logic_error("offline basis has an out-of-range (i, j) tag");
      if (seen[b.cluster]++) throw std::logic_error("duplicate offline basis for (i, j)");
    }
    for (int j = 0; j < partitions[i].clusters; ++j) {
      const OfflineBasis& b = *std::find_if(bases[i].begin(), bases[i].end(), [j](const OfflineBasis& x) { return x.cluster == j; });
      for (int k = 0; k < b.retained(); ++k) space.columns.push_back(make_column(nbs[i], j, k, b.fields.col(k)));
    }
  }
  return space;
}

struct OfflineOptions {
  SpectralOptions spectral{};
  bool randomized = false;
  int layers = 4;
  RangeFinderOptions range{};
  std::uint64_t seed = 0;
};

/// Snapshot spaces and spectral bases for every (i, j) pair.
inline std::vector<std::vector<OfflineBasis>> build_offline_bases(const CoarseGrid& coarse, const std::vector<Neighborhood>& nbs,
                                                                  const std::vector<ClusterPartition>& partitions,
                                                                  const PermeabilityEnsemble& ens, const OfflineOptions& opt,
                                                                  int threads = 0) {
  std::vector<std::pair<int, int>> pairs;
  for (std::size_t i = 0; i < nbs.size(); ++i)
    for (int j = 0; j < partitions[i].clusters; ++j) pairs.emplace_back(static_cast<int>(i), j);
  std::vector<OfflineBasis> flat(pairs.size());
  parallel_for(static_cast<int>(pairs.size()), threads, [&](int p) {
    const auto [i, j] = pairs[p];
    OfflineSnapshotSpace snap;
    if (opt.randomized) {
      const OversampledNeighborhood plus = oversample(nbs[i], opt.layers);
      const Vector kplus = cluster_mean_field(ens, partitions[i].members[j], plus.patch);
      snap = build_randomized_snapshot_space(nbs[i], plus, kplus, opt.range, opt.seed, j);
    } else {
      snap = build_snapshot_space(nbs[i], partitions[i].mean_kappa[j], j);
    }
    flat[p] = spectral_decompose(snap, nbs[i], coarse, opt.spectral);
  });
  std::vector<std::vector<OfflineBasis>> out(nbs.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) out[pairs[p].first].push_back(std::move(flat[p]));
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: JSON index map plus one binary file of column values.

inline void save_offline_space(const OfflineSpace& space, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["format"] = "cgms-offline-space";
  meta["version"] = 1;
  meta["nx"] = space.grid.nx;
  meta["ny"] = space.grid.ny;
  meta["labels"] = space.labels;
  nlohmann::json cols = nlohmann::json::array();
  std::ofstream bin(dir / "columns.bin", std::ios::binary);
  if (!bin) throw ingestion_error("cannot write " + (dir / "columns.bin").string());
  for (const BasisColumn& c : space.columns) {
    cols.push_back({{"i", c.neighborhood}, {"j", c.cluster}, {"k", c.index},
                    {"kind", c.kind == ColumnKind::offline ? "offline" : "online"},
                    {"realization", c.realization}, {"round", c.round}, {"nnz", c.nodes.size()}});
    bin.write(reinterpret_cast<const char*>(c.nodes.data()), static_cast<std::streamsize>(c.nodes.size() * sizeof(int)));
    bin.write(reinterpret_cast<const char*>(c.values.data()), static_cast<std::streamsize>(c.values.size() * sizeof(double)));
  }
  meta["columns"] = std::move(cols);
  std::ofstream(dir / "space.json") << meta.dump(1) << "\n";
}

inline OfflineSpace load_offline_space(const std::filesystem::path& dir) {
  std::ifstream in(dir / "space.json");
  if (!in) throw ingestion_error("cannot read " + (dir / "space.json").string());
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ingestion_error(std::string("malformed offline space header: ") + e.what());
  }
  if (meta.value("format", "") != "cgms-offline-space") throw ingestion_error("not an offline space directory");
  OfflineSpace space;
  space.grid = FineGrid{meta.at("nx").get<int>(), meta.at("ny").get<int>(), 1.0 / meta.at("nx").get<int>(),
                        1.0 / meta.at("ny").get<int>()};
  space.labels = meta.at("labels").get<std::vector<std::vector<int>>>();
  std::ifstream bin(dir / "columns.bin", std::ios::binary);
  if (!bin) throw ingestion_error("cannot read " + (dir / "columns.bin").string());
  for (const auto& c : meta.at("columns")) {
    BasisColumn col;
    col.neighborhood = c.at("i");
    col.cluster = c.at("j");
    col.index = c.at("k");
    col.kind = c.at("kind") == "offline" ? ColumnKind::offline : ColumnKind::online;
    col.realization = c.at("realization");
    col.round = c.at("round");
    const std::size_t nnz = c.at("nnz");
    col.nodes.resize(nnz);
    col.values.resize(static_cast<Eigen::Index>(nnz));
    bin.read(reinterpret_cast<char*>(col.nodes.data()), static_cast<std::streamsize>(nnz * sizeof(int)));
    bin.read(reinterpret_cast<char*>(col.values.data()), static_cast<std::streamsize>(nnz * sizeof(double)));
    if (!bin) throw ingestion_error("offline space column data truncated");
    space.columns.push_back(std::move(col));
  }
  return space;
}

}  // namespace cgms
