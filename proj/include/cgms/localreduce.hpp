#pragma once

// Per-neighborhood local model reduction used to measure distances between
// realizations: random-boundary snapshots on the oversampled domain D_i^+,
// a randomized range-finder stopping rule for the snapshot count, a pooled
// KL expansion of the snapshots and cheap Galerkin solves in the KL space
// for every realization.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "cgms/errors.hpp"
#include "cgms/fem.hpp"
#include "cgms/fields.hpp"
#include "cgms/grid.hpp"
#include "cgms/parallel.hpp"
#include "cgms/random.hpp"

namespace cgms {

// ---------------------------------------------------------------------------
// Randomized range finder

struct RangeFinderOptions {
  double eps = 1e-3;
  double alpha = 10.0;
  int k_init = 1;
  int k_probe = 5;
  int k_max = 0;  // 0: input dimension

  /// Probe residual threshold (eps / alpha) * sqrt(pi / 2).
  double threshold() const { return eps / alpha * std::sqrt(std::numbers::pi / 2.0); }
};

struct RangeCertificate {
  int k = 0;                            // number of images spanning the basis
  Matrix basis;                         // orthonormal Q, at most k columns
  std::vector<double> probe_residuals;  // ||(I - QQ^T) T w|| of the final probes
  bool capped = false;                  // k_max reached before the test passed
};

namespace detail {

/// Appends y to the orthonormal columns of Q (two Gram-Schmidt passes);
/// numerically dependent vectors are dropped.
inline void append_orthonormal(Matrix& Q, const Vector& y) {
  const double ny = y.norm();
  if (ny == 0.0) return;
  Vector v = y;
  for (int pass = 0; pass < 2; ++pass)
    if (Q.cols() > 0) v -= Q * (Q.transpose() * v);
  const double nv = v.norm();
  if (nv <= 1e-12 * ny) return;
  Q.conservativeResize(v.size(), Q.cols() + 1);
  Q.col(Q.cols() - 1) = v / nv;
}

inline double projection_residual(const Matrix& Q, const Vector& y) {
  if (Q.cols() == 0) return y.norm();
  Vector r = y - Q * (Q.transpose() * y);
  r -= Q * (Q.transpose() * r);
  return r.norm();
}

}  // namespace detail

/// Grows k until k_probe fresh images T w_k, ..., T w_{k+k_probe-1} all have
/// residual below threshold() after projection onto span{T w_0..T w_{k-1}}.
/// `image_of(j)` returns T w_j for the j-th Gaussian draw; each draw is
/// requested at most once. `input_dim` bounds k when opt.k_max is 0.
template <class ImageOf>
RangeCertificate certify_range(ImageOf&& image_of, int input_dim, const RangeFinderOptions& opt) {
  if (!(opt.eps > 0.0)) throw config_error("range finder: eps must be positive");
  if (!(opt.alpha > 1.0)) throw config_error("range finder: alpha must exceed 1");
  if (opt.k_probe < 1) throw config_error("range finder: k_probe must be at least 1");
  const int k_max = opt.k_max > 0 ? opt.k_max : input_dim;
  if (k_max < 1) throw config_error("range finder: empty input space");
  const double tol = opt.threshold();

  std::vector<Vector> images;
  auto image = [&](int j) -> const Vector& {
    while (static_cast<int>(images.size()) <= j) images.push_back(image_of(static_cast<int>(images.size())));
    return images[j];
  };

  RangeCertificate cert;
  int k = std::clamp(opt.k_init, 1, k_max);
  Matrix Q;
  for (int j = 0; j < k; ++j) {
    if (Q.cols() == 0) Q.resize(image(0).size(), 0);
    detail::append_orthonormal(Q, image(j));
  }
  for (;;) {
    cert.probe_residuals.assign(opt.k_probe, 0.0);
    bool pass = true;
    for (int p = 0; p < opt.k_probe; ++p) {
      cert.probe_residuals[p] = detail::projection_residual(Q, image(k + p));
      pass = pass && cert.probe_residuals[p] <= tol;
    }
    if (pass) break;
    if (k >= k_max) {
      cert.capped = true;
      break;
    }
    detail::append_orthonormal(Q, image(k));
    ++k;
  }
  cert.k = k;
  cert.basis = std::move(Q);
  return cert;
}

// ---------------------------------------------------------------------------
// Local snapshots and KL expansion

struct LocalReduceOptions {
  int layers = 4;
  RangeFinderOptions range{};
  double energy_tol = 0.99;
  bool include_source = false;  // false: harmonic snapshots (zero local load)
  std::uint64_t seed = 0;
};

/// i.i.d. N(0,1) value per boundary node; deterministic in (seed, i, j).
inline Vector sample_random_boundary(int n, std::uint64_t seed, int i, int j) {
  if (n < 1) throw config_error("random boundary needs at least one node");
  Rng rng = make_rng(seed, stream::random_boundary, {static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j)});
  return standard_normal(rng, n);
}

/// Default subset of realizations used for snapshots: the first
/// max(8, ceil(0.1 M)) realizations, capped at M.
inline std::vector<int> default_snapshot_subset(int M) {
  const int n = std::min(M, std::max(8, static_cast<int>(std::ceil(0.1 * M))));
  std::vector<int> out(n);
  for (int k = 0; k < n; ++k) out[k] = k;
  return out;
}

struct SnapshotCount {
  int k = 0;
  bool capped = false;
  std::vector<double> probe_residuals;
};

/// Certifies the number of random-boundary snapshots for neighborhood nb on
/// one realization. The operator maps boundary data on the boundary of D_i^+
/// to its harmonic extension restricted to D_i; images are measured in a
/// discrete L2(D_i) norm (nodal values scaled by sqrt(hx*hy)).
inline SnapshotCount certify_snapshot_count(const OversampledNeighborhood& plus, std::span<const double> kappa_global,
                                            const RangeFinderOptions& opt, std::uint64_t seed) {
  const Patch& P = plus.patch;
  const Vector kappa = P.restrict_cells(kappa_global);
  const DirichletSolver solver(assemble_stiffness(P, kappa), P.boundary_nodes());
  const int nb = static_cast<int>(P.boundary_nodes().size());
  const double scale = std::sqrt(P.hx() * P.hy());
  const Vector zero = Vector::Zero(P.num_nodes());
  auto image_of = [&](int j) {
    const Vector psi = solver.solve(zero, sample_random_boundary(nb, seed, plus.base, j));
    Vector out(static_cast<Eigen::Index>(plus.inner_nodes.size()));
    for (std::size_t l = 0; l < plus.inner_nodes.size(); ++l) out[static_cast<Eigen::Index>(l)] = scale * psi[plus.inner_nodes[l]];
    return out;
  };
  const RangeCertificate cert = certify_range(image_of, nb, opt);
  return {cert.k, cert.capped, cert.probe_residuals};
}

struct LocalSnapshotSet {
  int neighborhood = -1;
  std::vector<int> subset;
  int k = 0;
  std::vector<Vector> boundary_data;             // R_j on the boundary of D_i^+
  std::vector<std::vector<Vector>> snapshots;    // [s][j], nodal on D_i^+
};

/// Snapshots psi_j(., omega) for explicit boundary data R_j. `source_cells`
/// (global cellwise f) enables the local load; nullptr means zero load.
inline LocalSnapshotSet local_snapshots(const OversampledNeighborhood& plus, const PermeabilityEnsemble& ens,
                                        std::span<const int> subset, std::vector<Vector> boundary_data,
                                        const Vector* source_cells = nullptr) {
  if (subset.empty()) throw config_error("snapshot subset must be nonempty");
  if (boundary_data.empty()) throw config_error("at least one snapshot is required");
  const Patch& P = plus.patch;
  LocalSnapshotSet set;
  set.neighborhood = plus.base;
  set.subset.assign(subset.begin(), subset.end());
  set.k = static_cast<int>(boundary_data.size());
  Matrix G(static_cast<Eigen::Index>(P.boundary_nodes().size()), set.k);
  for (int j = 0; j < set.k; ++j) G.col(j) = boundary_data[j];
  set.boundary_data = std::move(boundary_data);

  Matrix B;
  if (source_cells) {
    const Vector f = P.restrict_cells(std::span<const double>(source_cells->data(), source_cells->size()));
    const Vector load = assemble_load_cellwise(P, std::span<const double>(f.data(), f.size()));
    B = load.replicate(1, set.k);
  }
  set.snapshots.resize(subset.size());
  for (std::size_t s = 0; s < subset.size(); ++s) {
    const int omega = subset[s];
    try {
      const DirichletSolver solver(assemble_stiffness(P, P.restrict_cells(ens.kappa(omega))), P.boundary_nodes());
      const Matrix U = solver.solve_many(B, G);
      set.snapshots[s].resize(set.k);
      for (int j = 0; j < set.k; ++j) set.snapshots[s][j] = U.col(j);
    } catch (const numerical_error& e) {
      throw numerical_error("snapshot solve (i=" + std::to_string(plus.base) + ", omega=" + std::to_string(omega) +
                            "): " + e.what());
    }
  }
  return set;
}

/// k random-boundary snapshots per subset realization, R_j drawn from the
/// (seed, i, j) streams.
inline LocalSnapshotSet local_randomized_snapshots(const OversampledNeighborhood& plus, const PermeabilityEnsemble& ens,
                                                   std::span<const int> subset, int k, std::uint64_t seed,
                                                   const Vector* source_cells = nullptr) {
  if (k < 1) throw config_error("snapshot count must be at least 1");
  std::vector<Vector> R;
  const int nb = static_cast<int>(plus.boundary_nodes().size());
  for (int j = 0; j < k; ++j) R.push_back(sample_random_boundary(nb, seed, plus.base, j));
  return local_snapshots(plus, ens, subset, std::move(R), source_cells);
}

struct KLModel {
  int neighborhood = -1;
  int k = 0;
  std::vector<int> subset;
  std::vector<Vector> means;          // per j, nodal on D_i^+
  Matrix modes;                       // D_i^+ nodes x L, L2(D_i^+)-orthonormal
  Vector energies;                    // covariance eigenvalues, nonincreasing
  int L = 0;
  std::vector<Matrix> coefficients;   // per subset member: k x L

  double retained_fraction() const {
    const double total = energies.sum();
    return total > 0.0 ? energies.head(L).sum() / total : 1.0;
  }
};

/// Pooled KL expansion psi_j(omega) = mean_j + sum_l p_{j,l}(omega) phi_l with
/// modes shared across j. L is the smallest count whose retained energy
/// fraction reaches energy_tol. `mass` is the D_i^+ mass matrix.
inline KLModel kl_expand(const LocalSnapshotSet& set, const SparseMatrix& mass, double energy_tol) {
  if (set.snapshots.empty() || set.k < 1) throw config_error("KL expansion needs at least one snapshot");
  if (!(energy_tol > 0.0 && energy_tol <= 1.0)) throw config_error("energy_tol must lie in (0, 1]");
  const int S = static_cast<int>(set.snapshots.size());
  const int k = set.k;
  const Eigen::Index n = set.snapshots[0][0].size();

  KLModel kl;
  kl.neighborhood = set.neighborhood;
  kl.k = k;
  kl.subset = set.subset;
  kl.means.assign(k, Vector::Zero(n));
  for (int s = 0; s < S; ++s)
    for (int j = 0; j < k; ++j) kl.means[j] += set.snapshots[s][j];
  for (auto& m : kl.means) m /= S;

  // Centered data, column j*S + s, scaled so X^T M X is the pooled covariance.
  Matrix X(n, static_cast<Eigen::Index>(k) * S);
  const double scale = 1.0 / std::sqrt(static_cast<double>(S));
  for (int j = 0; j < k; ++j)
    for (int s = 0; s < S; ++s) X.col(static_cast<Eigen::Index>(j) * S + s) = scale * (set.snapshots[s][j] - kl.means[j]);

  const Matrix MX = mass * X;
  Matrix C = X.transpose() * MX;
  C = 0.5 * (C + C.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(C);
  const Eigen::Index m = C.rows();
  kl.energies = eig.eigenvalues().reverse().cwiseMax(0.0);
  const Matrix V = eig.eigenvectors().rowwise().reverse();

  double reference = 0.0;
  for (const auto& mu : kl.means) reference += mu.dot(mass * mu);
  const double total = kl.energies.sum();
  const double top = m > 0 ? kl.energies(0) : 0.0;
  kl.L = 0;
  if (total > 1e-24 * std::max(reference, 1e-300) && total > 0.0) {
    double acc = 0.0;
    while (kl.L < m && acc < energy_tol * total && kl.energies(kl.L) > 1e-13 * top) {
      acc += kl.energies(kl.L);
      ++kl.L;
    }
  }

  kl.modes.resize(n, kl.L);
  for (int l = 0; l < kl.L; ++l) kl.modes.col(l) = X * V.col(l) / std::sqrt(kl.energies(l));
  // Re-orthonormalize in the mass inner product (two modified Gram-Schmidt passes).
  for (int pass = 0; pass < 2; ++pass)
    for (int l = 0; l < kl.L; ++l) {
      Vector v = kl.modes.col(l);
      for (int q = 0; q < l; ++q) v -= kl.modes.col(q).dot(mass * v) * kl.modes.col(q);
      kl.modes.col(l) = v / std::sqrt(v.dot(mass * v));
    }

  const Matrix MPhi = mass * kl.modes;
  kl.coefficients.assign(S, Matrix::Zero(k, kl.L));
  for (int s = 0; s < S; ++s)
    for (int j = 0; j < k; ++j)
      kl.coefficients[s].row(j) = ((set.snapshots[s][j] - kl.means[j]).transpose() * MPhi);
  return kl;
}

/// Galerkin solves in span{phi_l restricted to D_i}, one per realization.
class ReducedLocalProblem {
 public:
  ReducedLocalProblem(const KLModel& kl, const OversampledNeighborhood& plus, const Neighborhood& nb,
                      const Vector* source_cells = nullptr)
      : nb_(nb.patch), k_(kl.k), L_(kl.L) {
    const int n = nb_.num_nodes();
    modes_.resize(n, L_);
    means_.resize(n, k_);
    for (int l = 0; l < n; ++l) {
      const int p = plus.inner_nodes[l];
      modes_.row(l) = kl.modes.row(p);
      for (int j = 0; j < k_; ++j) means_(l, j) = kl.means[j][p];
    }
    load_ = Vector::Zero(L_);
    if (source_cells && L_ > 0) {
      const Vector f = nb_.restrict_cells(std::span<const double>(source_cells->data(), source_cells->size()));
      load_ = modes_.transpose() * assemble_load_cellwise(nb_, std::span<const double>(f.data(), f.size()));
    }
  }

  int modes() const { return L_; }
  int snapshots() const { return k_; }
  int regularized_solves() const { return regularized_; }

  /// k x L coefficients p~_{j,l}(omega); empty when L = 0.
  Matrix solve(std::span<const double> kappa_global) {
    if (L_ == 0) return Matrix(k_, 0);
    const Vector kappa = nb_.restrict_cells(kappa_global);
    const SparseMatrix K = assemble_stiffness(nb_, kappa);
    const Matrix KPhi = K * modes_;
    Matrix G = modes_.transpose() * KPhi;
    G = 0.5 * (G + G.transpose());
    Matrix rhs = (-(KPhi.transpose() * means_)).colwise() + load_;  // L x k
    Eigen::LLT<Matrix> llt(G);
    Matrix P;
    if (llt.info() == Eigen::Success) {
      P = llt.solve(rhs);
    } else {
      // Regularized pseudo-inverse for (numerically) singular restrictions.
      ++regularized_;
      Eigen::SelfAdjointEigenSolver<Matrix> eig(G);
      const Vector& ev = eig.eigenvalues();
      const double cut = 1e-12 * std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
      Vector inv = ev.unaryExpr([cut](double v) { return v > cut ? 1.0 / v : 0.0; });
      P = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose() * rhs;
    }
    return P.transpose();
  }

  /// Residual of the Galerkin equations, Phi^T (K psi~_j - f), for checks.
  Matrix galerkin_residual(std::span<const double> kappa_global, const Matrix& coeffs) const {
    const Vector kappa = nb_.restrict_cells(kappa_global);
    const SparseMatrix K = assemble_stiffness(nb_, kappa);
    const Matrix psi = means_ + modes_ * coeffs.transpose();
    return (modes_.transpose() * (K * psi)).colwise() - load_;
  }

  /// Reduced local field mean_j + sum_l p_l phi_l on D_i.
  Vector field(const Matrix& coeffs, int j) const {
    return means_.col(j) + modes_ * coeffs.row(j).transpose();
  }

 private:
  Patch nb_;
  int k_ = 0;
  int L_ = 0;
  Matrix modes_;
  Matrix means_;
  Vector load_;
  int regularized_ = 0;
};

inline Matrix reduced_local_solve(const KLModel& kl, const OversampledNeighborhood& plus, const Neighborhood& nb,
                                  std::span<const double> kappa_global, const Vector* source_cells = nullptr) {
  ReducedLocalProblem problem(kl, plus, nb, source_cells);
  return problem.solve(kappa_global);
}

// ---------------------------------------------------------------------------
// KL model cache

namespace detail {

inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t k = 0; k < n; ++k) {
    h ^= p[k];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <class T>
std::uint64_t fnv1a(std::uint64_t h, const T& value) {
  return fnv1a(h, &value, sizeof(T));
}

inline constexpr std::uint64_t fnv_offset = 0xcbf29ce484222325ULL;

inline void write_matrix(std::ostream& out, const Matrix& m) {
  const std::int64_t r = m.rows(), c = m.cols();
  out.write(reinterpret_cast<const char*>(&r), sizeof r);
  out.write(reinterpret_cast<const char*>(&c), sizeof c);
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(r * c * sizeof(double)));
}

inline Matrix read_matrix(std::istream& in) {
  std::int64_t r = 0, c = 0;
  in.read(reinterpret_cast<char*>(&r), sizeof r);
  in.read(reinterpret_cast<char*>(&c), sizeof c);
  if (!in || r < 0 || c < 0 || r * c > (std::int64_t{1} << 34)) throw ingestion_error("corrupt matrix record");
  Matrix m(r, c);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(r * c * sizeof(double)));
  if (!in) throw ingestion_error("truncated matrix record");
  return m;
}

}  // namespace detail

inline void save_kl_model(const KLModel& kl, int certified_k, bool capped, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ingestion_error("cannot write " + path.string());
  const char magic[8] = {'C', 'G', 'M', 'S', 'K', 'L', '0', '1'};
  out.write(magic, 8);
  const std::int64_t header[5] = {kl.neighborhood, kl.k, kl.L, certified_k, capped ? 1 : 0};
  out.write(reinterpret_cast<const char*>(header), sizeof header);
  Matrix subset(static_cast<Eigen::Index>(kl.subset.size()), 1);
  for (std::size_t s = 0; s < kl.subset.size(); ++s) subset(static_cast<Eigen::Index>(s), 0) = kl.subset[s];
  detail::write_matrix(out, subset);
  Matrix means(kl.means.empty() ? 0 : kl.means[0].size(), static_cast<Eigen::Index>(kl.means.size()));
  for (std::size_t j = 0; j < kl.means.size(); ++j) means.col(static_cast<Eigen::Index>(j)) = kl.means[j];
  detail::write_matrix(out, means);
  detail::write_matrix(out, kl.modes);
  detail::write_matrix(out, kl.energies);
  for (const auto& c : kl.coefficients) detail::write_matrix(out, c);
}

inline std::optional<std::pair<KLModel, SnapshotCount>> load_kl_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != "CGMSKL01") throw ingestion_error("bad KL cache file " + path.string());
  std::int64_t header[5];
  in.read(reinterpret_cast<char*>(header), sizeof header);
  KLModel kl;
  kl.neighborhood = static_cast<int>(header[0]);
  kl.k = static_cast<int>(header[1]);
  kl.L = static_cast<int>(header[2]);
  const Matrix subset = detail::read_matrix(in);
  for (Eigen::Index s = 0; s < subset.rows(); ++s) kl.subset.push_back(static_cast<int>(subset(s, 0)));
  const Matrix means = detail::read_matrix(in);
  for (Eigen::Index j = 0; j < means.cols(); ++j) kl.means.push_back(means.col(j));
  kl.modes = detail::read_matrix(in);
  kl.energies = detail::read_matrix(in);
  for (std::size_t s = 0; s < kl.subset.size(); ++s) kl.coefficients.push_back(detail::read_matrix(in));
  SnapshotCount count{static_cast<int>(header[3]), header[4] != 0, {}};
  return std::make_pair(std::move(kl), std::move(count));
}

// ---------------------------------------------------------------------------
// Whole-neighborhood driver

struct NeighborhoodReduction {
  int neighborhood = -1;
  SnapshotCount count;
  KLModel kl;
  std::vector<Matrix> reduced;  // per omega in the ensemble: k x L
  int regularized = 0;
};

/// Cache key for a neighborhood's KL model.
inline std::uint64_t kl_cache_key(const PermeabilityEnsemble& ens, const Neighborhood& nb, std::span<const int> subset,
                                  const LocalReduceOptions& opt, const Vector* source_cells) {
  using detail::fnv1a;
  std::uint64_t h = detail::fnv_offset;
  h = fnv1a(h, ens.grid.nx);
  h = fnv1a(h, ens.grid.ny);
  h = fnv1a(h, nb.patch.box().x0);
  h = fnv1a(h, nb.patch.box().y0);
  h = fnv1a(h, nb.patch.box().x1);
  h = fnv1a(h, nb.patch.box().y1);
  h = fnv1a(h, nb.id);
  h = fnv1a(h, opt.layers);
  h = fnv1a(h, opt.range.eps);
  h = fnv1a(h, opt.range.alpha);
  h = fnv1a(h, opt.range.k_init);
  h = fnv1a(h, opt.range.k_probe);
  h = fnv1a(h, opt.range.k_max);
  h = fnv1a(h, opt.energy_tol);
  h = fnv1a(h, opt.include_source);
  h = fnv1a(h, opt.seed);
  for (int s : subset) {
    h = fnv1a(h, s);
    const auto k = ens.kappa(s);
    h = fnv1a(h, k.data(), k.size() * sizeof(double));
  }
  if (opt.include_source && source_cells)
    h = fnv1a(h, source_cells->data(), static_cast<std::size_t>(source_cells->size()) * sizeof(double));
  return h;
}

/// Snapshot count certification (on the first subset realization), snapshots,
/// KL expansion and reduced solves for every realization of the ensemble.
inline NeighborhoodReduction reduce_neighborhood(const Neighborhood& nb, const PermeabilityEnsemble& ens,
                                                 std::span<const int> subset, const LocalReduceOptions& opt,
                                                 const Vector* source_cells = nullptr,
                                                 const std::filesystem::path& cache_dir = {}) {
  if (subset.empty()) throw config_error("snapshot subset must be nonempty");
  const OversampledNeighborhood plus = oversample(nb, opt.layers);
  const Vector* f = opt.include_source ? source_cells : nullptr;
  NeighborhoodReduction out;
  out.neighborhood = nb.id;

  std::filesystem::path cache_file;
  if (!cache_dir.empty()) {
    char name[64];
    std::snprintf(name, sizeof name, "kl_%04d_%016llx.bin", nb.id,
                  static_cast<unsigned long long>(kl_cache_key(ens, nb, subset, opt, source_cells)));
    cache_file = cache_dir / name;
  }
  bool cached = false;
  if (!cache_file.empty()) {
    if (auto hit = load_kl_model(cache_file)) {
      out.kl = std::move(hit->first);
      out.count = std::move(hit->second);
      cached = true;
    }
  }
  if (!cached) {
    out.count = certify_snapshot_count(plus, ens.kappa(subset[0]), opt.range, opt.seed);
    const LocalSnapshotSet set = local_randomized_snapshots(plus, ens, subset, out.count.k, opt.seed, f);
    out.kl = kl_expand(set, assemble_mass(plus.patch), opt.energy_tol);
    if (!cache_file.empty()) {
      std::filesystem::create_directories(cache_dir);
      save_kl_model(out.kl, out.count.k, out.count.capped, cache_file);
    }
  }
  ReducedLocalProblem problem(out.kl, plus, nb, f);
  out.reduced.resize(ens.size());
  for (int m = 0; m < ens.size(); ++m) out.reduced[m] = problem.solve(ens.kappa(m));
  out.regularized = problem.regularized_solves();
  return out;
}

inline std::vector<NeighborhoodReduction> reduce_all_neighborhoods(const std::vector<Neighborhood>& nbs,
                                                                   const PermeabilityEnsemble& ens,
                                                                   std::span<const int> subset,
                                                                   const LocalReduceOptions& opt,
                                                                   const Vector* source_cells = nullptr,
                                                                   const std::filesystem::path& cache_dir = {},
                                                                   int threads = 0) {
  std::vector<NeighborhoodReduction> out(nbs.size());
  parallel_for(static_cast<int>(nbs.size()), threads,
               [&](int i) { out[i] = reduce_neighborhood(nbs[i], ens, subset, opt, source_cells, cache_dir); });
  return out;
}

}  // namespace cgms
