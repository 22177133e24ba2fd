#pragma once

// Global couplings over the offline space: per-realization Galerkin solves
// and the ensemble (space x realization) Galerkin system, downscaling, and
// the ensemble error metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/SparseCholesky>

#include "cgms/errors.hpp"
#include "cgms/fem.hpp"
#include "cgms/offline.hpp"
#include "cgms/parallel.hpp"
#include "cgms/random.hpp"

namespace cgms {

enum class CouplingMode { per_realization, ensemble };

inline const char* to_string(CouplingMode m) { return m == CouplingMode::ensemble ? "ensemble" : "per-realization"; }

struct CoarseSolution {
  CouplingMode mode = CouplingMode::per_realization;
  std::vector<std::vector<int>> active;  // per omega, global column ids
  std::vector<Vector> coefficients;      // per omega, over `active`
  Vector global;                         // ensemble mode: one coefficient per column
  std::vector<Vector> fields;            // per omega, downscaled nodal field
};

/// Fine nodes x |cols| sparse matrix of basis fields.
inline SparseMatrix basis_matrix(const OfflineSpace& space, std::span<const int> cols) {
  std::vector<Triplet> trip;
  for (std::size_t q = 0; q < cols.size(); ++q) {
    const BasisColumn& c = space.columns[cols[q]];
    for (std::size_t t = 0; t < c.nodes.size(); ++t)
      trip.emplace_back(c.nodes[t], static_cast<int>(q), c.values[static_cast<Eigen::Index>(t)]);
  }
  SparseMatrix B(space.grid.num_nodes(), static_cast<Eigen::Index>(cols.size()));
  B.setFromTriplets(trip.begin(), trip.end());
  return B;
}

/// Nodal superposition of the given columns.
inline Vector downscale(const OfflineSpace& space, std::span<const int> cols, const Vector& coeffs) {
  if (static_cast<Eigen::Index>(cols.size()) != coeffs.size()) throw config_error("downscale: coefficient count mismatch");
  Vector u = Vector::Zero(space.grid.num_nodes());
  for (std::size_t q = 0; q < cols.size(); ++q) {
    const BasisColumn& c = space.columns[cols[q]];
    const double a = coeffs[static_cast<Eigen::Index>(q)];
    for (std::size_t t = 0; t < c.nodes.size(); ++t) u[c.nodes[t]] += a * c.values[static_cast<Eigen::Index>(t)];
  }
  return u;
}

namespace detail {

inline std::string offending_neighborhoods(const OfflineSpace& space, std::span<const int> cols, const Matrix& A) {
  std::set<int> bad;
  for (Eigen::Index p = 0; p < A.rows(); ++p)
    if (!(A(p, p) > 0.0)) bad.insert(space.columns[cols[p]].neighborhood);
  std::string s;
  for (int i : bad) s += (s.empty() ? "" : ",") + std::to_string(i);
  return s.empty() ? "none with a zero diagonal; likely linearly dependent columns" : s;
}

/// SPD solve: dense Cholesky up to 5000 unknowns, sparse above.
inline Vector spd_solve(const Matrix& A, const Vector& b, const OfflineSpace& space, std::span<const int> cols,
                        const std::string& what) {
  if (A.rows() == 0) return Vector(0);
  if (A.rows() <= 5000) {
    Eigen::LLT<Matrix> llt(A);
    if (llt.info() != Eigen::Success)
      throw numerical_error(what + ": coarse system is not positive definite (neighborhoods: " +
                            offending_neighborhoods(space, cols, A) + ")");
    Vector x = llt.solve(b);
    x += llt.solve(b - A * x);
    return x;
  }
  const SparseMatrix As = A.sparseView();
  Eigen::SimplicialLLT<SparseMatrix> llt(As);
  if (llt.info() != Eigen::Success)
    throw numerical_error(what + ": coarse system is not positive definite (neighborhoods: " +
                          offending_neighborhoods(space, cols, A) + ")");
  Vector x = llt.solve(b);
  x += llt.solve(b - As * x);
  return x;
}

inline Matrix galerkin_matrix(const SparseMatrix& K, const SparseMatrix& B) {
  const SparseMatrix KB = K * B;
  Matrix A = Matrix(SparseMatrix(B.transpose() * KB));
  return 0.5 * (A + A.transpose());
}

}  // namespace detail

/// Coarse solve for one realization over its active columns.
inline std::pair<std::vector<int>, Vector> solve_realization(const OfflineSpace& space, const SparseMatrix& K,
                                                             const Vector& load, int omega) {
  std::vector<int> cols = space.active_columns(omega);
  const SparseMatrix B = basis_matrix(space, cols);
  const Matrix A = detail::galerkin_matrix(K, B);
  const Vector b = B.transpose() * load;
  Vector c = detail::spd_solve(A, b, space, cols, "realization " + std::to_string(omega));
  return {std::move(cols), std::move(c)};
}

inline CoarseSolution solve_per_realization(const OfflineSpace& space, const FineProblem& fp, int threads = 0) {
  const int M = static_cast<int>(fp.stiffness.size());
  if (space.realizations() != M) throw config_error("offline space labels do not match the ensemble size");
  CoarseSolution sol;
  sol.mode = CouplingMode::per_realization;
  sol.active.resize(M);
  sol.coefficients.resize(M);
  sol.fields.resize(M);
  parallel_for(M, threads, [&](int m) {
    auto [cols, c] = solve_realization(space, fp.stiffness[m], fp.load, m);
    sol.fields[m] = downscale(space, cols, c);
    sol.active[m] = std::move(cols);
    sol.coefficients[m] = std::move(c);
  });
  return sol;
}

/// One system over all columns; A[p][q] accumulates w_omega a(omega; Phi_p, Phi_q)
/// over the realizations for which both columns are active.
inline CoarseSolution solve_ensemble_galerkin(const OfflineSpace& space, const FineProblem& fp,
                                              std::span<const double> weights, int threads = 0) {
  const int M = static_cast<int>(fp.stiffness.size());
  if (M == 0) throw config_error("ensemble Galerkin needs a nonempty ensemble");
  if (space.realizations() != M || static_cast<int>(weights.size()) != M)
    throw config_error("offline space labels / weights do not match the ensemble size");
  const int n = space.dimension();
  Matrix A = Matrix::Zero(n, n);
  Vector b = Vector::Zero(n);
  std::vector<std::vector<int>> active(M);
  for (int m = 0; m < M; ++m) active[m] = space.active_columns(m);

  // Blocks of realizations are assembled in parallel and reduced in omega order.
  const int block = std::max(1, threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency())) * 2;
  for (int start = 0; start < M; start += block) {
    const int stop = std::min(M, start + block);
    std::vector<Matrix> Al(stop - start);
    std::vector<Vector> bl(stop - start);
    parallel_for(stop - start, threads, [&](int t) {
      const int m = start + t;
      const SparseMatrix B = basis_matrix(space, active[m]);
      Al[t] = detail::galerkin_matrix(fp.stiffness[m], B);
      bl[t] = B.transpose() * fp.load;
    });
    for (int t = 0; t < stop - start; ++t) {
      const int m = start + t;
      const double w = weights[m];
      const auto& cols = active[m];
      for (std::size_t q = 0; q < cols.size(); ++q) {
        b[cols[q]] += w * bl[t][static_cast<Eigen::Index>(q)];
        for (std::size_t p = 0; p < cols.size(); ++p)
          A(cols[p], cols[q]) += w * Al[t](static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(q));
      }
    }
  }
  std::vector<int> all(n);
  std::iota(all.begin(), all.end(), 0);
  CoarseSolution sol;
  sol.mode = CouplingMode::ensemble;
  sol.global = detail::spd_solve(A, b, space, all, "ensemble system");
  sol.active = std::move(active);
  sol.coefficients.resize(M);
  sol.fields.resize(M);
  parallel_for(M, threads, [&](int m) {
    Vector c(static_cast<Eigen::Index>(sol.active[m].size()));
    for (std::size_t q = 0; q < sol.active[m].size(); ++q) c[static_cast<Eigen::Index>(q)] = sol.global[sol.active[m][q]];
    sol.fields[m] = downscale(space, sol.active[m], c);
    sol.coefficients[m] = std::move(c);
  });
  return sol;
}

inline CoarseSolution solve_coarse(const OfflineSpace& space, const FineProblem& fp, std::span<const double> weights,
                                   CouplingMode mode, int threads = 0) {
  return mode == CouplingMode::ensemble ? solve_ensemble_galerkin(space, fp, weights, threads)
                                        : solve_per_realization(space, fp, threads);
}

// ---------------------------------------------------------------------------
// Error metrics

struct ErrorReport {
  double e1_omega = 0.0, e2_omega = 0.0, e1_S = 0.0, e2_S = 0.0;          // raw
  double r1_omega = 0.0, r2_omega = 0.0, r1_S = 0.0, r2_S = 0.0;          // relative to u_h norms
  std::vector<int> subset;
};

/// Seeded random subset of `size` realization ids (all when size >= M), ascending.
inline std::vector<int> default_error_subset(int M, int size, std::uint64_t seed) {
  std::vector<int> ids(M);
  std::iota(ids.begin(), ids.end(), 0);
  if (size >= M) return ids;
  Rng rng = make_rng(seed, stream::subset);
  for (int k = 0; k < size; ++k) {
    std::uniform_int_distribution<int> pick(k, M - 1);
    std::swap(ids[k], ids[pick(rng)]);
  }
  ids.resize(size);
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline ErrorReport compute_errors(const SparseMatrix& mass, std::span<const Vector> u_h, std::span<const Vector> u_H,
                                  std::span<const double> weights, std::span<const int> subset) {
  const std::size_t M = u_h.size();
  if (u_H.size() != M || weights.size() != M) throw config_error("compute_errors: ensemble size mismatch");
  for (std::size_t m = 0; m < M; ++m)
    if (u_h[m].size() != mass.rows() || u_H[m].size() != mass.rows())
      throw config_error("compute_errors: field does not match the fine grid");
  for (int s : subset)
    if (s < 0 || s >= static_cast<int>(M)) throw config_error("compute_errors: subset id out of range");
  auto sq = [&](const Vector& v) { return std::max(0.0, v.dot(mass * v)); };
  const Eigen::Index n = mass.rows();
  double s1 = 0.0, n1 = 0.0;
  Vector mean_err = Vector::Zero(n), mean_ref = Vector::Zero(n);
  for (std::size_t m = 0; m < M; ++m) {
    const Vector e = u_h[m] - u_H[m];
    s1 += weights[m] * sq(e);
    n1 += weights[m] * sq(u_h[m]);
    mean_err += weights[m] * e;
    mean_ref += weights[m] * u_h[m];
  }
  double t1 = 0.0, m1 = 0.0;
  Vector sum_err = Vector::Zero(n), sum_ref = Vector::Zero(n);
  for (int s : subset) {
    const Vector e = u_h[s] - u_H[s];
    t1 += sq(e);
    m1 += sq(u_h[s]);
    sum_err += e;
    sum_ref += u_h[s];
  }
  auto ratio = [](double a, double b) { return b > 0.0 ? a / b : 0.0; };
  ErrorReport r;
  r.e1_omega = std::sqrt(s1);
  r.e2_omega = std::sqrt(sq(mean_err));
  r.e1_S = std::sqrt(t1);
  r.e2_S = std::sqrt(sq(sum_err));
  r.r1_omega = ratio(r.e1_omega, std::sqrt(n1));
  r.r2_omega = ratio(r.e2_omega, std::sqrt(sq(mean_ref)));
  r.r1_S = ratio(r.e1_S, std::sqrt(m1));
  r.r2_S = ratio(r.e2_S, std::sqrt(sq(sum_ref)));
  r.subset.assign(subset.begin(), subset.end());
  return r;
}

/// sqrt(a(omega; e, e)) for e = u_h - u_H.
inline double energy_error(const SparseMatrix& K, const Vector& u_h, const Vector& u_H) {
  const Vector e = u_h - u_H;
  return std::sqrt(std::max(0.0, e.dot(K * e)));
}

/// GMsFEM with bases built from kappa(omega) itself for each listed
/// realization (a singleton cluster per neighborhood); returns the
/// downscaled field per listed realization. Used as the reference that
/// isolates the coarse-grid discretization error from the clustering error.
inline std::vector<Vector> realization_gmsfem(const FineProblem& fp, const PermeabilityEnsemble& ens,
                                              const CoarseGrid& coarse, const std::vector<Neighborhood>& nbs,
                                              std::span<const int> realizations, const SpectralOptions& spectral,
                                              int threads = 0) {
  std::vector<Vector> out(realizations.size());
  parallel_for(static_cast<int>(realizations.size()), threads, [&](int t) {
    const int omega = realizations[t];
    OfflineSpace space;
    space.grid = fp.grid;
    space.labels.assign(nbs.size(), std::vector<int>{0});
    for (const Neighborhood& nb : nbs) {
      const OfflineBasis b =
          spectral_decompose(build_snapshot_space(nb, nb.patch.restrict_cells(ens.kappa(omega)), 0), nb, coarse, spectral);
      for (int k = 0; k < b.retained(); ++k) space.columns.push_back(make_column(nb, 0, k, b.fields.col(k)));
    }
    auto [cols, c] = solve_realization(space, fp.stiffness[omega], fp.load, 0);
    out[t] = downscale(space, cols, c);
  });
  return out;
}

}  // namespace cgms
