#pragma once

// Q1 finite element kernels on rectangular patches: stiffness, mass and
// load assembly, Dirichlet solves by row/column elimination, harmonic
// extensions, fine reference solutions and a dense generalized symmetric
// eigensolver for the small local spectral problems.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include "cgms/errors.hpp"
#include "cgms/fields.hpp"
#include "cgms/grid.hpp"
#include "cgms/parallel.hpp"

namespace cgms {

using SparseMatrix = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

namespace q1 {

/// Exact bilinear element stiffness on an a x b rectangle, nodes
/// counterclockwise from the lower-left corner.
inline Eigen::Matrix4d element_stiffness(double a, double b) {
  Eigen::Matrix4d kx, ky;
  kx << 2, -2, -1, 1,  //
      -2, 2, 1, -1,    //
      -1, 1, 2, -2,    //
      1, -1, -2, 2;
  ky << 2, 1, -1, -2,  //
      1, 2, -2, -1,    //
      -1, -2, 2, 1,    //
      -2, -1, 1, 2;
  return (b / (6.0 * a)) * kx + (a / (6.0 * b)) * ky;
}

inline Eigen::Matrix4d element_mass(double a, double b) {
  Eigen::Matrix4d m;
  m << 4, 2, 1, 2,  //
      2, 4, 2, 1,   //
      1, 2, 4, 2,   //
      2, 1, 2, 4;
  return (a * b / 36.0) * m;
}

/// Shape function values at a reference point (s, t) in [0,1]^2.
inline std::array<double, 4> shape(double s, double t) {
  return {(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t};
}

}  // namespace q1

namespace detail {

inline SparseMatrix assemble_cellwise(const Patch& patch, std::span<const double> weight,
                                      const Eigen::Matrix4d& ke) {
  std::vector<Triplet> trip;
  trip.reserve(16 * static_cast<std::size_t>(patch.num_cells()));
  for (int c = 0; c < patch.num_cells(); ++c) {
    const auto nodes = patch.cell_nodes(c);
    const double w = weight.empty() ? 1.0 : weight[c];
    for (int p = 0; p < 4; ++p)
      for (int q = 0; q < 4; ++q) trip.emplace_back(nodes[p], nodes[q], w * ke(p, q));
  }
  SparseMatrix A(patch.num_nodes(), patch.num_nodes());
  A.setFromTriplets(trip.begin(), trip.end());
  return A;
}

}  // namespace detail

/// Full (no boundary conditions) stiffness matrix for a cellwise positive
/// coefficient given in the patch's local cell order.
inline SparseMatrix assemble_stiffness(const Patch& patch, std::span<const double> coefficient) {
  if (static_cast<int>(coefficient.size()) != patch.num_cells())
    throw config_error("coefficient size does not match patch cell count");
  for (std::size_t c = 0; c < coefficient.size(); ++c)
    if (!(coefficient[c] > 0.0))
      throw config_error("nonpositive coefficient in cell " + std::to_string(c));
  return detail::assemble_cellwise(patch, coefficient, q1::element_stiffness(patch.hx(), patch.hy()));
}

inline SparseMatrix assemble_stiffness(const Patch& patch, const Vector& coefficient) {
  return assemble_stiffness(patch, std::span<const double>(coefficient.data(), coefficient.size()));
}

/// Mass matrix, optionally weighted by a cellwise constant.
inline SparseMatrix assemble_mass(const Patch& patch, std::span<const double> weight = {}) {
  if (!weight.empty() && static_cast<int>(weight.size()) != patch.num_cells())
    throw config_error("mass weight size does not match patch cell count");
  return detail::assemble_cellwise(patch, weight, q1::element_mass(patch.hx(), patch.hy()));
}

/// Load vector int f N_p for f given by a callable f(Point), 2x2 Gauss per cell.
template <class F>
  requires std::is_invocable_r_v<double, F, Point>
Vector assemble_load(const Patch& patch, F&& f) {
  const double g = 0.5 / std::sqrt(3.0);
  const std::array<double, 2> gp{0.5 - g, 0.5 + g};
  const double a = patch.hx(), b = patch.hy();
  Vector load = Vector::Zero(patch.num_nodes());
  for (int c = 0; c < patch.num_cells(); ++c) {
    const auto nodes = patch.cell_nodes(c);
    const Point origin = patch.node_coord(nodes[0]);
    for (double s : gp)
      for (double t : gp) {
        const double fv = f(Point{origin.x + s * a, origin.y + t * b});
        const auto N = q1::shape(s, t);
        for (int p = 0; p < 4; ++p) load[nodes[p]] += 0.25 * a * b * fv * N[p];
      }
  }
  return load;
}

/// Load vector for a cellwise constant f (patch-local cell order).
inline Vector assemble_load_cellwise(const Patch& patch, std::span<const double> f_cells) {
  if (static_cast<int>(f_cells.size()) != patch.num_cells())
    throw config_error("source size does not match patch cell count");
  Vector load = Vector::Zero(patch.num_nodes());
  const double quarter = 0.25 * patch.hx() * patch.hy();
  for (int c = 0; c < patch.num_cells(); ++c)
    for (int n : patch.cell_nodes(c)) load[n] += quarter * f_cells[c];
  return load;
}

/// Load vector for a nodal (Q1-interpolated) f; equals M f.
inline Vector assemble_load_nodal(const Patch& patch, const Vector& f_nodes) {
  if (f_nodes.size() != patch.num_nodes()) throw config_error("nodal source size mismatch");
  return assemble_mass(patch) * f_nodes;
}

/// Factorization of a stiffness matrix with Dirichlet rows/columns
/// eliminated. Reusable for many right-hand sides and boundary data.
class DirichletSolver {
 public:
  DirichletSolver(const SparseMatrix& A, std::span<const int> boundary) : n_(static_cast<int>(A.rows())) {
    std::vector<char> fixed(n_, 0);
    for (int b : boundary) fixed[b] = 1;
    free_index_.assign(n_, -1);
    for (int k = 0; k < n_; ++k) {
      if (fixed[k]) {
        fixed_.push_back(k);
      } else {
        free_index_[k] = static_cast<int>(free_.size());
        free_.push_back(k);
      }
    }
    fixed_index_.assign(n_, -1);
    for (std::size_t k = 0; k < fixed_.size(); ++k) fixed_index_[fixed_[k]] = static_cast<int>(k);

    std::vector<Triplet> ff, fb;
    for (int col = 0; col < A.outerSize(); ++col)
      for (SparseMatrix::InnerIterator it(A, col); it; ++it) {
        const int r = static_cast<int>(it.row()), c = static_cast<int>(it.col());
        if (free_index_[r] < 0) continue;
        if (free_index_[c] >= 0)
          ff.emplace_back(free_index_[r], free_index_[c], it.value());
        else
          fb.emplace_back(free_index_[r], fixed_index_[c], it.value());
      }
    A_ff_.resize(static_cast<Eigen::Index>(free_.size()), static_cast<Eigen::Index>(free_.size()));
    A_ff_.setFromTriplets(ff.begin(), ff.end());
    A_fb_.resize(static_cast<Eigen::Index>(free_.size()), static_cast<Eigen::Index>(fixed_.size()));
    A_fb_.setFromTriplets(fb.begin(), fb.end());
    if (!free_.empty()) {
      for (int k = 0; k < A_ff_.outerSize(); ++k) {
        double col = 0.0;
        for (SparseMatrix::InnerIterator it(A_ff_, k); it; ++it) col += std::abs(it.value());
        a_norm_ = std::max(a_norm_, col);
      }
      llt_.compute(A_ff_);
      if (llt_.info() != Eigen::Success)
        throw numerical_error("Dirichlet-reduced system is not positive definite (" +
                              std::to_string(free_.size()) + " free nodes)");
    }
  }

  int size() const { return n_; }
  std::span<const int> free_nodes() const { return free_; }
  std::span<const int> fixed_nodes() const { return fixed_; }
  const SparseMatrix& reduced_matrix() const { return A_ff_; }

  /// Full-size solution with u = g on the boundary. `b` has full size;
  /// `g` is ordered like the boundary list passed at construction.
  Vector solve(const Vector& b, const Vector& g) const {
    Matrix B = b, G = g;
    return solve_many(B, G).col(0);
  }

  /// Column-wise version of solve().
  Matrix solve_many(const Matrix& B, const Matrix& G) const {
    const Eigen::Index cols = std::max(B.cols(), G.cols());
    Matrix rhs = Matrix::Zero(static_cast<Eigen::Index>(free_.size()), cols);
    if (B.size() > 0)
      for (std::size_t k = 0; k < free_.size(); ++k) rhs.row(static_cast<Eigen::Index>(k)) = B.row(free_[k]);
    if (G.size() > 0 && !fixed_.empty()) rhs -= A_fb_ * G;
    Matrix U = Matrix::Zero(n_, cols);
    if (!free_.empty()) {
      Matrix x = llt_.solve(rhs);
      // One refinement step; the check is on the normwise backward error
      // ||r|| / (||A|| ||x|| + ||b||), which stays meaningful at high contrast.
      Matrix r = rhs - A_ff_ * x;
      x += llt_.solve(r);
      r = rhs - A_ff_ * x;
      const double scale = a_norm_ * x.norm() + rhs.norm();
      if (scale > 0.0 && r.norm() > 1e-10 * scale) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.3g", r.norm() / scale);
        throw numerical_error(std::string("Dirichlet solve backward error ") + buf + " exceeds 1e-10");
      }
      for (std::size_t k = 0; k < free_.size(); ++k) U.row(free_[k]) = x.row(static_cast<Eigen::Index>(k));
    }
    if (G.size() > 0)
      for (std::size_t k = 0; k < fixed_.size(); ++k) U.row(fixed_[k]) = G.row(static_cast<Eigen::Index>(k));
    return U;
  }

 private:
  int n_ = 0;
  std::vector<int> free_, fixed_;
  std::vector<int> free_index_, fixed_index_;
  SparseMatrix A_ff_, A_fb_;
  double a_norm_ = 0.0;
  Eigen::SimplicialLLT<SparseMatrix> llt_;
};

inline Vector solve_dirichlet(const SparseMatrix& A, const Vector& b, std::span<const int> boundary,
                              const Vector& g) {
  return DirichletSolver(A, boundary).solve(b, g);
}

/// kappa-harmonic extension of boundary values into the patch (zero load).
/// `boundary_values` follow patch.boundary_nodes() order.
inline Vector harmonic_extension(const Patch& patch, std::span<const double> coefficient,
                                 const Vector& boundary_values) {
  const SparseMatrix A = assemble_stiffness(patch, coefficient);
  return DirichletSolver(A, patch.boundary_nodes()).solve(Vector::Zero(patch.num_nodes()), boundary_values);
}

/// Fine-grid quantities shared by every stage: whole-domain patch, mass
/// matrix, load vector, and per-realization stiffness matrices.
struct FineProblem {
  FineGrid grid;
  Patch domain;
  SparseMatrix mass;
  Vector load;
  std::vector<SparseMatrix> stiffness;
};

inline FineProblem make_fine_problem(const PermeabilityEnsemble& ens, const Vector& source_cells,
                                     int threads = 0) {
  FineProblem fp;
  fp.grid = ens.grid;
  fp.domain = Patch(ens.grid, CellBox{0, 0, ens.grid.nx, ens.grid.ny});
  fp.mass = assemble_mass(fp.domain);
  fp.load = assemble_load_cellwise(fp.domain, std::span<const double>(source_cells.data(), source_cells.size()));
  fp.stiffness.resize(ens.size());
  parallel_for(ens.size(), threads, [&](int m) { fp.stiffness[m] = assemble_stiffness(fp.domain, ens.kappa(m)); });
  return fp;
}

/// Homogeneous-Dirichlet fine solutions u_h(., omega) for every realization.
inline std::vector<Vector> fine_reference_solve(const FineProblem& fp, int threads = 0) {
  if (fp.stiffness.empty()) throw config_error("fine reference solve needs a nonempty ensemble");
  const std::vector<int> boundary = fp.grid.boundary_nodes();
  const Vector zero_bc = Vector::Zero(static_cast<Eigen::Index>(boundary.size()));
  std::vector<Vector> out(fp.stiffness.size());
  parallel_for(static_cast<int>(fp.stiffness.size()), threads, [&](int m) {
    try {
      out[m] = DirichletSolver(fp.stiffness[m], boundary).solve(fp.load, zero_bc);
    } catch (const numerical_error& e) {
      throw numerical_error("fine reference solve, realization " + std::to_string(m) + ": " + e.what());
    }
  });
  return out;
}

inline std::vector<Vector> fine_reference_solve(const PermeabilityEnsemble& ens, const Vector& source_cells,
                                                int threads = 0) {
  return fine_reference_solve(make_fine_problem(ens, source_cells, threads), threads);
}

struct EigenDecomposition {
  Vector values;   // ascending
  Matrix vectors;  // columns, S-orthonormal
};

/// All eigenpairs of A v = lambda S v for symmetric A and SPD S.
inline EigenDecomposition generalized_eig(const Matrix& A, const Matrix& S) {
  if (A.rows() != A.cols() || S.rows() != S.cols() || A.rows() != S.rows())
    throw config_error("generalized_eig: dimension mismatch");
  const Eigen::Index n = A.rows();
  if (n == 0) return {};
  const Matrix Ss = 0.5 * (S + S.transpose());
  const Matrix As = 0.5 * (A + A.transpose());
  const double s_norm = Ss.cwiseAbs().colwise().sum().maxCoeff();
  Eigen::SelfAdjointEigenSolver<Matrix> s_eig(Ss, Eigen::EigenvaluesOnly);
  const double s_min = s_eig.eigenvalues()(0);
  if (!(s_min > 1e-12 * s_norm))
    throw numerical_error("generalized_eig: S is not positive definite (lambda_min(S) = " + std::to_string(s_min) +
                          ", ||S||_1 = " + std::to_string(s_norm) + ", condition estimate " +
                          (s_min > 0 ? std::to_string(s_eig.eigenvalues()(n - 1) / s_min) : std::string("inf")) +
                          ")");
  Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> ges(As, Ss, Eigen::ComputeEigenvectors | Eigen::Ax_lBx);
  if (ges.info() != Eigen::Success) throw numerical_error("generalized_eig: eigensolver did not converge");
  return {ges.eigenvalues(), ges.eigenvectors()};
}

}  // namespace cgms
