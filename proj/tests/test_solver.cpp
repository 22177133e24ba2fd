#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cgms/solver.hpp"

using namespace cgms;

namespace {

PermeabilityEnsemble random_ensemble(const FineGrid& g, int M, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(std::log(0.2), std::log(50.0));
  PermeabilityEnsemble ens{g, {}, uniform_weights(M)};
  for (int m = 0; m < M; ++m) {
    Vector k(g.num_cells());
    for (auto& v : k) v = std::exp(u(rng));
    ens.realizations.push_back(k);
  }
  return ens;
}

struct Case {
  FineGrid fine;
  CoarseGrid coarse;
  std::vector<Neighborhood> nbs;
  PermeabilityEnsemble ens;
  FineProblem fp;
};

Case make_setup(int n, int N, int M, std::uint64_t seed, double f = 1.0) {
  auto [fine, coarse] = build_grids(n, n, N, N);
  Case s{fine, coarse, all_neighborhoods(fine, coarse), random_ensemble(fine, M, seed), {}};
  s.fp = make_fine_problem(s.ens, constant_source(fine, f), 1);
  return s;
}

OfflineSpace space_with(const Case& s, const std::vector<ClusterPartition>& parts, int n_basis) {
  OfflineOptions opt;
  opt.spectral.n_basis = n_basis;
  return assemble_offline_space(s.fine, s.nbs, parts, build_offline_bases(s.coarse, s.nbs, parts, s.ens, opt, 1));
}

std::vector<ClusterPartition> singletons(const Case& s) {
  std::vector<ClusterPartition> p;
  for (const auto& nb : s.nbs) p.push_back(singleton_partition(nb, s.ens));
  return p;
}

std::vector<ClusterPartition> single_cluster(const Case& s) {
  std::vector<ClusterPartition> p;
  for (const auto& nb : s.nbs) p.push_back(single_cluster_partition(nb, s.ens));
  return p;
}

double rel_diff(const Vector& a, const Vector& b) { return (a - b).norm() / std::max(b.norm(), 1e-300); }

}  // namespace

TEST(Downscale, ZeroUnitAndLinear) {
  const Case s = make_setup(12, 3, 2, 1);
  const OfflineSpace space = space_with(s, single_cluster(s), 2);
  const auto cols = space.active_columns(0);
  const auto n = static_cast<Eigen::Index>(cols.size());
  EXPECT_EQ(downscale(space, cols, Vector::Zero(n)).cwiseAbs().maxCoeff(), 0.0);
  const Vector u = downscale(space, cols, Vector::Unit(n, 3));
  const BasisColumn& c = space.columns[cols[3]];
  Vector expect = Vector::Zero(s.fine.num_nodes());
  for (std::size_t q = 0; q < c.nodes.size(); ++q) expect[c.nodes[q]] = c.values[static_cast<Eigen::Index>(q)];
  EXPECT_TRUE((u.array() == expect.array()).all());
  const Vector a = Vector::LinSpaced(n, -1, 2), b = Vector::LinSpaced(n, 3, 0.5);
  EXPECT_LT((downscale(space, cols, a + b) - downscale(space, cols, a) - downscale(space, cols, b)).norm(), 1e-13);
}

TEST(PerRealization, ZeroSourceGivesZero) {
  const Case s = make_setup(12, 3, 2, 2, 0.0);
  const CoarseSolution sol = solve_per_realization(space_with(s, single_cluster(s), 2), s.fp, 1);
  for (const Vector& u : sol.fields) EXPECT_EQ(u.cwiseAbs().maxCoeff(), 0.0);
}

TEST(PerRealization, GalerkinOptimality) {
  const Case s = make_setup(20, 4, 2, 3);
  const OfflineSpace space = space_with(s, single_cluster(s), 3);
  const CoarseSolution sol = solve_per_realization(space, s.fp, 1);
  const auto u_h = fine_reference_solve(s.fp, 1);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  for (int m = 0; m < 2; ++m) {
    const double best = energy_error(s.fp.stiffness[m], u_h[m], sol.fields[m]);
    for (int trial = 0; trial < 20; ++trial) {
      Vector c = sol.coefficients[m];
      for (auto& v : c) v += 1e-3 * n(rng);
      EXPECT_GE(energy_error(s.fp.stiffness[m], u_h[m], downscale(space, sol.active[m], c)), best);
    }
    // Error is a-orthogonal to every active column.
    const SparseMatrix B = basis_matrix(space, sol.active[m]);
    const Vector e = u_h[m] - sol.fields[m];
    const Vector g = B.transpose() * (s.fp.stiffness[m] * e);
    EXPECT_LT(g.cwiseAbs().maxCoeff(), 1e-8 * (B.transpose() * s.fp.load).cwiseAbs().maxCoeff());
  }
}

TEST(PerRealization, NestedSpacesNeverIncreaseEnergyError) {
  const Case s = make_setup(20, 4, 3, 5);
  const auto u_h = fine_reference_solve(s.fp, 1);
  const auto parts = single_cluster(s);
  std::vector<double> prev(3, INFINITY);
  for (int nb : {1, 2, 4, 8}) {
    const CoarseSolution sol = solve_per_realization(space_with(s, parts, nb), s.fp, 1);
    for (int m = 0; m < 3; ++m) {
      const double e = energy_error(s.fp.stiffness[m], u_h[m], sol.fields[m]);
      EXPECT_LE(e, prev[m] * (1 + 1e-10));
      prev[m] = e;
    }
  }
}

TEST(PerRealization, SingletonsMatchIndependentSingleRealizationPath) {
  const Case s = make_setup(20, 4, 3, 6);
  const CoarseSolution sol = solve_per_realization(space_with(s, singletons(s), 3), s.fp, 1);
  const std::vector<int> all{0, 1, 2};
  const auto ref = realization_gmsfem(s.fp, s.ens, s.coarse, s.nbs, all, {3, 0.0}, 1);
  for (int m = 0; m < 3; ++m) EXPECT_LT(rel_diff(sol.fields[m], ref[m]), 1e-12);
}

TEST(Ensemble, SingleRealizationMatchesPerRealization) {
  const Case s = make_setup(20, 4, 1, 7);
  const OfflineSpace space = space_with(s, single_cluster(s), 3);
  const CoarseSolution a = solve_per_realization(space, s.fp, 1);
  const CoarseSolution b = solve_ensemble_galerkin(space, s.fp, s.ens.weights, 1);
  EXPECT_LT(rel_diff(b.coefficients[0], a.coefficients[0]), 1e-12);
  EXPECT_LT(rel_diff(b.fields[0], a.fields[0]), 1e-12);
}

TEST(Ensemble, SingletonClustersDecouple) {
  const Case s = make_setup(20, 4, 4, 8);
  const OfflineSpace space = space_with(s, singletons(s), 2);
  const CoarseSolution a = solve_per_realization(space, s.fp, 1);
  const CoarseSolution b = solve_ensemble_galerkin(space, s.fp, s.ens.weights, 1);
  for (int m = 0; m < 4; ++m) EXPECT_LT(rel_diff(b.fields[m], a.fields[m]), 1e-12);
}

TEST(Ensemble, GalerkinMatrixSymmetric) {
  const Case s = make_setup(20, 4, 3, 9);
  const OfflineSpace space = space_with(s, single_cluster(s), 3);
  const auto cols = space.active_columns(0);
  const SparseMatrix B = basis_matrix(space, cols);
  const Matrix A = Matrix(B.transpose() * s.fp.stiffness[0] * B);
  EXPECT_LE((A - A.transpose()).cwiseAbs().maxCoeff(), 1e-12 * A.cwiseAbs().maxCoeff());
  const Matrix G = detail::galerkin_matrix(s.fp.stiffness[0], B);
  EXPECT_LE((G - A).cwiseAbs().maxCoeff(), 1e-12 * A.cwiseAbs().maxCoeff());
}

TEST(Ensemble, ClusteredSystemEqualsWeightedSumOfRealizationSystems) {
  // Independent assembly: global A = sum_m w_m P_m^T (B_m^T K_m B_m) P_m.
  const Case s = make_setup(12, 3, 4, 10);
  std::vector<ClusterPartition> parts;
  for (const auto& nb : s.nbs) parts.push_back(make_partition(nb, s.ens, nb.id % 2 ? std::vector<int>{0, 0, 1, 1} : std::vector<int>{0, 1, 0, 1}));
  const OfflineSpace space = space_with(s, parts, 2);
  const int n = space.dimension();
  Matrix A = Matrix::Zero(n, n);
  Vector b = Vector::Zero(n);
  for (int m = 0; m < 4; ++m) {
    SparseMatrix B(s.fine.num_nodes(), n);
    std::vector<Triplet> t;
    for (int p = 0; p < n; ++p)
      if (space.active(p, m))
        for (std::size_t q = 0; q < space.columns[p].nodes.size(); ++q)
          t.emplace_back(space.columns[p].nodes[q], p, space.columns[p].values[static_cast<Eigen::Index>(q)]);
    B.setFromTriplets(t.begin(), t.end());
    A += s.ens.weights[m] * Matrix(B.transpose() * s.fp.stiffness[m] * B);
    b += s.ens.weights[m] * (B.transpose() * s.fp.load);
  }
  const Vector c = A.ldlt().solve(b);
  const CoarseSolution sol = solve_ensemble_galerkin(space, s.fp, s.ens.weights, 1);
  EXPECT_LT(rel_diff(sol.global, c), 1e-9);
}

TEST(Errors, IdenticalFieldsGiveZero) {
  const Case s = make_setup(8, 2, 3, 11);
  const auto u = fine_reference_solve(s.fp, 1);
  const std::vector<int> S{0, 2};
  const ErrorReport r = compute_errors(s.fp.mass, u, u, s.ens.weights, S);
  EXPECT_EQ(r.e1_omega, 0.0);
  EXPECT_EQ(r.e2_omega, 0.0);
  EXPECT_EQ(r.e1_S, 0.0);
  EXPECT_EQ(r.e2_S, 0.0);
}

TEST(Errors, UnitConstantError) {
  auto [fine, coarse] = build_grids(10, 10, 2, 2);
  const SparseMatrix mass = assemble_mass(Patch(fine, CellBox{0, 0, 10, 10}));
  const std::vector<Vector> uh{Vector::Ones(fine.num_nodes())}, uH{Vector::Zero(fine.num_nodes())};
  const std::vector<double> w{1.0};
  const std::vector<int> S{0};
  const ErrorReport r = compute_errors(mass, uh, uH, w, S);
  EXPECT_NEAR(r.e1_omega, 1.0, 1e-14);
  EXPECT_NEAR(r.e2_omega, 1.0, 1e-14);
  EXPECT_NEAR(r.r1_omega, 1.0, 1e-14);
}

TEST(Errors, OppositeErrorsCancelInTheMean) {
  auto [fine, coarse] = build_grids(10, 10, 2, 2);
  const SparseMatrix mass = assemble_mass(Patch(fine, CellBox{0, 0, 10, 10}));
  Vector g(fine.num_nodes());
  for (int n = 0; n < fine.num_nodes(); ++n) g[n] = std::sin(3 * fine.node_coord(n).x);
  const Vector base = Vector::Constant(fine.num_nodes(), 2.0);
  const std::vector<Vector> uh{base, base}, uH{base - g, base + g};
  const std::vector<double> w{0.5, 0.5};
  const std::vector<int> S{0, 1};
  const ErrorReport r = compute_errors(mass, uh, uH, w, S);
  EXPECT_LT(r.e2_omega, 1e-15);
  EXPECT_LT(r.e2_S, 1e-15);
  EXPECT_GT(r.e1_omega, 0.1);
  EXPECT_GT(r.e1_S, 0.1);
}

TEST(Errors, JensenOrderingAndRejection) {
  const Case s = make_setup(12, 3, 6, 12);
  const auto u_h = fine_reference_solve(s.fp, 1);
  const CoarseSolution sol = solve_per_realization(space_with(s, single_cluster(s), 1), s.fp, 1);
  const auto S = default_error_subset(6, 4, 3);
  EXPECT_EQ(S.size(), 4u);
  EXPECT_TRUE(std::is_sorted(S.begin(), S.end()));
  EXPECT_EQ(S, default_error_subset(6, 4, 3));
  const ErrorReport r = compute_errors(s.fp.mass, u_h, sol.fields, s.ens.weights, S);
  EXPECT_LE(r.e2_omega, r.e1_omega * (1 + 1e-12));
  EXPECT_LE(r.e2_S, std::sqrt(4.0) * r.e1_S * (1 + 1e-12));
  EXPECT_GT(r.e1_omega, 0.0);
  const std::vector<int> bad{7};
  EXPECT_THROW(compute_errors(s.fp.mass, u_h, sol.fields, s.ens.weights, bad), config_error);
  std::vector<Vector> short_fields(sol.fields.begin(), sol.fields.end() - 1);
  EXPECT_THROW(compute_errors(s.fp.mass, u_h, short_fields, s.ens.weights, S), config_error);
}
