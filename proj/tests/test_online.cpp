#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cgms/online.hpp"

using namespace cgms;

namespace {

PermeabilityEnsemble random_ensemble(const FineGrid& g, int M, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(std::log(0.1), std::log(100.0));
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
  std::vector<Vector> u_h;
  OfflineSpace space;
};

Case make_setup(int n, int N, int M, int n_basis, std::uint64_t seed, double f = 1.0) {
  auto [fine, coarse] = build_grids(n, n, N, N);
  Case s{fine, coarse, all_neighborhoods(fine, coarse), random_ensemble(fine, M, seed), {}, {}, {}};
  s.fp = make_fine_problem(s.ens, constant_source(fine, f), 1);
  s.u_h = fine_reference_solve(s.fp, 1);
  std::vector<ClusterPartition> parts;
  for (const auto& nb : s.nbs) parts.push_back(single_cluster_partition(nb, s.ens));
  OfflineOptions opt;
  opt.spectral.n_basis = n_basis;
  s.space = assemble_offline_space(fine, s.nbs, parts, build_offline_bases(coarse, s.nbs, parts, s.ens, opt, 1));
  return s;
}

std::vector<int> iota(int M) {
  std::vector<int> v(M);
  for (int m = 0; m < M; ++m) v[m] = m;
  return v;
}

}  // namespace

TEST(Residual, ExactSolutionGivesZero) {
  const Case s = make_setup(12, 3, 2, 1, 1);
  for (const auto& nb : s.nbs) {
    const ResidualRecord r = compute_residual(nb, 0, 1, s.fp.stiffness[1], s.fp.load, s.u_h[1]);
    EXPECT_LT(r.norm, 1e-12 * s.fp.load.norm());
  }
}

TEST(Residual, ZeroStateGivesLocalLoad) {
  const Case s = make_setup(12, 3, 1, 1, 2);
  const Neighborhood& nb = s.nbs[3];
  const ResidualRecord r = compute_residual(nb, 0, 0, s.fp.stiffness[0], s.fp.load, Vector::Zero(s.fine.num_nodes()));
  // Independent local load: the D_i patch load restricted to interior nodes.
  const Vector f = constant_source(s.fine, 1.0);
  const Vector fl = nb.patch.restrict_cells(std::span<const double>(f.data(), f.size()));
  const Vector local = assemble_load_cellwise(nb.patch, std::span<const double>(fl.data(), fl.size()));
  const auto interior = nb.patch.interior_nodes();
  for (std::size_t q = 0; q < interior.size(); ++q)
    EXPECT_NEAR(r.residual[static_cast<Eigen::Index>(q)], local[interior[q]], 1e-15);
}

TEST(Residual, AffineInTheState) {
  const Case s = make_setup(12, 3, 1, 1, 3);
  const Neighborhood& nb = s.nbs[0];
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  Vector u1(s.fine.num_nodes()), u2(s.fine.num_nodes());
  for (auto& v : u1) v = n(rng);
  for (auto& v : u2) v = n(rng);
  const Vector r1 = compute_residual(nb, 0, 0, s.fp.stiffness[0], s.fp.load, u1).residual;
  const Vector r2 = compute_residual(nb, 0, 0, s.fp.stiffness[0], s.fp.load, u2).residual;
  // -a(u1 - u2, v) for v in V_h0(D_i), from the local stiffness on D_i.
  const SparseMatrix K = assemble_stiffness(nb.patch, nb.patch.restrict_cells(s.ens.kappa(0)));
  Vector d(nb.patch.num_nodes());
  for (int l = 0; l < nb.patch.num_nodes(); ++l) d[l] = u1[nb.patch.global_node(l)] - u2[nb.patch.global_node(l)];
  const Vector Kd = K * d;
  const auto interior = nb.patch.interior_nodes();
  for (std::size_t q = 0; q < interior.size(); ++q)
    EXPECT_NEAR(r1[static_cast<Eigen::Index>(q)] - r2[static_cast<Eigen::Index>(q)], -Kd[interior[q]], 1e-10 * Kd.norm());
}

TEST(OnlineBasis, ZeroResidualIsSkipped) {
  const Case s = make_setup(8, 2, 1, 1, 4);
  ResidualRecord rec;
  rec.neighborhood = 0;
  rec.residual = Vector::Zero(static_cast<Eigen::Index>(s.nbs[0].interior_nodes().size()));
  const OnlineField f = solve_online_basis(s.nbs[0], rec, s.ens.kappa(0));
  EXPECT_TRUE(f.skipped);
  EXPECT_EQ(f.field.cwiseAbs().maxCoeff(), 0.0);
}

TEST(OnlineBasis, RieszPositivityAndBoundary) {
  const Case s = make_setup(20, 4, 2, 1, 5);
  const CoarseSolution sol = solve_per_realization(s.space, s.fp, 1);
  for (const auto& nb : s.nbs) {
    const ResidualRecord rec = compute_residual(nb, 0, 1, s.fp.stiffness[1], s.fp.load, sol.fields[1]);
    ASSERT_GT(rec.norm, 0.0);
    const OnlineField f = solve_online_basis(nb, rec, s.ens.kappa(1));
    EXPECT_FALSE(f.skipped);
    for (int l : nb.boundary_nodes()) EXPECT_EQ(f.field[l], 0.0);
    const SparseMatrix K = assemble_stiffness(nb.patch, nb.patch.restrict_cells(s.ens.kappa(1)));
    const double a = f.field.dot(K * f.field);
    double r = 0.0;
    const auto interior = nb.patch.interior_nodes();
    for (std::size_t q = 0; q < interior.size(); ++q) r += rec.residual[static_cast<Eigen::Index>(q)] * f.field[interior[q]];
    EXPECT_GT(a, 0.0);
    EXPECT_NEAR(a, r, 1e-10 * a);
    EXPECT_NEAR(f.dual_norm, std::sqrt(r), 1e-10 * std::sqrt(r));
  }
}

TEST(OnlineBasis, AddingItStrictlyReducesEnergyError) {
  const Case s = make_setup(20, 4, 1, 1, 6);
  const CoarseSolution sol = solve_per_realization(s.space, s.fp, 1);
  const double before = energy_error(s.fp.stiffness[0], s.u_h[0], sol.fields[0]);
  const Neighborhood& nb = s.nbs[4];
  const ResidualRecord rec = compute_residual(nb, 0, 0, s.fp.stiffness[0], s.fp.load, sol.fields[0]);
  OfflineSpace space = s.space;
  space.columns.push_back(make_column(nb, 0, 0, solve_online_basis(nb, rec, s.ens.kappa(0)).field, ColumnKind::online));
  const CoarseSolution after = solve_per_realization(space, s.fp, 1);
  const double e = energy_error(s.fp.stiffness[0], s.u_h[0], after.fields[0]);
  EXPECT_LT(e, before * (1 - 1e-6));
  // The reduction is at least the local dual norm of the residual: the
  // energy error squared drops by at least r(phi)^2 / a(phi, phi) = r(phi).
  const OnlineField f = solve_online_basis(nb, rec, s.ens.kappa(0));
  EXPECT_LE(e * e, before * before - f.dual_norm * f.dual_norm + 1e-10 * before * before);
}

TEST(Enrich, ZeroSourceLeavesSpaceUnchanged) {
  const Case s = make_setup(12, 3, 2, 1, 7, 0.0);
  OnlineOptions opt;
  opt.rounds = 2;
  const auto ids = iota(2);
  const EnrichmentResult r = enrich(s.space, s.nbs, s.fp, s.ens, s.u_h, ids, ids, CouplingMode::per_realization, opt, 1);
  EXPECT_EQ(r.space.dimension(), s.space.dimension());
  ASSERT_EQ(r.trace.size(), 3u);
  for (const auto& row : r.trace) {
    EXPECT_EQ(row.added, 0);
    EXPECT_EQ(row.dofs, s.space.dimension());
    EXPECT_EQ(row.errors.e1_S, 0.0);
  }
}

TEST(Enrich, ClusterMaxAddsOnePerPairAndErrorsDecrease) {
  const Case s = make_setup(20, 4, 4, 2, 8);
  OnlineOptions opt;
  opt.rounds = 3;
  const auto ids = iota(4);
  const EnrichmentResult r = enrich(s.space, s.nbs, s.fp, s.ens, s.u_h, ids, ids, CouplingMode::per_realization, opt, 1);
  ASSERT_EQ(r.trace.size(), 4u);
  EXPECT_EQ(r.trace[0].dofs, s.space.dimension());
  for (int k = 1; k <= 3; ++k) {
    EXPECT_LE(r.trace[k].added, static_cast<int>(s.nbs.size()));  // J = 1: one per neighborhood
    EXPECT_EQ(r.trace[k].dofs, r.trace[k - 1].dofs + r.trace[k].added);
    EXPECT_LE(r.trace[k].errors.e1_S, r.trace[k - 1].errors.e1_S * (1 + 1e-12));
  }
  EXPECT_LT(r.trace[3].errors.e1_S, 0.5 * r.trace[0].errors.e1_S);
  EXPECT_EQ(r.space.count(ColumnKind::online), r.trace[3].dofs - r.trace[0].dofs);
  for (const BasisColumn& c : r.space.columns)
    if (c.kind == ColumnKind::online) {
      EXPECT_GE(c.round, 1);
      EXPECT_NEAR(c.values.norm(), 1.0, 1e-12);
    }
}

TEST(Enrich, PerRealizationEnergyNonincreasingEachRound) {
  const Case s = make_setup(20, 4, 3, 1, 9);
  const auto ids = iota(3);
  OnlineOptions opt;
  opt.rounds = 1;
  OfflineSpace space = s.space;
  CoarseSolution sol = solve_per_realization(space, s.fp, 1);
  for (int round = 0; round < 3; ++round) {
    const EnrichmentResult r = enrich(space, s.nbs, s.fp, s.ens, s.u_h, ids, ids, CouplingMode::per_realization, opt, 1);
    for (int m = 0; m < 3; ++m)
      EXPECT_LE(energy_error(s.fp.stiffness[m], s.u_h[m], r.solution.fields[m]),
                energy_error(s.fp.stiffness[m], s.u_h[m], sol.fields[m]) * (1 + 1e-12));
    space = r.space;
    sol = r.solution;
  }
}

TEST(Enrich, TopFractionSelectsCeilingShare) {
  const Case s = make_setup(20, 4, 3, 1, 10);
  OnlineOptions opt;
  opt.rounds = 1;
  opt.selection = OnlineSelection::top_fraction;
  opt.theta = 0.25;
  const auto ids = iota(3);
  const EnrichmentResult r = enrich(s.space, s.nbs, s.fp, s.ens, s.u_h, ids, ids, CouplingMode::ensemble, opt, 1);
  const int records = static_cast<int>(s.nbs.size()) * 3;
  EXPECT_LE(r.trace[1].added, static_cast<int>(std::ceil(0.25 * records)));
  EXPECT_GE(r.trace[1].added, 1);
  opt.theta = 0.0;
  EXPECT_THROW(enrich(s.space, s.nbs, s.fp, s.ens, s.u_h, ids, ids, CouplingMode::ensemble, opt, 1), config_error);
}

TEST(Enrich, EnergyDualNormAlsoConverges) {
  const Case s = make_setup(20, 4, 2, 1, 11);
  OnlineOptions opt;
  opt.rounds = 2;
  opt.norm = ResidualNorm::energy_dual;
  const auto ids = iota(2);
  const EnrichmentResult r = enrich(s.space, s.nbs, s.fp, s.ens, s.u_h, ids, ids, CouplingMode::ensemble, opt, 1);
  EXPECT_LT(r.trace.back().errors.e1_S, r.trace.front().errors.e1_S);
}
