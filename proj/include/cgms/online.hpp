#pragma once

// Residual-driven online enrichment. For a realization omega and
// neighborhood D_i the local residual r(v) = l(v) - a(omega; u_ms, v),
// v in V_h0(D_i), defines an online basis through a local Riesz solve; the
// new column is shared by the whole cluster containing omega.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "cgms/errors.hpp"
#include "cgms/fem.hpp"
#include "cgms/offline.hpp"
#include "cgms/parallel.hpp"
#include "cgms/solver.hpp"

namespace cgms {

enum class ResidualNorm { l2, energy_dual };
enum class OnlineSelection { cluster_max, top_fraction };

struct ResidualRecord {
  int neighborhood = -1;
  int cluster = -1;
  int realization = -1;
  Vector residual;  // on the interior nodes of D_i, patch interior order
  double norm = 0.0;
};

/// Restriction of a global residual vector F - K u to the interior nodes of
/// D_i. Rows of interior D_i nodes only touch cells of D_i, so this is the
/// local functional r(v) on V_h0(D_i).
inline ResidualRecord restrict_residual(const Neighborhood& nb, int cluster, int omega, const Vector& global_residual) {
  ResidualRecord rec;
  rec.neighborhood = nb.id;
  rec.cluster = cluster;
  rec.realization = omega;
  const auto interior = nb.patch.interior_nodes();
  rec.residual.resize(static_cast<Eigen::Index>(interior.size()));
  for (std::size_t q = 0; q < interior.size(); ++q)
    rec.residual[static_cast<Eigen::Index>(q)] = global_residual[nb.patch.global_node(interior[q])];
  rec.norm = rec.residual.norm();
  return rec;
}

inline ResidualRecord compute_residual(const Neighborhood& nb, int cluster, int omega, const SparseMatrix& K,
                                       const Vector& load, const Vector& u_ms) {
  return restrict_residual(nb, cluster, omega, load - K * u_ms);
}

struct OnlineField {
  bool skipped = true;
  Vector field;      // all D_i nodes, zero on the boundary
  double dual_norm = 0.0;  // sqrt(r(phi)) = residual norm in the a(omega)-dual
};

/// Solves a(omega; phi, v) = r(v) for all v in V_h0(D_i).
inline OnlineField solve_online_basis(const Neighborhood& nb, const ResidualRecord& rec, std::span<const double> kappa_global) {
  OnlineField out;
  out.field = Vector::Zero(nb.patch.num_nodes());
  if (!(rec.norm > 0.0)) return out;
  const Vector kappa = nb.patch.restrict_cells(kappa_global);
  Vector b = Vector::Zero(nb.patch.num_nodes());
  const auto interior = nb.patch.interior_nodes();
  for (std::size_t q = 0; q < interior.size(); ++q) b[interior[q]] = rec.residual[static_cast<Eigen::Index>(q)];
  try {
    const DirichletSolver solver(assemble_stiffness(nb.patch, kappa), nb.patch.boundary_nodes());
    out.field = solver.solve(b, Vector::Zero(static_cast<Eigen::Index>(nb.patch.boundary_nodes().size())));
  } catch (const numerical_error& e) {
    throw numerical_error("online basis (i=" + std::to_string(rec.neighborhood) + ", j=" + std::to_string(rec.cluster) +
                          ", omega=" + std::to_string(rec.realization) + "): " + e.what());
  }
  out.dual_norm = std::sqrt(std::max(0.0, b.dot(out.field)));
  out.skipped = !(out.dual_norm > 0.0);
  return out;
}

struct OnlineOptions {
  int rounds = 3;
  OnlineSelection selection = OnlineSelection::cluster_max;
  double theta = 1.0;           // top_fraction: share of candidate records enriched per round
  ResidualNorm norm = ResidualNorm::l2;
  double skip_tol = 1e-12;      // relative residual below which a record is not enriched
};

struct TraceRow {
  int round = 0;
  int dofs = 0;
  int added = 0;
  ErrorReport errors;
};

struct EnrichmentResult {
  OfflineSpace space;
  CoarseSolution solution;
  std::vector<TraceRow> trace;
};

namespace detail {

/// Removes the components of v along the existing columns of (i, j), which
/// share the interior-node support of D_i. Returns false when nothing is left.
inline bool orthogonalize_against(const OfflineSpace& space, int i, int j, Vector& v) {
  const double n0 = v.norm();
  if (n0 == 0.0) return false;
  for (int pass = 0; pass < 2; ++pass) {
    std::vector<const BasisColumn*> same;
    for (const BasisColumn& c : space.columns)
      if (c.neighborhood == i && c.cluster == j) same.push_back(&c);
    // Modified Gram-Schmidt on an orthonormalized copy of the existing block.
    Matrix Q(v.size(), 0);
    for (const BasisColumn* c : same) {
      Vector y = c->values;
      for (Eigen::Index q = 0; q < Q.cols(); ++q) y -= Q.col(q).dot(y) * Q.col(q);
      const double ny = y.norm();
      if (ny > 1e-12 * c->values.norm()) {
        Q.conservativeResize(Eigen::NoChange, Q.cols() + 1);
        Q.col(Q.cols() - 1) = y / ny;
      }
    }
    for (Eigen::Index q = 0; q < Q.cols(); ++q) v -= Q.col(q).dot(v) * Q.col(q);
  }
  return v.norm() > 1e-10 * n0;
}

}  // namespace detail

/// Iterated enrichment. Each round solves the coarse problem, computes the
/// residuals of the candidate realizations in every neighborhood, selects
/// records, appends one online column per selected record (cluster
/// supported) and re-solves. The trace holds the errors before the first
/// round and after every round.
inline EnrichmentResult enrich(OfflineSpace space, const std::vector<Neighborhood>& nbs, const FineProblem& fp,
                               const PermeabilityEnsemble& ens, std::span<const Vector> u_h,
                               std::span<const int> candidates, std::span<const int> error_subset,
                               CouplingMode mode, const OnlineOptions& opt, int threads = 0) {
  if (opt.rounds < 1) throw config_error("online rounds must be at least 1");
  if (opt.selection == OnlineSelection::top_fraction && !(opt.theta > 0.0 && opt.theta <= 1.0))
    throw config_error("online theta must lie in (0, 1]");
  const std::span<const double> w(ens.weights.data(), ens.weights.size());
  EnrichmentResult res;
  res.solution = solve_coarse(space, fp, w, mode, threads);
  auto errors = [&](const CoarseSolution& s) { return compute_errors(fp.mass, u_h, s.fields, w, error_subset); };
  res.trace.push_back({0, space.dimension(), 0, errors(res.solution)});

  for (int round = 1; round <= opt.rounds; ++round) {
    // Residual records for every (i, candidate omega); omega's cluster in D_i is labels[i][omega].
    std::vector<std::pair<int, int>> jobs;
    for (std::size_t i = 0; i < nbs.size(); ++i)
      for (int omega : candidates) jobs.emplace_back(static_cast<int>(i), omega);
    std::vector<Vector> global_res(candidates.size());
    parallel_for(static_cast<int>(candidates.size()), threads, [&](int c) {
      global_res[c] = fp.load - fp.stiffness[candidates[c]] * res.solution.fields[candidates[c]];
    });
    std::vector<ResidualRecord> recs(jobs.size());
    std::vector<double> scale(jobs.size());
    parallel_for(static_cast<int>(jobs.size()), threads, [&](int t) {
      const auto [i, omega] = jobs[t];
      recs[t] = restrict_residual(nbs[i], space.labels[i][omega], omega, global_res[t % candidates.size()]);
      Vector local(recs[t].residual.size());
      const auto interior = nbs[i].patch.interior_nodes();
      for (std::size_t q = 0; q < interior.size(); ++q) local[static_cast<Eigen::Index>(q)] = fp.load[nbs[i].patch.global_node(interior[q])];
      scale[t] = local.norm();
    });
    std::vector<OnlineField> fields(jobs.size());
    if (opt.norm == ResidualNorm::energy_dual) {
      parallel_for(static_cast<int>(jobs.size()), threads, [&](int t) {
        fields[t] = solve_online_basis(nbs[recs[t].neighborhood], recs[t], ens.kappa(recs[t].realization));
        recs[t].norm = fields[t].dual_norm;
      });
    }

    std::vector<int> eligible;
    for (std::size_t t = 0; t < recs.size(); ++t)
      if (recs[t].norm > opt.skip_tol * std::max(scale[t], 1e-300)) eligible.push_back(static_cast<int>(t));
    std::vector<int> chosen;
    if (opt.selection == OnlineSelection::cluster_max) {
      for (int t : eligible) {
        auto same = std::find_if(chosen.begin(), chosen.end(), [&](int c) {
          return recs[c].neighborhood == recs[t].neighborhood && recs[c].cluster == recs[t].cluster;
        });
        if (same == chosen.end())
          chosen.push_back(t);
        else if (recs[t].norm > recs[*same].norm)
          *same = t;
      }
    } else {
      std::vector<int> order = eligible;
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return recs[a].norm > recs[b].norm; });
      const auto take = static_cast<std::size_t>(std::ceil(opt.theta * static_cast<double>(order.size())));
      order.resize(std::min(order.size(), take));
      chosen = std::move(order);
    }
    std::sort(chosen.begin(), chosen.end());

    if (opt.norm != ResidualNorm::energy_dual) {
      parallel_for(static_cast<int>(chosen.size()), threads, [&](int c) {
        const int t = chosen[c];
        fields[t] = solve_online_basis(nbs[recs[t].neighborhood], recs[t], ens.kappa(recs[t].realization));
      });
    }

    int added = 0;
    for (int t : chosen) {
      if (fields[t].skipped) continue;
      const ResidualRecord& r = recs[t];
      const Neighborhood& nb = nbs[r.neighborhood];
      const int index = static_cast<int>(std::count_if(space.columns.begin(), space.columns.end(), [&](const BasisColumn& c) {
        return c.neighborhood == r.neighborhood && c.cluster == r.cluster && c.kind == ColumnKind::online;
      }));
      BasisColumn col = make_column(nb, r.cluster, index, fields[t].field, ColumnKind::online);
      if (!detail::orthogonalize_against(space, r.neighborhood, r.cluster, col.values)) continue;
      col.values /= col.values.norm();
      col.realization = r.realization;
      col.round = round;
      space.columns.push_back(std::move(col));
      ++added;
    }
    if (added > 0) res.solution = solve_coarse(space, fp, w, mode, threads);
    res.trace.push_back({round, space.dimension(), added, errors(res.solution)});
  }
  res.space = std::move(space);
  return res;
}

}  // namespace cgms
