#pragma once

// Coarsening of the realization set per neighborhood: feature rows built
// from reduced local coefficients (Euclidean distance between rows is the
// reduced-solution distance), k-means with k-means++ seeding and restarts,
// and cluster-mean coefficients.

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <limits>
#include <span>
#include <vector>

#include "cgms/errors.hpp"
#include "cgms/fields.hpp"
#include "cgms/grid.hpp"
#include "cgms/random.hpp"

namespace cgms {

struct FeatureTable {
  int neighborhood = -1;
  Matrix rows;  // M x (k*L)

  int size() const { return static_cast<int>(rows.rows()); }
  double distance(int a, int b) const { return (rows.row(a) - rows.row(b)).norm(); }
};

/// Row omega is p~(omega) flattened j-major: entry j*L + l.
inline FeatureTable build_features(int neighborhood, std::span<const Matrix> reduced) {
  if (reduced.empty()) throw config_error("features need at least one realization");
  const Eigen::Index k = reduced[0].rows(), L = reduced[0].cols();
  FeatureTable t;
  t.neighborhood = neighborhood;
  t.rows.resize(static_cast<Eigen::Index>(reduced.size()), k * L);
  for (std::size_t m = 0; m < reduced.size(); ++m) {
    if (reduced[m].rows() != k || reduced[m].cols() != L)
      throw config_error("reduced coefficients have inconsistent shapes");
    for (Eigen::Index j = 0; j < k; ++j)
      for (Eigen::Index l = 0; l < L; ++l) t.rows(static_cast<Eigen::Index>(m), j * L + l) = reduced[m](j, l);
  }
  return t;
}

struct KMeansOptions {
  int clusters = 1;
  int max_iter = 300;
  int restarts = 10;
  std::uint64_t seed = 0;
};

struct KMeansResult {
  std::vector<int> labels;      // 0-based, numbered by first appearance
  int clusters = 0;             // after reduction to the distinct row count
  double objective = 0.0;       // within-cluster sum of squares
  std::vector<double> history;  // objective after each Lloyd iteration of the kept run
  int iterations = 0;
  bool reduced = false;         // requested J exceeded the distinct rows
};

/// Within-cluster sum of squares recomputed from labels alone.
inline double kmeans_objective(const Matrix& X, std::span<const int> labels, int clusters) {
  Matrix centers = Matrix::Zero(clusters, X.cols());
  std::vector<int> count(clusters, 0);
  for (Eigen::Index m = 0; m < X.rows(); ++m) {
    centers.row(labels[m]) += X.row(m);
    ++count[labels[m]];
  }
  for (int c = 0; c < clusters; ++c)
    if (count[c] > 0) centers.row(c) /= count[c];
  double obj = 0.0;
  for (Eigen::Index m = 0; m < X.rows(); ++m) obj += (X.row(m) - centers.row(labels[m])).squaredNorm();
  return obj;
}

namespace detail {

inline int count_distinct_rows(const Matrix& X) {
  std::vector<Eigen::Index> reps;
  for (Eigen::Index m = 0; m < X.rows(); ++m) {
    bool seen = false;
    for (Eigen::Index r : reps)
      if (X.row(m) == X.row(r)) {
        seen = true;
        break;
      }
    if (!seen) reps.push_back(m);
  }
  return static_cast<int>(reps.size());
}

/// Renumbers labels in order of first appearance.
inline int canonical_labels(std::vector<int>& labels) {
  std::vector<int> map;
  int next = 0;
  for (int& l : labels) {
    if (l >= static_cast<int>(map.size())) map.resize(l + 1, -1);
    if (map[l] < 0) map[l] = next++;
    l = map[l];
  }
  return next;
}

struct LloydRun {
  std::vector<int> labels;
  std::vector<double> history;
  int iterations = 0;
  double objective = 0.0;
};

inline LloydRun lloyd(const Matrix& X, int J, int max_iter, Rng& rng) {
  const Eigen::Index M = X.rows();
  // k-means++ seeding.
  Matrix centers(J, X.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, M - 1);
  centers.row(0) = X.row(pick(rng));
  Vector d2(M);
  for (Eigen::Index m = 0; m < M; ++m) d2[m] = (X.row(m) - centers.row(0)).squaredNorm();
  for (int c = 1; c < J; ++c) {
    const double total = d2.sum();
    Eigen::Index chosen = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng), acc = 0.0;
      chosen = M - 1;
      for (Eigen::Index m = 0; m < M; ++m) {
        acc += d2[m];
        if (acc >= target && d2[m] > 0.0) {
          chosen = m;
          break;
        }
      }
      if (d2[chosen] == 0.0) d2.maxCoeff(&chosen);
    }
    centers.row(c) = X.row(chosen);
    for (Eigen::Index m = 0; m < M; ++m) d2[m] = std::min(d2[m], (X.row(m) - centers.row(c)).squaredNorm());
  }

  LloydRun run;
  run.labels.assign(M, -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (Eigen::Index m = 0; m < M; ++m) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < J; ++c) {
        const double d = (X.row(m) - centers.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (run.labels[m] != best) {
        run.labels[m] = best;
        changed = true;
      }
    }
    // Empty clusters take the point farthest from its center.
    for (int c = 0; c < J; ++c) {
      if (std::find(run.labels.begin(), run.labels.end(), c) != run.labels.end()) continue;
      std::vector<int> count(J, 0);
      for (int l : run.labels) ++count[l];
      Eigen::Index far = -1;
      double far_d = -1.0;
      for (Eigen::Index m = 0; m < M; ++m) {
        if (count[run.labels[m]] < 2) continue;
        const double d = (X.row(m) - centers.row(run.labels[m])).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = m;
        }
      }
      if (far >= 0) {
        run.labels[far] = c;
        changed = true;
      }
    }
    centers.setZero();
    std::vector<int> count(J, 0);
    for (Eigen::Index m = 0; m < M; ++m) {
      centers.row(run.labels[m]) += X.row(m);
      ++count[run.labels[m]];
    }
    for (int c = 0; c < J; ++c)
      if (count[c] > 0) centers.row(c) /= count[c];
    run.history.push_back(kmeans_objective(X, run.labels, J));
    run.iterations = it + 1;
    if (!changed) break;
  }
  run.objective = run.history.back();
  return run;
}

}  // namespace detail

/// Lloyd k-means with k-means++ seeding; the best of opt.restarts runs is
/// kept. Labels are 0-based and numbered by first appearance, so the result
/// does not depend on the internal center order.
inline KMeansResult kmeans(const Matrix& X, const KMeansOptions& opt) {
  const int M = static_cast<int>(X.rows());
  if (M < 1) throw config_error("kmeans needs at least one row");
  if (opt.clusters < 1 || opt.clusters > M)
    throw config_error("kmeans: cluster count must lie in [1, " + std::to_string(M) + "]");
  if (opt.max_iter < 1 || opt.restarts < 1) throw config_error("kmeans: max_iter and restarts must be positive");

  KMeansResult out;
  int J = opt.clusters;
  if (J > 1) {
    const int distinct = detail::count_distinct_rows(X);
    if (J > distinct) {
      std::clog << "warning: kmeans requested " << J << " clusters but only " << distinct
                << " distinct feature rows exist; using " << distinct << "\n";
      J = distinct;
      out.reduced = true;
    }
  }
  if (J == 1) {
    out.labels.assign(M, 0);
    out.clusters = 1;
    out.objective = kmeans_objective(X, out.labels, 1);
    out.history = {out.objective};
    out.iterations = 1;
    return out;
  }
  detail::LloydRun best;
  bool have = false;
  for (int r = 0; r < opt.restarts; ++r) {
    Rng rng = make_rng(opt.seed, stream::kmeans, {static_cast<std::uint64_t>(r)});
    detail::LloydRun run = detail::lloyd(X, J, opt.max_iter, rng);
    if (!have || run.objective < best.objective) {
      best = std::move(run);
      have = true;
    }
  }
  out.labels = std::move(best.labels);
  out.clusters = detail::canonical_labels(out.labels);
  out.objective = best.objective;
  out.history = std::move(best.history);
  out.iterations = best.iterations;
  return out;
}

/// Cellwise unweighted mean of the member realizations, restricted to the patch.
inline Vector cluster_mean_field(const PermeabilityEnsemble& ens, std::span<const int> members, const Patch& region) {
  if (members.empty()) throw config_error("cluster mean of an empty cluster");
  Vector mean = Vector::Zero(region.num_cells());
  for (int m : members) mean += region.restrict_cells(ens.kappa(m));
  return mean / static_cast<double>(members.size());
}

struct ClusterPartition {
  int neighborhood = -1;
  int clusters = 0;
  std::vector<int> labels;                 // per omega
  std::vector<std::vector<int>> members;   // per cluster, ascending omega
  std::vector<Vector> mean_kappa;          // per cluster, cellwise on D_i
  std::vector<double> weight;              // per cluster, sum of member weights

  int label(int omega) const { return labels[omega]; }
};

inline ClusterPartition make_partition(const Neighborhood& nb, const PermeabilityEnsemble& ens, std::vector<int> labels) {
  if (static_cast<int>(labels.size()) != ens.size()) throw config_error("one label per realization required");
  ClusterPartition p;
  p.neighborhood = nb.id;
  p.clusters = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  p.members.resize(p.clusters);
  p.weight.assign(p.clusters, 0.0);
  for (int m = 0; m < ens.size(); ++m) {
    if (labels[m] < 0) throw config_error("negative cluster label");
    p.members[labels[m]].push_back(m);
    p.weight[labels[m]] += ens.weights[m];
  }
  for (int c = 0; c < p.clusters; ++c) {
    if (p.members[c].empty()) throw config_error("empty cluster " + std::to_string(c) + " in neighborhood " + std::to_string(nb.id));
    p.mean_kappa.push_back(cluster_mean_field(ens, p.members[c], nb.patch));
  }
  p.labels = std::move(labels);
  return p;
}

/// Every realization in its own cluster.
inline ClusterPartition singleton_partition(const Neighborhood& nb, const PermeabilityEnsemble& ens) {
  std::vector<int> labels(ens.size());
  for (int m = 0; m < ens.size(); ++m) labels[m] = m;
  return make_partition(nb, ens, std::move(labels));
}

inline ClusterPartition single_cluster_partition(const Neighborhood& nb, const PermeabilityEnsemble& ens) {
  return make_partition(nb, ens, std::vector<int>(ens.size(), 0));
}

}  // namespace cgms
