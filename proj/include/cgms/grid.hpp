#pragma once

// Structured fine/coarse grids on the unit square, coarse neighborhoods,
// oversampled neighborhoods and the coarse partition of unity.
//
// Numbering is row-major everywhere: node (ix, iy) -> iy*(nx+1)+ix,
// cell (cx, cy) -> cy*nx+cx. Cell-local node order is counterclockwise
// starting at the lower-left corner.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cgms/errors.hpp"

namespace cgms {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct FineGrid {
  int nx = 0;
  int ny = 0;
  double hx = 0.0;
  double hy = 0.0;

  int num_nodes() const { return (nx + 1) * (ny + 1); }
  int num_cells() const { return nx * ny; }
  int node(int ix, int iy) const { return iy * (nx + 1) + ix; }
  int cell(int cx, int cy) const { return cy * nx + cx; }

  std::array<int, 4> cell_nodes(int c) const {
    const int cx = c % nx, cy = c / nx;
    return {node(cx, cy), node(cx + 1, cy), node(cx + 1, cy + 1), node(cx, cy + 1)};
  }
  Point node_coord(int n) const {
    return {(n % (nx + 1)) * hx, (n / (nx + 1)) * hy};
  }
  Point cell_center(int c) const {
    return {((c % nx) + 0.5) * hx, ((c / nx) + 0.5) * hy};
  }
  bool is_boundary_node(int n) const {
    const int ix = n % (nx + 1), iy = n / (nx + 1);
    return ix == 0 || iy == 0 || ix == nx || iy == ny;
  }
  std::vector<int> boundary_nodes() const {
    std::vector<int> out;
    for (int n = 0; n < num_nodes(); ++n)
      if (is_boundary_node(n)) out.push_back(n);
    return out;
  }
};

struct CoarseGrid {
  int Nx = 0;
  int Ny = 0;
  int rx = 0;  // fine cells per coarse cell, x
  int ry = 0;
  double Hx = 0.0;
  double Hy = 0.0;

  /// N = (Nx-1)(Ny-1); only interior coarse nodes carry neighborhoods.
  int num_interior_nodes() const { return (Nx - 1) * (Ny - 1); }

  /// Coarse lattice indices (ix, iy) of interior node id i.
  std::pair<int, int> interior_node_index(int i) const {
    return {1 + i % (Nx - 1), 1 + i / (Nx - 1)};
  }
  Point interior_node(int i) const {
    auto [ix, iy] = interior_node_index(i);
    return {ix * Hx, iy * Hy};
  }
};

inline std::pair<FineGrid, CoarseGrid> build_grids(int nx, int ny, int Nx, int Ny) {
  if (nx < 2 || ny < 2) throw config_error("fine grid needs at least 2 cells per axis");
  if (Nx < 2 || Ny < 2) throw config_error("coarse grid needs at least 2 cells per axis");
  if (nx % Nx != 0 || ny % Ny != 0)
    throw config_error("fine grid " + std::to_string(nx) + "x" + std::to_string(ny) +
                       " is not a refinement of coarse grid " + std::to_string(Nx) + "x" +
                       std::to_string(Ny));
  FineGrid fine{nx, ny, 1.0 / nx, 1.0 / ny};
  CoarseGrid coarse{Nx, Ny, nx / Nx, ny / Ny, 1.0 / Nx, 1.0 / Ny};
  return {fine, coarse};
}

/// Half-open range of fine cells [x0, x1) x [y0, y1).
struct CellBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool operator==(const CellBox&) const = default;
};

/// A rectangular block of fine cells with its own local node/cell numbering.
/// Assembly and local solves operate on patches.
class Patch {
 public:
  Patch() = default;

  Patch(const FineGrid& grid, CellBox box) : grid_(grid), box_(box) {
    if (box.x0 < 0 || box.y0 < 0 || box.x1 > grid.nx || box.y1 > grid.ny || box.width() < 1 ||
        box.height() < 1)
      throw config_error("patch box outside the fine grid");
    const int n = num_nodes();
    on_boundary_.assign(n, 0);
    for (int l = 0; l < n; ++l) {
      const int lx = l % (box.width() + 1), ly = l / (box.width() + 1);
      if (lx == 0 || ly == 0 || lx == box.width() || ly == box.height()) {
        on_boundary_[l] = 1;
        boundary_.push_back(l);
      } else {
        interior_.push_back(l);
      }
    }
  }

  const FineGrid& grid() const { return grid_; }
  const CellBox& box() const { return box_; }
  int cells_x() const { return box_.width(); }
  int cells_y() const { return box_.height(); }
  int num_nodes() const { return (cells_x() + 1) * (cells_y() + 1); }
  int num_cells() const { return cells_x() * cells_y(); }
  double hx() const { return grid_.hx; }
  double hy() const { return grid_.hy; }

  int local_node(int lx, int ly) const { return ly * (cells_x() + 1) + lx; }
  int global_node(int local) const {
    const int lx = local % (cells_x() + 1), ly = local / (cells_x() + 1);
    return grid_.node(box_.x0 + lx, box_.y0 + ly);
  }
  int global_cell(int local) const {
    return grid_.cell(box_.x0 + local % cells_x(), box_.y0 + local / cells_x());
  }
  std::array<int, 4> cell_nodes(int local_cell) const {
    const int cx = local_cell % cells_x(), cy = local_cell / cells_x();
    return {local_node(cx, cy), local_node(cx + 1, cy), local_node(cx + 1, cy + 1),
            local_node(cx, cy + 1)};
  }
  Point node_coord(int local) const { return grid_.node_coord(global_node(local)); }
  Point cell_center(int local_cell) const { return grid_.cell_center(global_cell(local_cell)); }

  /// Local index of a global node, or -1 when the node lies outside.
  int find_global(int global) const {
    const int ix = global % (grid_.nx + 1) - box_.x0, iy = global / (grid_.nx + 1) - box_.y0;
    if (ix < 0 || iy < 0 || ix > cells_x() || iy > cells_y()) return -1;
    return local_node(ix, iy);
  }

  std::span<const int> boundary_nodes() const { return boundary_; }
  std::span<const int> interior_nodes() const { return interior_; }
  bool is_boundary(int local) const { return on_boundary_[local] != 0; }

  /// Restricts a global cellwise field to this patch's cells.
  Vector restrict_cells(std::span<const double> global_cells) const {
    Vector out(num_cells());
    for (int c = 0; c < num_cells(); ++c) out[c] = global_cells[global_cell(c)];
    return out;
  }
  /// Restricts a global nodal field to this patch's nodes.
  Vector restrict_nodes(const Vector& global_nodes) const {
    Vector out(num_nodes());
    for (int l = 0; l < num_nodes(); ++l) out[l] = global_nodes[global_node(l)];
    return out;
  }

 private:
  FineGrid grid_{};
  CellBox box_{};
  std::vector<int> boundary_;
  std::vector<int> interior_;
  std::vector<char> on_boundary_;
};

/// Coarse neighborhood D_i: the 2x2 block of coarse cells around interior node x_i.
struct Neighborhood {
  int id = -1;
  int coarse_ix = 0;
  int coarse_iy = 0;
  std::array<int, 4> coarse_cells{};  // coarse cell ids cy*Nx+cx
  Patch patch;

  std::vector<int> all_nodes() const {
    std::vector<int> out(patch.num_nodes());
    for (int l = 0; l < patch.num_nodes(); ++l) out[l] = patch.global_node(l);
    return out;
  }
  std::span<const int> interior_nodes() const { return patch.interior_nodes(); }
  std::span<const int> boundary_nodes() const { return patch.boundary_nodes(); }
};

inline Neighborhood neighborhood(const FineGrid& fine, const CoarseGrid& coarse, int i) {
  if (i < 0 || i >= coarse.num_interior_nodes())
    throw config_error("coarse node " + std::to_string(i) + " is not an interior node");
  auto [ix, iy] = coarse.interior_node_index(i);
  Neighborhood nb;
  nb.id = i;
  nb.coarse_ix = ix;
  nb.coarse_iy = iy;
  nb.coarse_cells = {(iy - 1) * coarse.Nx + ix - 1, (iy - 1) * coarse.Nx + ix,
                     iy * coarse.Nx + ix, iy * coarse.Nx + ix - 1};
  nb.patch = Patch(fine, CellBox{(ix - 1) * coarse.rx, (iy - 1) * coarse.ry, (ix + 1) * coarse.rx,
                                 (iy + 1) * coarse.ry});
  return nb;
}

inline std::vector<Neighborhood> all_neighborhoods(const FineGrid& fine, const CoarseGrid& coarse) {
  std::vector<Neighborhood> out;
  out.reserve(coarse.num_interior_nodes());
  for (int i = 0; i < coarse.num_interior_nodes(); ++i) out.push_back(neighborhood(fine, coarse, i));
  return out;
}

/// D_i^+: D_i extended by `layers` fine cells per side, clipped to the domain.
struct OversampledNeighborhood {
  int base = -1;
  int layers = 0;
  Patch patch;
  /// For each local node of D_i, its local index in D_i^+.
  std::vector<int> inner_nodes;

  std::span<const int> boundary_nodes() const { return patch.boundary_nodes(); }
};

inline OversampledNeighborhood oversample(const Neighborhood& nb, int layers) {
  if (layers < 0) throw config_error("oversampling layers must be nonnegative");
  const FineGrid& g = nb.patch.grid();
  const CellBox& b = nb.patch.box();
  CellBox ext{std::max(0, b.x0 - layers), std::max(0, b.y0 - layers), std::min(g.nx, b.x1 + layers),
              std::min(g.ny, b.y1 + layers)};
  OversampledNeighborhood out;
  out.base = nb.id;
  out.layers = layers;
  out.patch = Patch(g, ext);
  out.inner_nodes.resize(nb.patch.num_nodes());
  for (int l = 0; l < nb.patch.num_nodes(); ++l)
    out.inner_nodes[l] = out.patch.find_global(nb.patch.global_node(l));
  return out;
}

namespace detail {
inline double hat(double t) { return std::max(0.0, 1.0 - std::abs(t)); }
}  // namespace detail

/// Coarse bilinear hat chi_i sampled at the fine nodes of D_i. Offsets are
/// computed in integer fine-node units so chi_i vanishes exactly on the
/// boundary of D_i.
inline Vector partition_of_unity(const CoarseGrid& coarse, const Neighborhood& nb) {
  const FineGrid& g = nb.patch.grid();
  Vector chi(nb.patch.num_nodes());
  for (int l = 0; l < nb.patch.num_nodes(); ++l) {
    const int n = nb.patch.global_node(l);
    const int dx = n % (g.nx + 1) - nb.coarse_ix * coarse.rx;
    const int dy = n / (g.nx + 1) - nb.coarse_iy * coarse.ry;
    chi[l] = detail::hat(static_cast<double>(dx) / coarse.rx) *
             detail::hat(static_cast<double>(dy) / coarse.ry);
  }
  return chi;
}

/// |grad chi_i|^2 evaluated at each fine-cell center of D_i.
inline Vector partition_of_unity_gradient_sq(const CoarseGrid& coarse, const Neighborhood& nb) {
  const Point xi = coarse.interior_node(nb.id);
  Vector out(nb.patch.num_cells());
  for (int c = 0; c < nb.patch.num_cells(); ++c) {
    const Point p = nb.patch.cell_center(c);
    const double tx = (p.x - xi.x) / coarse.Hx, ty = (p.y - xi.y) / coarse.Hy;
    const double dx = (tx < 0 ? 1.0 : -1.0) / coarse.Hx * detail::hat(ty);
    const double dy = (ty < 0 ? 1.0 : -1.0) / coarse.Hy * detail::hat(tx);
    out[c] = dx * dx + dy * dy;
  }
  return out;
}

}  // namespace cgms
