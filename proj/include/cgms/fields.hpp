#pragma once

// Random coefficient ensembles: the high-contrast inclusion/channel medium,
// the log-sine medium, and the on-disk ensemble directory format.
//
// Ensemble directory layout:
//   ensemble.json        {"format","version","nx","ny","M","dtype","byte_order",
//                         "layout","weights":[...],"files":[...]}
//   kappa_00000.bin ...  nx*ny little-endian float64 values, row-major cells

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cgms/errors.hpp"
#include "cgms/grid.hpp"
#include "cgms/random.hpp"

namespace cgms {

struct PermeabilityEnsemble {
  FineGrid grid;
  std::vector<Vector> realizations;  // cellwise kappa, one per omega
  std::vector<double> weights;

  int size() const { return static_cast<int>(realizations.size()); }
  std::span<const double> kappa(int omega) const {
    return {realizations[omega].data(), static_cast<std::size_t>(realizations[omega].size())};
  }

  /// Throws ingestion_error when an invariant is violated.
  void validate() const {
    if (realizations.empty()) throw ingestion_error("ensemble has no realizations");
    if (weights.size() != realizations.size())
      throw ingestion_error("ensemble weight count does not match realization count");
    double total = 0.0;
    for (double w : weights) {
      if (!std::isfinite(w) || w < 0.0) throw ingestion_error("ensemble weight is negative or not finite");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12) throw ingestion_error("ensemble weights do not sum to 1");
    for (int m = 0; m < size(); ++m) {
      const Vector& k = realizations[m];
      if (k.size() != grid.num_cells())
        throw ingestion_error("realization " + std::to_string(m) + " has wrong cell count");
      for (Eigen::Index c = 0; c < k.size(); ++c)
        if (!(k[c] > 0.0) || !std::isfinite(k[c]))
          throw ingestion_error("realization " + std::to_string(m) + " has a nonpositive or non-finite value at cell " +
                                std::to_string(c));
    }
  }
};

inline std::vector<double> uniform_weights(int M) { return std::vector<double>(M, 1.0 / M); }

/// Cellwise constant source f.
inline Vector constant_source(const FineGrid& grid, double value) {
  return Vector::Constant(grid.num_cells(), value);
}

// ---------------------------------------------------------------------------
// High-contrast inclusions and channels

enum class Shape { rectangle, ellipse };

/// Axis-aligned shape in unit-square coordinates (center and half-widths).
struct Inclusion {
  Shape shape = Shape::rectangle;
  double cx = 0.5, cy = 0.5;
  double wx = 0.05, wy = 0.05;
};

struct InclusionMediumConfig {
  double background = 1.0;
  std::vector<Inclusion> inclusions;
  std::vector<Inclusion> channels;
  double contrast_min = 1e3;
  double contrast_max = 1e4;
  int jitter_cells = 20;  // translation amplitude J, in fine cells
  std::uint64_t seed = 0;

  /// Eight rectangular inclusions and two horizontal channels.
  static InclusionMediumConfig defaults(int jitter_cells, std::uint64_t seed = 0) {
    InclusionMediumConfig cfg;
    cfg.jitter_cells = jitter_cells;
    cfg.seed = seed;
    // Every shape stays clear of the outermost coarse layer even after jitter:
    // a conductive feature there cannot be represented, since boundary coarse
    // nodes carry no basis.
    cfg.inclusions = {
        {Shape::rectangle, 0.25, 0.25, 0.03, 0.02}, {Shape::rectangle, 0.50, 0.24, 0.02, 0.03},
        {Shape::rectangle, 0.75, 0.26, 0.03, 0.03}, {Shape::rectangle, 0.26, 0.51, 0.02, 0.04},
        {Shape::rectangle, 0.50, 0.50, 0.04, 0.02}, {Shape::rectangle, 0.74, 0.52, 0.02, 0.03},
        {Shape::rectangle, 0.30, 0.76, 0.03, 0.02}, {Shape::rectangle, 0.70, 0.75, 0.03, 0.03},
    };
    cfg.channels = {
        {Shape::rectangle, 0.50, 0.37, 0.28, 0.01},
        {Shape::rectangle, 0.50, 0.63, 0.28, 0.01},
    };
    return cfg;
  }

  void validate() const {
    if (!(background > 0.0)) throw config_error("inclusion medium background must be positive");
    if (!(contrast_min > background)) throw config_error("contrast_min must exceed the background value");
    if (contrast_max < contrast_min) throw config_error("contrast_max must be >= contrast_min");
    if (jitter_cells < 0) throw config_error("jitter must be nonnegative");
  }
};

namespace detail {

inline bool covers(const FineGrid& g, int cell, const Inclusion& s, double shift_x, double shift_y) {
  const double cx = s.cx + shift_x, cy = s.cy + shift_y;
  if (s.shape == Shape::ellipse) {
    const Point p = g.cell_center(cell);
    const double u = (p.x - cx) / s.wx, v = (p.y - cy) / s.wy;
    return u * u + v * v <= 1.0;
  }
  // Rectangles mark every cell they overlap with positive area.
  const double x0 = (cell % g.nx) * g.hx, y0 = (cell / g.nx) * g.hy;
  const double ox = std::min(x0 + g.hx, cx + s.wx) - std::max(x0, cx - s.wx);
  const double oy = std::min(y0 + g.hy, cy + s.wy) - std::max(y0, cy - s.wy);
  return ox > 1e-12 && oy > 1e-12;
}

}  // namespace detail

/// Single realization omega of the inclusion medium. Every inclusion and
/// channel gets an i.i.d. integer translation in [-J, J]^2 fine cells and a
/// log-uniform contrast in [contrast_min, contrast_max]. Returns the number
/// of shapes that fell entirely outside the domain.
inline int inclusion_realization(const FineGrid& grid, const InclusionMediumConfig& cfg, int omega,
                                 Vector& kappa) {
  kappa = Vector::Constant(grid.num_cells(), cfg.background);
  Rng rng = make_rng(cfg.seed, stream::inclusion, {static_cast<std::uint64_t>(omega)});
  std::uniform_int_distribution<int> jitter(-cfg.jitter_cells, cfg.jitter_cells);
  std::uniform_real_distribution<double> log_contrast(std::log(cfg.contrast_min), std::log(cfg.contrast_max));
  int skipped = 0;
  auto place = [&](const Inclusion& s) {
    const int dx = jitter(rng), dy = jitter(rng);
    const double value = cfg.contrast_min == cfg.contrast_max ? cfg.contrast_min : std::exp(log_contrast(rng));
    bool any = false;
    for (int c = 0; c < grid.num_cells(); ++c) {
      if (detail::covers(grid, c, s, dx * grid.hx, dy * grid.hy)) {
        kappa[c] = std::max(kappa[c], value);
        any = true;
      }
    }
    if (!any) ++skipped;
  };
  for (const auto& s : cfg.inclusions) place(s);
  for (const auto& s : cfg.channels) place(s);
  return skipped;
}

inline PermeabilityEnsemble generate_inclusion_medium(const FineGrid& grid, const InclusionMediumConfig& cfg,
                                                      int M) {
  if (M < 1) throw config_error("ensemble size must be at least 1");
  cfg.validate();
  PermeabilityEnsemble ens{grid, std::vector<Vector>(M), uniform_weights(M)};
  int skipped = 0;
  for (int m = 0; m < M; ++m) skipped += inclusion_realization(grid, cfg, m, ens.realizations[m]);
  if (skipped > 0)
    std::clog << "warning: " << skipped << " jittered inclusion(s) fell outside the domain and were skipped\n";
  return ens;
}

// ---------------------------------------------------------------------------
// Log-sine medium: kappa = exp(0.1 + sum_k g_k(x) xi_k), xi_k ~ N(0, 1)

inline std::array<double, 3> logsine_factors(Point p) {
  using std::sin;
  constexpr double pi = std::numbers::pi;
  const double x = p.x, y = p.y;
  return {(2.0 + sin(7 * pi * x) * sin(8 * pi * y)) / (2.0 + sin(9 * pi * x) * sin(7 * pi * y)),
          (2.0 + sin(13 * pi * x) * sin(11 * pi * y)) / (2.0 + sin(11 * pi * x) * sin(13 * pi * y)),
          (2.0 + sin(12 * pi * x) * sin(14 * pi * y)) / (2.0 + sin(15 * pi * x) * sin(15 * pi * y))};
}

inline Vector logsine_field(const FineGrid& grid, const std::array<double, 3>& xi) {
  Vector kappa(grid.num_cells());
  for (int c = 0; c < grid.num_cells(); ++c) {
    const auto g = logsine_factors(grid.cell_center(c));
    kappa[c] = std::exp(0.1 + g[0] * xi[0] + g[1] * xi[1] + g[2] * xi[2]);
  }
  return kappa;
}

/// xi for realization omega; independent of the ensemble size.
inline std::array<double, 3> logsine_xi(std::uint64_t seed, int omega) {
  Rng rng = make_rng(seed, stream::logsine, {static_cast<std::uint64_t>(omega)});
  std::normal_distribution<double> normal(0.0, 1.0);
  std::array<double, 3> xi{};
  for (double& v : xi) v = normal(rng);
  return xi;
}

inline PermeabilityEnsemble generate_logsine_medium(const FineGrid& grid, std::uint64_t seed, int M) {
  if (M < 1) throw config_error("ensemble size must be at least 1");
  PermeabilityEnsemble ens{grid, std::vector<Vector>(M), uniform_weights(M)};
  for (int m = 0; m < M; ++m) ens.realizations[m] = logsine_field(grid, logsine_xi(seed, m));
  return ens;
}

// ---------------------------------------------------------------------------
// Ensemble directory I/O

namespace detail {

inline std::string realization_file_name(int m) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "kappa_%05d.bin", m);
  return buf;
}

inline void write_f64_le(std::ostream& out, const double* data, std::size_t n) {
  static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      auto bits = std::bit_cast<std::uint64_t>(data[i]);
      char bytes[8];
      for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
      out.write(bytes, 8);
    }
  }
}

inline void read_f64_le(std::istream& in, double* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      unsigned char bytes[8];
      in.read(reinterpret_cast<char*>(bytes), 8);
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
      data[i] = std::bit_cast<double>(bits);
    }
  }
}

}  // namespace detail

inline void save_ensemble(const PermeabilityEnsemble& ens, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  ens.validate();
  fs::create_directories(dir);
  nlohmann::json meta;
  meta["format"] = "cgms-ensemble";
  meta["version"] = 1;
  meta["nx"] = ens.grid.nx;
  meta["ny"] = ens.grid.ny;
  meta["M"] = ens.size();
  meta["dtype"] = "float64";
  meta["byte_order"] = "little";
  meta["layout"] = "row-major-cells";
  meta["weights"] = ens.weights;
  std::vector<std::string> files;
  for (int m = 0; m < ens.size(); ++m) {
    files.push_back(detail::realization_file_name(m));
    std::ofstream out(dir / files.back(), std::ios::binary);
    if (!out) throw ingestion_error("cannot write " + (dir / files.back()).string());
    detail::write_f64_le(out, ens.realizations[m].data(), ens.realizations[m].size());
  }
  meta["files"] = files;
  std::ofstream out(dir / "ensemble.json");
  if (!out) throw ingestion_error("cannot write " + (dir / "ensemble.json").string());
  out << meta.dump(2) << '\n';
}

inline PermeabilityEnsemble load_ensemble(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path meta_path = dir / "ensemble.json";
  std::ifstream in(meta_path);
  if (!in) throw ingestion_error("cannot open " + meta_path.string());
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ingestion_error("malformed ensemble header " + meta_path.string() + ": " + e.what());
  }
  PermeabilityEnsemble ens;
  int M = 0;
  std::vector<std::string> files;
  try {
    if (meta.value("dtype", std::string{}) != "float64")
      throw ingestion_error("unsupported dtype in " + meta_path.string());
    if (meta.value("byte_order", std::string{"little"}) != "little")
      throw ingestion_error("unsupported byte order in " + meta_path.string());
    const int nx = meta.at("nx").get<int>(), ny = meta.at("ny").get<int>();
    if (nx < 1 || ny < 1) throw ingestion_error("nonpositive grid size in " + meta_path.string());
    ens.grid = FineGrid{nx, ny, 1.0 / nx, 1.0 / ny};
    M = meta.at("M").get<int>();
    ens.weights = meta.at("weights").get<std::vector<double>>();
    if (meta.contains("files")) {
      files = meta.at("files").get<std::vector<std::string>>();
    } else {
      for (int m = 0; m < M; ++m) files.push_back(detail::realization_file_name(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ingestion_error("malformed ensemble header " + meta_path.string() + ": " + e.what());
  }
  if (M < 1) throw ingestion_error("ensemble header declares no realizations");
  if (static_cast<int>(ens.weights.size()) != M || static_cast<int>(files.size()) != M)
    throw ingestion_error("ensemble header: M does not match weights/files");

  const auto expected_bytes = static_cast<std::uintmax_t>(ens.grid.num_cells()) * sizeof(double);
  ens.realizations.resize(M);
  for (int m = 0; m < M; ++m) {
    const fs::path p = dir / files[m];
    std::error_code ec;
    const auto bytes = fs::file_size(p, ec);
    if (ec) throw ingestion_error("cannot open realization file " + p.string());
    if (bytes != expected_bytes)
      throw ingestion_error("size mismatch in " + p.string() + ": expected " + std::to_string(expected_bytes) +
                            " bytes, found " + std::to_string(bytes));
    std::ifstream bin(p, std::ios::binary);
    ens.realizations[m].resize(ens.grid.num_cells());
    detail::read_f64_le(bin, ens.realizations[m].data(), ens.grid.num_cells());
    if (!bin) throw ingestion_error("short read in " + p.string());
  }
  ens.validate();
  return ens;
}

}  // namespace cgms
