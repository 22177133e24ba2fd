#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include <Eigen/Core>

namespace cgms {

/// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seed for the stream identified by (base, tag, ids...). Streams for
/// different ids are independent of how many other streams exist, so
/// realization i draws the same numbers whatever the ensemble size.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag,
                                 std::initializer_list<std::uint64_t> ids = {}) {
  std::uint64_t s = mix64(base ^ mix64(tag));
  for (auto id : ids) s = mix64(s ^ (id + 0x632be59bd9b4e019ULL));
  return s;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t base, std::uint64_t tag,
                    std::initializer_list<std::uint64_t> ids = {}) {
  return Rng(derive_seed(base, tag, ids));
}

inline Eigen::VectorXd standard_normal(Rng& rng, Eigen::Index n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = dist(rng);
  return v;
}

// Stream tags.
namespace stream {
inline constexpr std::uint64_t random_boundary = 0x52424e44;  // "RBND"
inline constexpr std::uint64_t logsine = 0x4c4f4753;          // "LOGS"
inline constexpr std::uint64_t inclusion = 0x494e434c;        // "INCL"
inline constexpr std::uint64_t kmeans = 0x4b4d4e53;           // "KMNS"
inline constexpr std::uint64_t subset = 0x53554253;           // "SUBS"
}  // namespace stream

}  // namespace cgms
