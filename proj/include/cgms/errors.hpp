#pragma once

#include <stdexcept>
#include <string>

namespace cgms {

/// Invalid grid sizes, counts, or option combinations.
class config_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A linear solve or decomposition failed (singular or indefinite system).
class numerical_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent ensemble / cache files.
class ingestion_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cgms
