#pragma once

#include <stdexcept>

namespace questmf {

// Thrown for invalid run configuration (CLI exit status 3).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown for malformed or inconsistent input data (CLI exit status 4).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace questmf
