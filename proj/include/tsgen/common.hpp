#pragma once

#include <stdexcept>
#include <string>

namespace tsgen {

// Error taxonomy maps onto the CLI exit codes: config/validation -> 2,
// I/O -> 3, numerical divergence -> 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : ConfigError {
  explicit ShapeError(const std::string& msg) : ConfigError(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace tsgen
