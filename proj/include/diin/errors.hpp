#pragma once

#include <stdexcept>
#include <string>

namespace diin {

// Error taxonomy mirrors the CLI exit-code contract:
//   1 check failure, 2 config error, 3 data error, 4 checkpoint error.
// ShapeError and NumericError indicate misuse of the tensor engine and are
// reported as check failures when they escape to the CLI.

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace diin
