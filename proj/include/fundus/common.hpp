#pragma once

#include <stdexcept>
#include <string>

namespace fundus {

// Invalid argument values (bad ranges, out-of-bounds centers, ...).
struct ParamError : std::invalid_argument {
  explicit ParamError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Broken internal contract between modules (fingerprint mismatch, missing
// stage outputs, shape drift). Indicates a caller bug, not bad user input.
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Configuration that cannot be executed (missing manifests, no masks, ...).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// File system / codec failures, annotated with the offending path.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure during training (NaN loss etc).
struct TrainingError : std::runtime_error {
  explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fundus
