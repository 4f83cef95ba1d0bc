#pragma once

#include <stdexcept>
#include <string>

namespace mext {

// Error taxonomy. The CLI maps these onto its exit codes:
// ConfigError -> 2, DataError -> 3, CheckpointError -> 4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: violated preconditions, shape mismatches, out-of-range layer
// indices. These indicate a caller bug rather than bad external input.
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

struct ShapeError : ContractError {
    explicit ShapeError(const std::string& msg) : ContractError(msg) {}
};

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mext
