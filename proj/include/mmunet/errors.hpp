#pragma once

#include <stdexcept>
#include <string>

namespace mmunet {

// Error taxonomy shared by all modules. Each maps to a distinct CLI exit code.

// Operand shapes do not line up (matmul inner extents, affine lengths, ...).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A structural constraint is violated (divisibility, group boundaries,
// invalid model spec, bad hyperparameter).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// The data itself is invalid (class id out of range).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// A serialized file does not parse (bad magic, truncation, header).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// The API is being used wrongly (backward on a non-scalar, empty dataset).
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// File could not be opened or read/written.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mmunet
