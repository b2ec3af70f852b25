#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace schnet {

// Shape/dimension mismatches. Messages name the offending shapes.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed on-disk data (PNM, SCHT). Carries the byte offset of the failure.
struct FormatError : std::runtime_error {
    std::size_t offset;
    FormatError(const std::string& msg, std::size_t off)
        : std::runtime_error(msg + " (byte offset " + std::to_string(off) + ")"), offset(off) {}
};

// Semantically invalid data, e.g. a mask id outside [0,K).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violated callback/API contract, e.g. a hook changing a tensor shape.
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace schnet
