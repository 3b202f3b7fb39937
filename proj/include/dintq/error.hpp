#pragma once

#include <stdexcept>
#include <string>

namespace dintq {

// Malformed inputs: bad files, shape mismatches, invalid configuration.
struct data_error : std::runtime_error {
    explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Failures of the math itself: non-finite operands, Cholesky breakdown,
// accumulator overflow.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dintq
