#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace golo {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/dimension violations (mismatched matmul operands, bad axes, ...).
struct ShapeError : Error {
    using Error::Error;
};

// Violated call contracts (non-scalar backward, NaN cost matrix, ...).
struct ContractError : Error {
    using Error::Error;
};

// Config file / config value problems. CLI maps this to exit code 2.
struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Non-finite values detected where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

// Synthetic scene placement failed after bounded retries.
struct GenerationError : Error {
    using Error::Error;
};

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ")";
    return os.str();
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// Debug-mode switch: when true, every tensor op validates that its output is
// finite and throws NumericError otherwise.
inline bool& debug_checks() {
    static bool flag = false;
    return flag;
}

}  // namespace golo
