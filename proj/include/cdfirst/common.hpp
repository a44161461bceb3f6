#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace cdfirst {

// Error taxonomy maps onto process exit codes: config/usage -> 1,
// data -> 2, numerical abort -> 3.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shortest exact round-trip formatting; all logs, reports and checkpoints
// go through this so identical runs produce identical bytes.
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    // normalize negative zero so -0 and 0 print identically
    if (buf[0] == '-' && v == 0.0) return fmt_double(0.0);
    return std::string(buf);
}

inline std::string fmt_int(long long v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%lld", v);
    return std::string(buf);
}

inline bool finite(double v) { return std::isfinite(v); }

}  // namespace cdfirst
