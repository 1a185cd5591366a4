#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace slimrec {

// Tensor element type. Tests and default builds use doubles so that
// finite-difference tolerances are meaningful; -DSLIMREC_FLOAT32 switches
// to single precision for fast builds.
#ifdef SLIMREC_FLOAT32
using real = float;
#else
using real = double;
#endif

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error("parse error: " + msg) {}
};

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error("usage error: " + msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

}  // namespace slimrec
