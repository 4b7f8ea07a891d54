#pragma once

#include <stdexcept>
#include <string>

namespace mte {

enum class ErrorKind {
    Usage,          // bad arguments, invalid selector, unknown flag
    Dimension,      // shape mismatch between operands
    Parameter,      // out-of-range scalar parameter
    Configuration,  // inconsistent model/train configuration
    Structural,     // parameter trees that do not line up
    Format,         // malformed file on disk
    Data,           // dataset problems (undersized image, empty set)
    Numeric,        // non-finite values, zero norms
};

const char* to_string(ErrorKind kind);

// Process exit code used by the CLI for each kind: 2 usage, 3 data/format, 4 numeric.
int exit_code(ErrorKind kind);

class Error : public std::runtime_error {
   public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

   private:
    ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) fail(kind, message);
}

}  // namespace mte
