#include "mte/errors.hpp"

namespace mte {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Usage: return "usage";
        case ErrorKind::Dimension: return "dimension";
        case ErrorKind::Parameter: return "parameter";
        case ErrorKind::Configuration: return "configuration";
        case ErrorKind::Structural: return "structural";
        case ErrorKind::Format: return "format";
        case ErrorKind::Data: return "data";
        case ErrorKind::Numeric: return "numeric";
    }
    return "unknown";
}

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Format:
        case ErrorKind::Data: return 3;
        case ErrorKind::Numeric: return 4;
        default: return 2;
    }
}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace mte
