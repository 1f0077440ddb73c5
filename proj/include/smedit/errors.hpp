#pragma once

#include <stdexcept>
#include <string>

namespace smedit {

// Error taxonomy shared by the whole library. The CLI maps kinds to
// distinct exit codes (see tools/).
enum class ErrorKind {
    shape,         // matrix dimension mismatch
    contract,      // API precondition violated by the caller
    numeric,       // non-finite values, failed factorization, bad measurement
    capacity,      // requested more than the configuration can host
    config,        // invalid configuration value or key
    io,            // file read/write failure
    precondition,  // experiment precondition not met (e.g. base model not converged)
    version        // incompatible schema version in a persisted artifact
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void throw_error(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline const char* error_kind_name(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::shape: return "shape";
        case ErrorKind::contract: return "contract";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::capacity: return "capacity";
        case ErrorKind::config: return "config";
        case ErrorKind::io: return "io";
        case ErrorKind::precondition: return "precondition";
        case ErrorKind::version: return "version";
    }
    return "unknown";
}

}  // namespace smedit
