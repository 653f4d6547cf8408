#pragma once

#include <stdexcept>
#include <string>

namespace vitprune {

// Error taxonomy. The CLI maps kinds to exit codes: contract-style failures
// (bad arguments, violated preconditions, numeric blowups) exit 1, I/O and
// file-format failures exit 2, command-line usage errors exit 64.
enum class ErrorKind {
    contract,   // caller violated a documented precondition
    numeric,    // NaN/Inf or other numeric failure during computation
    config,     // invalid or inconsistent configuration
    gate,       // gate set incompatible with the model
    data,       // bad dataset content (labels, shapes)
    degenerate, // analysis input with no usable signal (zero variance/norm)
    format,     // malformed file contents
    io,         // filesystem / OS level failure
    usage,      // bad command line
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) fail(kind, msg);
}

} // namespace vitprune
