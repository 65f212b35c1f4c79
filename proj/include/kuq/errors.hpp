#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace kuq {

/// Base type for all errors thrown by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Incompatible array extents. Messages name the offending operation or node.
struct ShapeError : Error {
    using Error::Error;
};

/// NaN or Inf encountered where checked arithmetic was requested.
struct NumericError : Error {
    using Error::Error;
};

/// An API precondition was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

/// Invalid user-facing configuration (CLI flags, config files, system specs).
struct ConfigError : Error {
    using Error::Error;
};

/// Malformed file content. Carries the byte offset where parsing stopped.
struct ParseError : Error {
    std::size_t byte_offset;
    ParseError(const std::string& msg, std::size_t offset)
        : Error(msg + " (byte " + std::to_string(offset) + ")"), byte_offset(offset) {}
};

/// Filesystem failure (open/read/write).
struct IoError : Error {
    using Error::Error;
};

/// Process exit codes used by the CLI.
enum ExitCode : int {
    exit_ok = 0,
    exit_usage = 2,
    exit_data = 3,
    exit_numeric = 4,
};

}  // namespace kuq
