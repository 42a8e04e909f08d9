#pragma once

#include <stdexcept>
#include <string>

namespace dpl {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad or inconsistent configuration (maps to exit code 1 in the CLI).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// Malformed input record. Carries the 1-based line number when known.
class ParseError : public Error {
public:
    ParseError(const std::string& msg, long line = 0)
        : Error(line > 0 ? "line " + std::to_string(line) + ": " + msg : msg),
          line_(line) {}
    long line() const { return line_; }

private:
    long line_ = 0;
};

/// Remote endpoint failure after the retry budget is spent, or a
/// non-retryable status. The message carries the endpoint diagnostics.
class BackendError : public Error {
public:
    explicit BackendError(const std::string& msg, int status = 0)
        : Error(msg), status_(status) {}
    int status() const { return status_; }

private:
    int status_ = 0;
};

/// Failure while assembling or executing one sample's method pipeline.
class PipelineError : public Error {
public:
    explicit PipelineError(const std::string& msg, int element_index = -1)
        : Error(msg), element_index_(element_index) {}
    /// Index of the key-history element that failed, or -1.
    int element_index() const { return element_index_; }

private:
    int element_index_ = -1;
};

}  // namespace dpl
