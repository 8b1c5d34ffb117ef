#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace jointpo {

/// Base of every error the library raises. The CLI maps each subclass to
/// one exit code, so new error kinds must derive from one of the three
/// families below.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* kind() const noexcept { return "error"; }
};

/// Malformed or structurally invalid input (exit code 2).
class ValidationError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "validation"; }
};

class ParseError : public ValidationError {
public:
    ParseError(std::size_t line, const std::string& what)
        : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }
    const char* kind() const noexcept override { return "parse"; }

private:
    std::size_t line_;
};

class SchemaError : public ValidationError {
public:
    using ValidationError::ValidationError;
    const char* kind() const noexcept override { return "schema"; }
};

/// An arm with no units in a trial that needs both arms; the conditional
/// frequencies are undefined.
class EstimationError : public ValidationError {
public:
    using ValidationError::ValidationError;
    const char* kind() const noexcept override { return "estimation"; }
};

/// Rank or trial-count requirements for point identification fail (exit code 3).
class IdentificationError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "identification"; }
};

/// Resampling or test machinery could not produce a result (exit code 4).
class InferenceError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "inference"; }
};

}  // namespace jointpo
