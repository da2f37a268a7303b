#pragma once

#include <stdexcept>
#include <string>

namespace semcom {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration value.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Tensor or image shape does not satisfy an operation's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Input is numerically degenerate (e.g. a zero-norm vector that cannot be normalized).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

/// Missing or unreadable file, or a file whose layout does not match expectations.
class LoadError : public Error {
public:
    using Error::Error;
};

/// Stored content hash does not match the file contents.
class IntegrityError : public LoadError {
public:
    using LoadError::LoadError;
};

/// A checkpoint that parses correctly but cannot be used with the requested configuration.
class IncompatibleError : public Error {
public:
    using Error::Error;
};

/// A required earlier artifact (e.g. a stage-1 checkpoint) does not exist.
class MissingPrerequisiteError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite or exploding loss.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, std::string dump_path)
        : Error(what), dump_path_(std::move(dump_path)) {}

    const std::string& dump_path() const noexcept { return dump_path_; }

private:
    std::string dump_path_;
};

}  // namespace semcom
