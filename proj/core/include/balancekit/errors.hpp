#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace balancekit {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input rows, duplicate ids, unreadable files.
class IngestError : public Error {
public:
    using Error::Error;
};

/// Structurally valid input that violates a domain invariant
/// (empty group, bad moment index, bad configuration value).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// A shard map function threw. Carries the failing shard index.
class ReductionError : public Error {
public:
    ReductionError(std::size_t shard, const std::string& what)
        : Error("reduction failed on shard " + std::to_string(shard) + ": " + what),
          shard_(shard) {}

    std::size_t shard() const noexcept { return shard_; }

private:
    std::size_t shard_;
};

/// Solver divergence or a model fit that did not converge.
class SolverError : public Error {
public:
    using Error::Error;
};

}  // namespace balancekit
