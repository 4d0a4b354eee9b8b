#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

namespace tsmon {

using Rng = std::mt19937_64;

/// Thrown when an argument violates an operation's precondition.
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Monte-Carlo calibration could not bracket or reach its target.
class CalibrationInfeasible : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file; the message carries the location.
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Inconsistent configuration (e.g. m mismatch between limits and data).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// SplitMix64 finalizer applied to (master, index). Gives each replication
/// its own substream so results do not depend on scheduling.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

inline Rng make_rng(std::uint64_t master, std::uint64_t index)
{
    return Rng(derive_seed(master, index));
}

/// Runs body(i) for i in [0, n) on up to `workers` threads. Work items are
/// claimed dynamically, so body must write only to slot i of its output.
/// workers == 0 means hardware concurrency.
void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& body);

} // namespace tsmon
