#pragma once

#include <stdexcept>
#include <string>

namespace ccad {

// Invalid argument values (bad bounds, empty batches, missing options).
struct ParamError : std::runtime_error {
    explicit ParamError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/matrix dimension disagreement.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Inconsistent module wiring (missing bank, fingerprint mismatch, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Schedule produced an unusable value (negative radicand etc).
struct ScheduleError : std::runtime_error {
    explicit ScheduleError(const std::string& msg) : std::runtime_error(msg) {}
};

// Metric is undefined for the given inputs (single-class labels).
struct MetricError : std::runtime_error {
    explicit MetricError(const std::string& msg) : std::runtime_error(msg) {}
};

// File decoding failures carry a kind so callers can distinguish a wrong
// magic from a version bump from a short read.
struct DecodeError : std::runtime_error {
    enum class Kind { BadMagic, BadVersion, Truncated, Corrupt };
    Kind kind;
    DecodeError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training diverged; message carries the diagnostic state dump.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ccad
