#pragma once

#include <stdexcept>
#include <string>

namespace fedinit {

/// Invalid configuration or inconsistent dimensions.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A computation produced a non-finite value.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// File reading/writing failures, with the offending path in the message.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A theory-mode routine was asked to run on a trace that violates its assumptions.
class AssumptionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) throw ConfigError(message);
}

} // namespace fedinit
