#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace aspun {

/// Incompatible extents between operands.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or truncated binary file. Carries the byte offset where reading failed.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// NaN/Inf or divergence. `iteration` is the solver iteration or training step, -1 if unknown.
class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, long iteration)
        : std::runtime_error(what + (iteration >= 0 ? " (iteration " + std::to_string(iteration) + ")" : std::string())),
          iteration_(iteration) {}

    long iteration() const noexcept { return iteration_; }

private:
    long iteration_;
};

/// Invalid configuration value or key. `line` is 0 when not tied to a config file.
class ConfigError : public std::invalid_argument {
public:
    ConfigError(const std::string& what, std::size_t line = 0)
        : std::invalid_argument(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
          line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace aspun
