#pragma once

#include <stdexcept>
#include <string>

namespace drpoint {

/// Precondition or shape violation on an otherwise well-formed call.
class DomainError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or unsupported file contents.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class VersionError : public FormatError {
public:
    VersionError(const std::string& what, unsigned found, unsigned expected)
        : FormatError(what + ": version " + std::to_string(found) + ", expected " +
                      std::to_string(expected)),
          found_(found), expected_(expected) {}
    unsigned found() const noexcept { return found_; }
    unsigned expected() const noexcept { return expected_; }

private:
    unsigned found_;
    unsigned expected_;
};

/// Text parse failure carrying the 1-based line number.
class ParseError : public FormatError {
public:
    ParseError(const std::string& source, std::size_t line, const std::string& detail)
        : FormatError(source + ":" + std::to_string(line) + ": " + detail), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// A loss term evaluated to NaN or infinity.
class NonFiniteError : public std::runtime_error {
public:
    explicit NonFiniteError(std::string component)
        : std::runtime_error("non-finite loss component: " + component),
          component_(std::move(component)) {}
    const std::string& component() const noexcept { return component_; }

private:
    std::string component_;
};

}  // namespace drpoint
