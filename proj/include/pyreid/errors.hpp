#pragma once

#include <stdexcept>
#include <string>

namespace pyreid {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes do not satisfy an op's contract.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Invalid configuration: bad key, out-of-range value, incompatible geometry.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what, std::string key = {})
        : Error(what), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

// Malformed or incompatible file contents.
class FormatError : public Error {
public:
    using Error::Error;
};

// Misuse of the autograd graph (double backward, non-scalar loss, ...).
class GraphError : public Error {
public:
    using Error::Error;
};

// Training produced a non-finite loss or gradient.
class DivergenceError : public Error {
public:
    using Error::Error;
};

} // namespace pyreid
