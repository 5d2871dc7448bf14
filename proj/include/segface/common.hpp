#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace segface {

// Error taxonomy maps to CLI exit codes: ValidationError and children -> 1,
// NumericError and anything else -> 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class ShapeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class IoError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class NumericError : public Error {
public:
    using Error::Error;
};

template <typename... Args>
std::string cat(Args&&... args) {
    std::ostringstream out;
    (out << ... << args);
    return out.str();
}

}  // namespace segface
