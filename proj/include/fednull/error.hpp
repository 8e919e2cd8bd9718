#pragma once

#include <stdexcept>
#include <string>

namespace fednull {

enum class ErrorKind {
    InvalidInput,
    NumericalFailure,
    IoError,
    ConfigError,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void throw_invalid(const std::string& what) {
    throw Error(ErrorKind::InvalidInput, what);
}

[[noreturn]] inline void throw_numerical(const std::string& what) {
    throw Error(ErrorKind::NumericalFailure, what);
}

[[noreturn]] inline void throw_io(const std::string& what) {
    throw Error(ErrorKind::IoError, what);
}

[[noreturn]] inline void throw_config(const std::string& what) {
    throw Error(ErrorKind::ConfigError, what);
}

}  // namespace fednull
