#pragma once

#include <stdexcept>
#include <string>

namespace ddn {

/// Malformed or truncated file content, bad magic, shape mismatch on disk.
class format_error : public std::runtime_error {
public:
    explicit format_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Filesystem-level failure (open, read, write).
class io_error : public std::runtime_error {
public:
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// NaN/Inf detected where finite values are required.
class numeric_error : public std::runtime_error {
public:
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid configuration or argument combination.
class config_error : public std::invalid_argument {
public:
    explicit config_error(const std::string& msg) : std::invalid_argument(msg) {}
};

} // namespace ddn
