#pragma once

#include <stdexcept>
#include <string>

namespace ssf {

// Dimension mismatches between tensors (shapes reported in the message).
class ShapeError : public std::invalid_argument {
public:
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Violated API precondition (non-scalar loss, non-deterministic callback, ...).
class ContractError : public std::logic_error {
public:
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Invalid user-supplied configuration value.
class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Dataset cannot satisfy a request (missing split, too few classes/images).
class DatasetError : public std::runtime_error {
public:
    explicit DatasetError(const std::string& msg) : std::runtime_error(msg) {}
};

// File system / serialization failures.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Optimization blew up (non-finite loss, ...).
class TrainError : public std::runtime_error {
public:
    explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ssf
