#pragma once

#include <stdexcept>
#include <string>

namespace fbqt {

/// Invalid user input: parameters, configuration keys, operator arguments.
class ValidationError : public std::invalid_argument {
public:
    explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

/// A violated internal precondition (e.g. shifting bins while the outgoing bin is occupied).
class ContractError : public std::logic_error {
public:
    explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

/// Failure while a simulation or an estimator is running.
class RuntimeError : public std::runtime_error {
public:
    explicit RuntimeError(const std::string& what) : std::runtime_error(what) {}
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace fbqt
