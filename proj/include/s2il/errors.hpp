#pragma once

#include <stdexcept>
#include <string>

namespace s2il {

// Precondition or API-contract violation by the caller.
struct ContractError : std::invalid_argument {
    explicit ContractError(const std::string& what) : std::invalid_argument(what) {}
};

// Shape/dimension disagreement between operands.
struct DimensionError : ContractError {
    explicit DimensionError(const std::string& what) : ContractError(what) {}
};

// An operation would have produced NaN/Inf (domain error, guard tripped).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Object used in an invalid lifecycle state (e.g. a consumed tape).
struct StateError : std::logic_error {
    explicit StateError(const std::string& what) : std::logic_error(what) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace s2il
