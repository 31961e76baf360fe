#pragma once

#include <stdexcept>
#include <string>

namespace undercali {

// Malformed input text (JSONL line, config value).
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Well-formed input whose shapes or invariants do not hold.
class StructuralError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Inconsistent configuration (grid window, scenario, run config).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes disagree.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Numerical failure: non-finite gradients or losses.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// API misuse, e.g. backward without a forward cache.
class UsageError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

}  // namespace undercali
