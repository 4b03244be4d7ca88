#pragma once

#include <stdexcept>
#include <string>

namespace kvc {

// Every failure raised by the library derives from Error so callers (the CLI
// in particular) can map families of failures onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class InvalidMaskError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class StaleIndexError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class PositionOverflowError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class SchemaError : public Error {
public:
    using Error::Error;
};

class UnsupportedMethodError : public Error {
public:
    using Error::Error;
};

class InfeasibleBudgetError : public Error {
public:
    using Error::Error;
};

// NaN or Inf produced by a numeric op.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace kvc
