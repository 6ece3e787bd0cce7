#pragma once

#include <stdexcept>
#include <string>

namespace templaudit {

/// Base of every error the library raises. Callers that only need to report
/// a failure can catch this one type.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed input file. The message carries path and line number when known.
class ParseError : public Error {
public:
    using Error::Error;
};

class SplitError : public Error {
public:
    using Error::Error;
};

/// A class with no samples where the computation needs at least one.
class DegenerateError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class RangeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class BatchError : public Error {
public:
    using Error::Error;
};

/// Backward called with a cache from a different parameter version.
class ConsistencyError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

/// Model file problems: bad magic, version, truncation, checksum.
class FormatError : public Error {
public:
    using Error::Error;
};

}  // namespace templaudit
