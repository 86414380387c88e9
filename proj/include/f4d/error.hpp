#pragma once

#include <stdexcept>
#include <string>

namespace f4d {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid geometry or geometric query (empty mesh, bad voxel size, empty point set).
class GeometryError : public Error {
public:
    using Error::Error;
};

/// Non-finite values, zero-norm quaternions, failed searches.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Malformed binary or text file.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Bad run configuration or missing input file.
class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace f4d
