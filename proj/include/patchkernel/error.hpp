#pragma once

#include <stdexcept>
#include <string>

namespace patchkernel {

// Every failure raised by the library derives from Error. kind() is the
// one-word class the CLI prints before exiting nonzero.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* kind() const noexcept { return "Error"; }
};

// Malformed or truncated files, bad magic numbers, version mismatches.
class FormatError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "FormatError"; }
};

// Missing files, unwritable paths, short writes.
class IoError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "IoError"; }
};

// Shape or length disagreement between operands.
class DimensionError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "DimensionError"; }
};

// Arguments outside an operation's domain.
class DomainError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "DomainError"; }
};

// Numerical routines that fail to converge or meet a precondition on values.
class NumericalError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "NumericalError"; }
};

class ConfigError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "ConfigError"; }
};

namespace detail {

template <class E = DomainError>
inline void require(bool ok, const std::string& what) {
    if (!ok) throw E(what);
}

}  // namespace detail
}  // namespace patchkernel
