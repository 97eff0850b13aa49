#pragma once

#include <stdexcept>
#include <string>

namespace pisa {

// Failure category, used by the CLI to pick the process exit code
// (validation -> 2, invariant -> 1, i/o -> 3).
enum class ErrorKind { Validation, Invariant, Io };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string msg)
        : std::runtime_error(std::move(msg)), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct InvalidDimension : Error {
    explicit InvalidDimension(const std::string& m)
        : Error(ErrorKind::Validation, "InvalidDimension: " + m) {}

protected:
    InvalidDimension(ErrorKind k, const std::string& m) : Error(k, m) {}
};

// InvalidDimension-class error for zero/negative scale parameters.
struct DegenerateScale : InvalidDimension {
    explicit DegenerateScale(const std::string& m)
        : InvalidDimension(ErrorKind::Validation, "DegenerateScale: " + m) {}
};

struct BlockDivisibility : Error {
    explicit BlockDivisibility(const std::string& m)
        : Error(ErrorKind::Validation, "BlockDivisibility: " + m) {}
};

struct InvalidSparsity : Error {
    explicit InvalidSparsity(const std::string& m)
        : Error(ErrorKind::Validation, "InvalidSparsity: " + m) {}
};

struct InvalidEpsilon : Error {
    explicit InvalidEpsilon(const std::string& m)
        : Error(ErrorKind::Validation, "InvalidEpsilon: " + m) {}
};

struct EmptySelection : Error {
    explicit EmptySelection(const std::string& m)
        : Error(ErrorKind::Validation, "EmptySelection: " + m) {}
};

struct ZeroRow : Error {
    explicit ZeroRow(const std::string& m)
        : Error(ErrorKind::Validation, "ZeroRow: " + m) {}
};

struct BadMagic : Error {
    explicit BadMagic(const std::string& m)
        : Error(ErrorKind::Io, "BadMagic: " + m) {}
};

struct UnsupportedVersion : Error {
    explicit UnsupportedVersion(const std::string& m)
        : Error(ErrorKind::Io, "UnsupportedVersion: " + m) {}
};

struct UnsupportedDtype : Error {
    explicit UnsupportedDtype(const std::string& m)
        : Error(ErrorKind::Io, "UnsupportedDtype: " + m) {}
};

struct MalformedFile : Error {
    explicit MalformedFile(const std::string& m)
        : Error(ErrorKind::Io, "MalformedFile: " + m) {}
};

struct NonFiniteValue : Error {
    explicit NonFiniteValue(const std::string& m)
        : Error(ErrorKind::Io, "NonFiniteValue: " + m) {}
};

struct IoError : Error {
    explicit IoError(const std::string& m)
        : Error(ErrorKind::Io, "IoError: " + m) {}
};

struct NumericalOverflow : Error {
    explicit NumericalOverflow(const std::string& m)
        : Error(ErrorKind::Invariant, "NumericalOverflow: " + m) {}
};

}  // namespace pisa
