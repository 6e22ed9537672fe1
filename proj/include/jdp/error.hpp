#pragma once

#include <stdexcept>
#include <string>

namespace jdp {

// Base of every error the toolkit throws. Callers that only need to report
// can catch this; the subclasses let the CLI and the tuner map failures to
// exit codes and skip policies.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& file, std::size_t row, std::size_t column, const std::string& what)
        : Error(file + ":" + std::to_string(row) + ":" + std::to_string(column) + ": " + what),
          row_(row), column_(column) {}
    std::size_t row() const noexcept { return row_; }
    std::size_t column() const noexcept { return column_; }

private:
    std::size_t row_;
    std::size_t column_;
};

class IntegrityError : public Error {
public:
    using Error::Error;
};

class EmptyResultError : public Error {
public:
    using Error::Error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

// A closed-form expression was evaluated outside its domain.
class DomainError : public Error {
public:
    using Error::Error;
};

class ConvergenceError : public Error {
public:
    using Error::Error;
};

// Raised by the joint-model fitter when the data cannot support a fit; the
// tuner counts these as infeasible personalized fits.
class InfeasibleFit : public Error {
public:
    using Error::Error;
};

class StratumError : public Error {
public:
    using Error::Error;
};

} // namespace jdp
