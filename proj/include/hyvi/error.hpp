#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hyvi {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform for the named operation.
class ShapeError : public Error {
 public:
  ShapeError(std::string op, std::string lhs, std::string rhs)
      : Error(op + ": shape mismatch " + lhs + " vs " + rhs),
        op_(std::move(op)),
        lhs_(std::move(lhs)),
        rhs_(std::move(rhs)) {}

  const std::string& op() const noexcept { return op_; }
  const std::string& lhs_shape() const noexcept { return lhs_; }
  const std::string& rhs_shape() const noexcept { return rhs_; }

 private:
  std::string op_;
  std::string lhs_;
  std::string rhs_;
};

/// A value lies outside the domain of a function (log of a non-positive number, ...).
class DomainError : public Error {
 public:
  DomainError(std::string op, double offending)
      : Error(op + ": argument outside domain (" + std::to_string(offending) + ")"),
        op_(std::move(op)),
        value_(offending) {}

  const std::string& op() const noexcept { return op_; }
  double value() const noexcept { return value_; }

 private:
  std::string op_;
  double value_;
};

/// A documented precondition does not hold.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. Row and column are zero-based; npos when not applicable.
class ParseError : public Error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  ParseError(const std::string& what, std::size_t row = npos, std::size_t col = npos)
      : Error(format(what, row, col)), row_(row), col_(col) {}

  std::size_t row() const noexcept { return row_; }
  std::size_t col() const noexcept { return col_; }

 private:
  static std::string format(const std::string& what, std::size_t row, std::size_t col) {
    std::string msg = what;
    if (row != npos) msg += " (row " + std::to_string(row);
    if (col != npos) msg += (row != npos ? ", column " : " (column ") + std::to_string(col);
    if (row != npos || col != npos) msg += ")";
    return msg;
  }

  std::size_t row_;
  std::size_t col_;
};

}  // namespace hyvi
