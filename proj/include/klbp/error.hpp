#pragma once

#include <stdexcept>
#include <string>

namespace klbp {

//! Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

//! Mismatched dimensions, outcome sets, or joint shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

//! A value outside the admitted domain (nonpositive probability, log of a
//! nonpositive argument, division by zero, non-finite input).
class DomainError : public Error {
 public:
  using Error::Error;
};

//! Underflow or a degenerate normalization (zero mass, zero message).
class NumericError : public Error {
 public:
  using Error::Error;
};

//! A desk-scale budget (enumeration size, joint-table size) was exceeded.
class BudgetError : public Error {
 public:
  using Error::Error;
};

//! An input file could not be opened or read.
class FileError : public Error {
 public:
  using Error::Error;
};

//! Structural validation failed (non-decomposable circuit, cyclic DAG, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

//! Input JSON did not match the expected schema.
class SchemaError : public Error {
 public:
  using Error::Error;
};

//! An iterative procedure did not converge within its step budget.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace klbp
