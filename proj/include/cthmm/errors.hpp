#pragma once

#include <stdexcept>
#include <string>

namespace cthmm {

// Base of every error the library throws. Each subclass maps onto one CLI
// exit code (see tools/cthmm.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid argument or inconsistent dimensions.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Numerical result outside the representable domain (e.g. hazard overflow).
class DomainError : public Error {
 public:
  using Error::Error;
};

// ODE integration failed (step budget exhausted, step underflow).
class SolverError : public Error {
 public:
  using Error::Error;
};

// Model cannot be estimated from the given data (empty class, refused
// enumeration, unavailable standard errors).
class EstimationError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or input file content.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Filesystem failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace cthmm
