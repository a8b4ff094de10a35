#pragma once

#include <stdexcept>
#include <string>

namespace dsni {

// Error taxonomy. The CLI maps these onto its exit codes:
// usage -> 1, data/IO -> 2, numerical failure -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Value carries the wrong intensity domain (HU vs Norm255 vs mask).
struct DomainError : Error {
  using Error::Error;
};

// Tensor/volume shape or dimension mismatch.
struct ShapeError : Error {
  using Error::Error;
};

// Slice ranges of the phases do not overlap.
struct CoverageError : Error {
  using Error::Error;
};

// Invalid phantom or run specification.
struct SpecError : Error {
  using Error::Error;
};

struct EmptyMaskError : Error {
  using Error::Error;
};

// Singular or otherwise unusable affine transform.
struct TransformError : Error {
  using Error::Error;
};

// Non-finite objective, loss, or statistic.
struct NumericalError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace dsni
