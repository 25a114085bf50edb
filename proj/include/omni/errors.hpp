#pragma once

#include <stdexcept>
#include <string>

namespace omni {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DimensionErrorKind {
  DimMismatch,    // vector width disagrees with a rotary config
  InvalidDim,     // a configuration that cannot be built
  ShapeMismatch,  // tensors whose shapes do not line up
};

class DimensionError : public Error {
 public:
  DimensionError(DimensionErrorKind kind, const std::string& what)
      : Error(what), kind_(kind) {}

  DimensionErrorKind kind() const noexcept { return kind_; }

 private:
  DimensionErrorKind kind_;
};

}  // namespace omni
