#pragma once

#include <stdexcept>
#include <string>

namespace hesskit {

/// A computation produced a NaN or Inf from finite inputs.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// A dense Hessian was requested above the configured dimension cap.
class CapExceededError : public std::runtime_error {
 public:
  explicit CapExceededError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace hesskit
