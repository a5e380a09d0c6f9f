#pragma once

#include <stdexcept>
#include <string>

namespace levda {

/// Bad input: configuration, shapes, out-of-domain coordinates.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation produced non-finite values or failed to converge.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, long index = -1)
      : std::runtime_error(what), index_(index) {}
  /// Step, epoch, or window index at which the failure happened (-1 if n/a).
  long index() const { return index_; }

 private:
  long index_;
};

}  // namespace levda
