#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace qkscope {

enum class ErrorKind {
  MalformedHeader,
  UnsupportedDtype,
  OverlappingRanges,
  ShapeError,
  MissingTensor,
  ShapeMismatch,
  InvalidConfig,
  NonFiniteInput,
  ConvergenceFailure,
  NotOrthonormal,
  SingularMatrix,
  AllZeroSpectrum,
  NonFiniteActivation,
  IndexOutOfRange,
  GridMismatch,
  EmptyMask,
  EmptyCollection,
  TooFewImages,
  NoLabeledObjects,
  InvalidArgument,
  Io,
  VerificationFailed,
};

std::string_view error_kind_name(ErrorKind kind) noexcept;

// Every failure raised by the library carries a machine-readable category.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace qkscope
