#include "qkscope/error.hpp"

namespace qkscope {

std::string_view error_kind_name(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::MalformedHeader: return "MalformedHeader";
    case ErrorKind::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorKind::OverlappingRanges: return "OverlappingRanges";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::MissingTensor: return "MissingTensor";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::NonFiniteInput: return "NonFiniteInput";
    case ErrorKind::ConvergenceFailure: return "ConvergenceFailure";
    case ErrorKind::NotOrthonormal: return "NotOrthonormal";
    case ErrorKind::SingularMatrix: return "SingularMatrix";
    case ErrorKind::AllZeroSpectrum: return "AllZeroSpectrum";
    case ErrorKind::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::GridMismatch: return "GridMismatch";
    case ErrorKind::EmptyMask: return "EmptyMask";
    case ErrorKind::EmptyCollection: return "EmptyCollection";
    case ErrorKind::TooFewImages: return "TooFewImages";
    case ErrorKind::NoLabeledObjects: return "NoLabeledObjects";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::Io: return "Io";
    case ErrorKind::VerificationFailed: return "VerificationFailed";
  }
  return "Unknown";
}

}  // namespace qkscope
