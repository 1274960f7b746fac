#include "mriclass/error.hpp"

namespace mriclass {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::ConfigError: return "ConfigError";
    case Errc::KindMismatch: return "KindMismatch";
    case Errc::IoError: return "IoError";
    case Errc::MissingPayload: return "MissingPayload";
    case Errc::GeometryMismatch: return "GeometryMismatch";
    case Errc::NonFiniteData: return "NonFiniteData";
    case Errc::NotBinaryMask: return "NotBinaryMask";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::ZeroVariance: return "ZeroVariance";
    case Errc::NonPositiveJacobian: return "NonPositiveJacobian";
    case Errc::ProbabilityOutOfRange: return "ProbabilityOutOfRange";
    case Errc::NonPositiveIcv: return "NonPositiveIcv";
    case Errc::DuplicateSubjectId: return "DuplicateSubjectId";
    case Errc::UnknownDiagnosis: return "UnknownDiagnosis";
    case Errc::MalformedRow: return "MalformedRow";
    case Errc::ClassTooSmall: return "ClassTooSmall";
    case Errc::EmptyClass: return "EmptyClass";
    case Errc::SingleClass: return "SingleClass";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::FeatureMismatch: return "FeatureMismatch";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::EmptyValidation: return "EmptyValidation";
    case Errc::NoCorrectPositives: return "NoCorrectPositives";
    case Errc::Empty: return "Empty";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::NonPositiveC: return "NonPositiveC";
    case Errc::DegenerateGram: return "DegenerateGram";
    case Errc::DegenerateBatch: return "DegenerateBatch";
    case Errc::TooFewIterations: return "TooFewIterations";
    case Errc::MetricUndefined: return "MetricUndefined";
    case Errc::NoDisagreement: return "NoDisagreement";
  }
  return "Unknown";
}

int exit_code(Errc code) noexcept {
  switch (code) {
    case Errc::ConfigError:
    case Errc::KindMismatch:
      return 2;
    case Errc::NonPositiveC:
    case Errc::DegenerateGram:
    case Errc::DegenerateBatch:
    case Errc::TooFewIterations:
    case Errc::MetricUndefined:
    case Errc::NoDisagreement:
      return 4;
    default:
      return 3;
  }
}

}  // namespace mriclass
