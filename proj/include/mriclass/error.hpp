#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mriclass {

enum class Errc {
  // configuration
  ConfigError,
  KindMismatch,
  // data
  IoError,
  MissingPayload,
  GeometryMismatch,
  NonFiniteData,
  NotBinaryMask,
  EmptyMask,
  ZeroVariance,
  NonPositiveJacobian,
  ProbabilityOutOfRange,
  NonPositiveIcv,
  DuplicateSubjectId,
  UnknownDiagnosis,
  MalformedRow,
  ClassTooSmall,
  EmptyClass,
  SingleClass,
  DimensionMismatch,
  FeatureMismatch,
  ShapeMismatch,
  EmptyValidation,
  NoCorrectPositives,
  Empty,
  InvalidArgument,
  // numerical
  NonPositiveC,
  DegenerateGram,
  DegenerateBatch,
  TooFewIterations,
  MetricUndefined,
  NoDisagreement,
};

std::string_view errc_name(Errc code) noexcept;

/// Process exit code for a failure of this kind: 2 config, 3 data, 4 numerical.
int exit_code(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code), message_(what) {}

  Errc code() const noexcept { return code_; }
  /// The text without the code prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  Errc code_;
  std::string message_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace mriclass
