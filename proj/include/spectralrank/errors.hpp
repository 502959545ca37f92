#pragma once

#include <stdexcept>
#include <string>

namespace spectralrank {

/// Base class for every error the library raises on purpose. Anything else
/// escaping a call is a bug, not a contract violation.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define SPECTRALRANK_DEFINE_ERROR(Name)                        \
  class Name : public Error {                                  \
   public:                                                     \
    explicit Name(const std::string& msg) : Error(msg) {}      \
  }

SPECTRALRANK_DEFINE_ERROR(ZeroMatrixError);
SPECTRALRANK_DEFINE_ERROR(ZeroVectorError);
SPECTRALRANK_DEFINE_ERROR(NonFiniteError);
SPECTRALRANK_DEFINE_ERROR(DivergedError);
SPECTRALRANK_DEFINE_ERROR(ZeroMeanError);
SPECTRALRANK_DEFINE_ERROR(EmptySequenceError);
SPECTRALRANK_DEFINE_ERROR(DomainError);
SPECTRALRANK_DEFINE_ERROR(ZeroRowError);
SPECTRALRANK_DEFINE_ERROR(ZeroColumnError);
SPECTRALRANK_DEFINE_ERROR(InvalidSpecError);
SPECTRALRANK_DEFINE_ERROR(ShapeMismatchError);
SPECTRALRANK_DEFINE_ERROR(NonPositiveConstantError);
SPECTRALRANK_DEFINE_ERROR(ZeroGradientError);
SPECTRALRANK_DEFINE_ERROR(InvalidSchemeError);
SPECTRALRANK_DEFINE_ERROR(CenteredActivationError);
SPECTRALRANK_DEFINE_ERROR(ConfigError);
SPECTRALRANK_DEFINE_ERROR(IOError);

#undef SPECTRALRANK_DEFINE_ERROR

}  // namespace spectralrank
