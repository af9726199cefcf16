#pragma once

#include <stdexcept>
#include <string>

namespace stm {

/// Base class for every error raised by the mapping engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define STM_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                    \
   public:                                                       \
    explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
  }

STM_DEFINE_ERROR(LabelMismatch);
STM_DEFINE_ERROR(SingularMarginalization);
STM_DEFINE_ERROR(NotADistribution);
STM_DEFINE_ERROR(NotPSD);
STM_DEFINE_ERROR(DegenerateLandmarks);
STM_DEFINE_ERROR(DepthTooLarge);
STM_DEFINE_ERROR(OutsideSubmap);
STM_DEFINE_ERROR(InvalidVariance);
STM_DEFINE_ERROR(Unobserved);
STM_DEFINE_ERROR(EmptyRegion);
STM_DEFINE_ERROR(AdaptationFailed);
STM_DEFINE_ERROR(ConfigError);
STM_DEFINE_ERROR(ParseError);

#undef STM_DEFINE_ERROR

}  // namespace stm
