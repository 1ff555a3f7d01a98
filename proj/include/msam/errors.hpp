#pragma once
#include <stdexcept>
#include <string>

namespace msam {

// Exit category codes surfaced by the CLI, one per error class.
enum class ErrorCode : int {
  Generic = 1,
  Usage = 2,
  Data = 3,
  Format = 4,
  Shape = 5,
  Divergence = 6,
  Config = 7,
  Prompt = 8,
};

class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }
  int exit_code() const { return static_cast<int>(code_); }

private:
  ErrorCode code_;
};

#define MSAM_DEFINE_ERROR(NAME, CODE)                                        \
  class NAME : public Error {                                                \
  public:                                                                    \
    explicit NAME(const std::string& m) : Error(ErrorCode::CODE, m) {}       \
  }

MSAM_DEFINE_ERROR(MissingFileError, Data);
MSAM_DEFINE_ERROR(UnwritablePathError, Data);
MSAM_DEFINE_ERROR(DataError, Data);
MSAM_DEFINE_ERROR(CorruptHeaderError, Format);
MSAM_DEFINE_ERROR(ChecksumMismatchError, Format);
MSAM_DEFINE_ERROR(NonFiniteDataError, Format);
MSAM_DEFINE_ERROR(ShapeMismatchError, Shape);
MSAM_DEFINE_ERROR(ConfigOutOfRangeError, Config);
MSAM_DEFINE_ERROR(UnknownTargetError, Config);
MSAM_DEFINE_ERROR(EmptyPromptError, Prompt);
MSAM_DEFINE_ERROR(OutOfBoundsPointError, Prompt);
MSAM_DEFINE_ERROR(EmptyForegroundError, Prompt);
MSAM_DEFINE_ERROR(InvalidProbabilityError, Shape);
MSAM_DEFINE_ERROR(NonFiniteActivationError, Divergence);
MSAM_DEFINE_ERROR(DivergenceError, Divergence);

#undef MSAM_DEFINE_ERROR

}  // namespace msam
