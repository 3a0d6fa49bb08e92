#pragma once

// SPDX-License-Identifier: Apache-2.0

#include <cstdint>
#include <exception>
#include <optional>
#include <string>
#include <utility>

namespace endec {

enum class ErrorKind {
  InvalidInput,
  IoError,
  InvalidTrace,
  FormatError,
  TruncatedError,
  VersionError,
  LayerNotCaptured,
  DegenerateToken,
  InvalidConfig,
  InvalidSpec,
  InvalidExample,
};

const char* to_string(ErrorKind kind) noexcept;

/// Base of every error raised by the library. Carries an optional step
/// ordinal so per-step failures can be located in long traces.
class Error : public std::exception {
 public:
  Error(ErrorKind kind, std::string message, std::optional<std::uint64_t> step = std::nullopt);

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& message() const noexcept { return message_; }
  std::optional<std::uint64_t> step() const noexcept { return step_; }

  /// Attach a step ordinal (first attachment wins).
  void set_step(std::uint64_t step);
  /// Prefix the message with where the failure happened, e.g. a file or example id.
  void add_context(const std::string& context);

  const char* what() const noexcept override { return what_.c_str(); }

 private:
  void rebuild();

  ErrorKind kind_;
  std::string message_;
  std::optional<std::uint64_t> step_;
  std::string what_;
};

#define ENDEC_DEFINE_ERROR(Name)                                                         \
  class Name : public Error {                                                            \
   public:                                                                               \
    explicit Name(std::string message, std::optional<std::uint64_t> step = std::nullopt) \
        : Error(ErrorKind::Name, std::move(message), step) {}                            \
  };

ENDEC_DEFINE_ERROR(InvalidInput)
ENDEC_DEFINE_ERROR(IoError)
ENDEC_DEFINE_ERROR(InvalidTrace)
ENDEC_DEFINE_ERROR(FormatError)
ENDEC_DEFINE_ERROR(TruncatedError)
ENDEC_DEFINE_ERROR(VersionError)
ENDEC_DEFINE_ERROR(LayerNotCaptured)
ENDEC_DEFINE_ERROR(DegenerateToken)
ENDEC_DEFINE_ERROR(InvalidConfig)
ENDEC_DEFINE_ERROR(InvalidSpec)
ENDEC_DEFINE_ERROR(InvalidExample)

#undef ENDEC_DEFINE_ERROR

}  // namespace endec
