// SPDX-License-Identifier: Apache-2.0

#include "endec/errors.hpp"

#include <utility>

namespace endec {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::InvalidInput: return "InvalidInput";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::InvalidTrace: return "InvalidTrace";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::TruncatedError: return "TruncatedError";
    case ErrorKind::VersionError: return "VersionError";
    case ErrorKind::LayerNotCaptured: return "LayerNotCaptured";
    case ErrorKind::DegenerateToken: return "DegenerateToken";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::InvalidSpec: return "InvalidSpec";
    case ErrorKind::InvalidExample: return "InvalidExample";
  }
  return "Unknown";
}

Error::Error(ErrorKind kind, std::string message, std::optional<std::uint64_t> step)
    : kind_(kind), message_(std::move(message)), step_(step) {
  rebuild();
}

void Error::set_step(std::uint64_t step) {
  if (step_) return;
  step_ = step;
  rebuild();
}

void Error::add_context(const std::string& context) {
  message_ = context + ": " + message_;
  rebuild();
}

void Error::rebuild() {
  what_ = to_string(kind_);
  if (step_) what_ += " at step " + std::to_string(*step_);
  what_ += ": ";
  what_ += message_;
}

}  // namespace endec
