#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file numkernels.hpp
 * @brief Numerically stable probability kernels.
 *
 * Everything here works in double precision and natural log (nats). Logit
 * inputs may be float (trace payloads) or double. All functions are pure.
 *
 * Conventions:
 * - 0 * log 0 is taken as 0 through an explicit branch.
 * - KL smoothing: where q[i] == 0 but p[i] > 0, q[i] is clamped to
 *   kKlFloor so diagnostics never report infinity.
 */

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace endec::num {

inline constexpr double kSumTolerance = 1e-6;
inline constexpr double kKlFloor = 1e-12;

/// Non-negative vector summing to 1 within kSumTolerance.
class ProbVector {
 public:
  /// Validates the invariants; throws InvalidInput on violation.
  explicit ProbVector(std::vector<double> values);

  /// Adopts values already normalized by construction (kernel outputs).
  static ProbVector unchecked(std::vector<double> values) noexcept;

  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const noexcept { return values_[i]; }
  std::span<const double> values() const noexcept { return values_; }
  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  friend bool operator==(const ProbVector&, const ProbVector&) = default;

 private:
  struct Adopt {};
  ProbVector(Adopt, std::vector<double> values) noexcept : values_(std::move(values)) {}

  std::vector<double> values_;
};

/// Throws InvalidInput on empty input or any non-finite entry.
void check_logits(std::span<const float> logits);
void check_logits(std::span<const double> logits);

/// log(sum(exp(x))) with max subtraction. Inputs must be finite and non-empty.
double log_sum_exp(std::span<const float> logits);
double log_sum_exp(std::span<const double> logits);

ProbVector softmax(std::span<const float> logits);
ProbVector softmax(std::span<const double> logits);

std::vector<double> log_softmax(std::span<const float> logits);
std::vector<double> log_softmax(std::span<const double> logits);

/// Shannon entropy -sum p log p in nats.
double entropy(const ProbVector& p) noexcept;
double entropy(std::span<const double> p) noexcept;

/// KL(p || q). Length mismatch throws InvalidInput.
double kl_divergence(const ProbVector& p, const ProbVector& q);
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// Jensen-Shannon divergence, 0.5 KL(p||m) + 0.5 KL(q||m) with m the midpoint.
/// Bounded by log 2 and symmetric.
double js_divergence(const ProbVector& p, const ProbVector& q);
double js_divergence(std::span<const double> p, std::span<const double> q);

}  // namespace endec::num
