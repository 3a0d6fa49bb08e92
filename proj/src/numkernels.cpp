// SPDX-License-Identifier: Apache-2.0

#include "endec/numkernels.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "endec/errors.hpp"

namespace endec::num {

namespace {

template <typename T>
void check_logits_impl(std::span<const T> logits) {
  if (logits.empty()) throw InvalidInput("logit vector is empty");
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const T v = logits[i];
    if (std::isnan(v)) throw InvalidInput("NaN logit at index " + std::to_string(i));
    if (!std::isfinite(v)) throw InvalidInput("infinite logit at index " + std::to_string(i));
  }
}

template <typename T>
double log_sum_exp_impl(std::span<const T> logits) {
  double shift = static_cast<double>(logits[0]);
  for (const T v : logits) shift = std::max(shift, static_cast<double>(v));
  double s = 0.0;
  for (const T v : logits) s += std::exp(static_cast<double>(v) - shift);
  return shift + std::log(s);
}

template <typename T>
ProbVector softmax_impl(std::span<const T> logits) {
  check_logits_impl(logits);
  double shift = static_cast<double>(logits[0]);
  for (const T v : logits) shift = std::max(shift, static_cast<double>(v));
  std::vector<double> out(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(static_cast<double>(logits[i]) - shift);
    s += out[i];
  }
  const double inv = 1.0 / s;
  for (double& v : out) v *= inv;
  return ProbVector::unchecked(std::move(out));
}

template <typename T>
std::vector<double> log_softmax_impl(std::span<const T> logits) {
  check_logits_impl(logits);
  const double lse = log_sum_exp_impl(logits);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

// p * log(p / q), with 0 * log 0 := 0.
inline double xlogy_ratio(double p, double q) {
  if (p == 0.0) return 0.0;
  return p * std::log(p / q);
}

void check_same_length(std::size_t a, std::size_t b) {
  if (a != b) {
    throw InvalidInput("length mismatch: " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

}  // namespace

ProbVector::ProbVector(std::vector<double> values) : values_(std::move(values)) {
  if (values_.empty()) throw InvalidInput("probability vector is empty");
  double s = 0.0;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const double v = values_[i];
    if (!std::isfinite(v) || v < 0.0) {
      throw InvalidInput("probability entry " + std::to_string(i) + " is negative or non-finite");
    }
    s += v;
  }
  if (std::abs(s - 1.0) > kSumTolerance) {
    throw InvalidInput("probabilities sum to " + std::to_string(s) + ", expected 1");
  }
}

ProbVector ProbVector::unchecked(std::vector<double> values) noexcept {
  return ProbVector(Adopt{}, std::move(values));
}

void check_logits(std::span<const float> logits) { check_logits_impl(logits); }
void check_logits(std::span<const double> logits) { check_logits_impl(logits); }

double log_sum_exp(std::span<const float> logits) {
  check_logits_impl(logits);
  return log_sum_exp_impl(logits);
}
double log_sum_exp(std::span<const double> logits) {
  check_logits_impl(logits);
  return log_sum_exp_impl(logits);
}

ProbVector softmax(std::span<const float> logits) { return softmax_impl(logits); }
ProbVector softmax(std::span<const double> logits) { return softmax_impl(logits); }

std::vector<double> log_softmax(std::span<const float> logits) { return log_softmax_impl(logits); }
std::vector<double> log_softmax(std::span<const double> logits) { return log_softmax_impl(logits); }

double entropy(std::span<const double> p) noexcept {
  double h = 0.0;
  for (const double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return std::max(h, 0.0);
}

double entropy(const ProbVector& p) noexcept { return entropy(p.values()); }

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  check_same_length(p.size(), q.size());
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double qi = (q[i] == 0.0 && p[i] > 0.0) ? kKlFloor : q[i];
    d += xlogy_ratio(p[i], qi);
  }
  return std::max(d, 0.0);
}

double kl_divergence(const ProbVector& p, const ProbVector& q) {
  return kl_divergence(p.values(), q.values());
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
  check_same_length(p.size(), q.size());
  double a = 0.0;
  double b = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    a += xlogy_ratio(p[i], m);
    b += xlogy_ratio(q[i], m);
  }
  return std::clamp(0.5 * (a + b), 0.0, std::log(2.0));
}

double js_divergence(const ProbVector& p, const ProbVector& q) {
  return js_divergence(p.values(), q.values());
}

}  // namespace endec::num
