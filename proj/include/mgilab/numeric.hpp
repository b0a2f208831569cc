// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mgilab {

using Vector = std::vector<float>;

/// A non-negative vector of 32-bit reals whose entries sum to one.
///
/// Construction validates the invariant (every entry finite and >= 0, sum
/// within 1e-6 of one); the only way to obtain one is through softmax,
/// normalize_l1 or from_normalized.
class ProbabilityVector {
 public:
  ProbabilityVector() = default;

  // Throws mgilab::Error when `values` is not a valid distribution.
  static ProbabilityVector from_normalized(Vector values);

  std::span<const float> values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  float operator[](std::size_t i) const { return values_[i]; }
  const Vector& vector() const { return values_; }

 private:
  explicit ProbabilityVector(Vector values) : values_(std::move(values)) {}
  Vector values_;
};

inline constexpr double kProbabilityTolerance = 1e-6;

// Sum with 64-bit accumulation.
double sum(std::span<const float> v);

bool all_finite(std::span<const float> v);

// True when every entry is >= 0 and the sum is within `tol` of one.
bool is_distribution(std::span<const float> v, double tol = kProbabilityTolerance);

ProbabilityVector softmax(std::span<const float> logits);

// In-place max-subtracted softmax for the attention hot path. The input must
// be non-empty and finite.
void softmax_inplace(std::span<float> row);

// Divides by the L1 mass. Throws "invalid attention mass" on negative entries
// or zero total mass.
ProbabilityVector normalize_l1(std::span<const float> v);

// In-place variant; same preconditions and errors.
void normalize_l1_inplace(std::span<float> v);

// Shannon entropy in nats with 0 log 0 = 0. Per-entry terms are summed in
// sorted order, so the result is exactly invariant under permutation.
double entropy(const ProbabilityVector& p);
double entropy(std::span<const float> p);

// Index of the largest entry; ties go to the lowest index. Empty input
// returns -1.
int argmax(std::span<const float> v);

}  // namespace mgilab
