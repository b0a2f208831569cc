// SPDX-License-Identifier: Apache-2.0
#include "mgilab/numeric.hpp"

#include <algorithm>
#include <cmath>

#include "mgilab/error.hpp"

namespace mgilab {

ProbabilityVector ProbabilityVector::from_normalized(Vector values) {
  if (values.empty()) throw Error("empty vector");
  if (!all_finite(values) || !is_distribution(values)) {
    throw Error("not a probability vector");
  }
  return ProbabilityVector(std::move(values));
}

double sum(std::span<const float> v) {
  double acc = 0.0;
  for (float x : v) acc += x;
  return acc;
}

bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

bool is_distribution(std::span<const float> v, double tol) {
  for (float x : v) {
    if (!(x >= 0.0f)) return false;
  }
  return std::abs(sum(v) - 1.0) <= tol;
}

void softmax_inplace(std::span<float> row) {
  if (row.empty()) throw Error("empty vector");
  const float max = *std::max_element(row.begin(), row.end());
  double total = 0.0;
  for (float& x : row) {
    const double e = std::exp(static_cast<double>(x) - max);
    x = static_cast<float>(e);
    total += e;
  }
  const double inv = 1.0 / total;
  for (float& x : row) x = static_cast<float>(x * inv);
}

ProbabilityVector softmax(std::span<const float> logits) {
  if (logits.empty()) throw Error("empty vector");
  if (!all_finite(logits)) throw Error("non-finite logits");
  Vector out(logits.begin(), logits.end());
  softmax_inplace(out);
  return ProbabilityVector::from_normalized(std::move(out));
}

void normalize_l1_inplace(std::span<float> v) {
  if (v.empty()) throw Error("empty vector");
  for (float x : v) {
    if (!(x >= 0.0f) || !std::isfinite(x)) throw Error("invalid attention mass");
  }
  const double total = sum(v);
  if (!(total > 0.0)) throw Error("invalid attention mass");
  for (float& x : v) x = static_cast<float>(x / total);
}

ProbabilityVector normalize_l1(std::span<const float> v) {
  Vector out(v.begin(), v.end());
  normalize_l1_inplace(out);
  return ProbabilityVector::from_normalized(std::move(out));
}

double entropy(std::span<const float> p) {
  std::vector<double> terms;
  terms.reserve(p.size());
  for (float x : p) {
    if (x > 0.0f) {
      const double d = x;
      terms.push_back(-d * std::log(d));
    }
  }
  std::sort(terms.begin(), terms.end());
  double h = 0.0;
  for (double t : terms) h += t;
  // Rounding can push a near-degenerate distribution slightly below zero.
  return std::max(h, 0.0);
}

double entropy(const ProbabilityVector& p) { return entropy(p.values()); }

int argmax(std::span<const float> v) {
  if (v.empty()) return -1;
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = static_cast<int>(i);
  }
  return best;
}

}  // namespace mgilab
