#pragma once

// Tiny-scale correctness suites shared by `palm selftest` and the tests.

#include "palm/rrnn.hpp"

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace palm {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;  ///< failing property, or a summary on success
  double worst = 0;    ///< largest error seen (suite-specific unit)
  double seconds = 0;
};

template <typename T>
using SpanTableBuilder = std::function<rrnn::SpanTable<T>(const rrnn::RrnnTrace<T>&, int)>;

/// Relative error ||a - b|| / max(||b||, tiny).
template <typename T>
double relative_error(const ad::Vector<T>& a, const ad::Vector<T>& b) {
  const double denom = std::max(static_cast<double>(b.norm()), 1e-30);
  return static_cast<double>((a - b).norm()) / denom;
}

enum class ErrorScope {
  per_span,   ///< relative error of every span vector
  per_table,  ///< Frobenius-norm relative error of each draw's whole table
};

/// Random RRNN params and inputs (d_r <= 16, n <= 50); every span of both
/// directions checked against naive_span. `worst` holds the largest error in
/// the chosen scope; the detail also reports the per-span maximum.
template <typename T>
SuiteResult span_oracle_suite(int draws, std::uint64_t seed, double tolerance, ErrorScope scope,
                              SpanTableBuilder<T> builder = {});

/// Central finite differences of the joint loss on a tiny model, every
/// parameter entry, each seed a fresh model and corpus (double precision).
SuiteResult gradient_suite(int seeds, std::uint64_t seed, double tolerance);

/// Random binary trees encoded as 0/1 score matrices must decode exactly.
SuiteResult recovery_suite(int trees, std::uint64_t seed, int min_length, int max_length);

/// All suites at tiny scale.
std::vector<SuiteResult> run_selftest(std::uint64_t seed);

}  // namespace palm
