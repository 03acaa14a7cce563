#pragma once

#include <span>

namespace smagnet::eval {

struct MannWhitneyResult {
  double u = 0;  // U statistic of sample a
  double p = 1;  // two-sided
  bool exact = false;
};

// Exact enumeration when both samples have at most 8 values, otherwise the
// tie-corrected normal approximation with continuity correction.
MannWhitneyResult mannwhitney_u(std::span<const double> a, std::span<const double> b);

// Both branches, exposed for cross-checking. Exact enumeration is limited to
// n + m <= 20.
MannWhitneyResult mannwhitney_exact(std::span<const double> a, std::span<const double> b);
MannWhitneyResult mannwhitney_normal(std::span<const double> a, std::span<const double> b);

}  // namespace smagnet::eval
