#include "smagnet/stats.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace smagnet::eval {

namespace {

void check(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("mannwhitney_u: both samples must be non-empty");
  for (double x : a)
    if (!std::isfinite(x)) throw std::invalid_argument("mannwhitney_u: non-finite value");
  for (double x : b)
    if (!std::isfinite(x)) throw std::invalid_argument("mannwhitney_u: non-finite value");
}

// Mid-ranks of the pooled sample (a first, then b) and the tie-group sizes.
std::vector<double> pooled_ranks(std::span<const double> a, std::span<const double> b, std::vector<std::size_t>* ties) {
  std::vector<double> v(a.begin(), a.end());
  v.insert(v.end(), b.begin(), b.end());
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && v[idx[j]] == v[idx[i]]) ++j;
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) ranks[idx[k]] = mid;
    if (ties) ties->push_back(j - i);
    i = j;
  }
  return ranks;
}

double u_from_ranks(const std::vector<double>& ranks, std::size_t n) {
  double r = 0;
  for (std::size_t i = 0; i < n; ++i) r += ranks[i];
  return r - static_cast<double>(n) * static_cast<double>(n + 1) / 2.0;
}

}  // namespace

MannWhitneyResult mannwhitney_exact(std::span<const double> a, std::span<const double> b) {
  check(a, b);
  const std::size_t n = a.size(), N = a.size() + b.size();
  if (N > 20) throw std::invalid_argument("mannwhitney_exact: samples too large for enumeration");
  const auto ranks = pooled_ranks(a, b, nullptr);
  MannWhitneyResult r;
  r.exact = true;
  r.u = u_from_ranks(ranks, n);
  // Every way of labelling n of the N pooled ranks as sample a is equally
  // likely under the null; ties keep their mid-ranks.
  std::uint64_t le = 0, ge = 0, total = 0;
  const double tol = 1e-9;
  for (std::uint32_t mask = 0; mask < (1u << N); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) != n) continue;
    double s = 0;
    for (std::size_t i = 0; i < N; ++i)
      if (mask & (1u << i)) s += ranks[i];
    const double u = s - static_cast<double>(n) * static_cast<double>(n + 1) / 2.0;
    le += u <= r.u + tol;
    ge += u >= r.u - tol;
    ++total;
  }
  const double lo = static_cast<double>(le) / static_cast<double>(total);
  const double hi = static_cast<double>(ge) / static_cast<double>(total);
  r.p = std::min(1.0, 2.0 * std::min(lo, hi));
  return r;
}

MannWhitneyResult mannwhitney_normal(std::span<const double> a, std::span<const double> b) {
  check(a, b);
  const double n = static_cast<double>(a.size()), m = static_cast<double>(b.size()), N = n + m;
  std::vector<std::size_t> ties;
  const auto ranks = pooled_ranks(a, b, &ties);
  MannWhitneyResult r;
  r.u = u_from_ranks(ranks, a.size());
  double tie_sum = 0;
  for (auto t : ties) {
    const double td = static_cast<double>(t);
    tie_sum += td * td * td - td;
  }
  const double mean = n * m / 2.0;
  const double var = n * m / 12.0 * ((N + 1.0) - (N > 1 ? tie_sum / (N * (N - 1.0)) : 0.0));
  if (var <= 0) {
    r.p = 1.0;
    return r;
  }
  const double z = std::max(0.0, std::fabs(r.u - mean) - 0.5) / std::sqrt(var);
  r.p = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return r;
}

MannWhitneyResult mannwhitney_u(std::span<const double> a, std::span<const double> b) {
  if (a.size() <= 8 && b.size() <= 8 && !a.empty() && !b.empty()) return mannwhitney_exact(a, b);
  return mannwhitney_normal(a, b);
}

}  // namespace smagnet::eval
