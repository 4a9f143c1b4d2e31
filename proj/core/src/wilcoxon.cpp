#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "dualtta/errors.hpp"
#include "dualtta/metrics.hpp"

namespace dualtta::bench {

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Exact null distribution of W+ over all 2^n sign assignments of the observed
// ranks, via a subset-sum count. Ranks are half-integers under mid-ranking,
// so everything is doubled to stay integral.
double exact_two_sided_p(const std::vector<double>& ranks, double w_plus) {
  std::vector<long long> doubled(ranks.size());
  long long total = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    doubled[i] = llround(2.0 * ranks[i]);
    total += doubled[i];
  }
  std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
  count[0] = 1.0;
  for (long long r : doubled) {
    for (long long s = total; s >= r; --s) {
      count[static_cast<std::size_t>(s)] += count[static_cast<std::size_t>(s - r)];
    }
  }
  const double denom = std::pow(2.0, static_cast<double>(ranks.size()));
  const long long w2 = llround(2.0 * w_plus);
  double p_le = 0.0, p_ge = 0.0;
  for (long long s = 0; s <= total; ++s) {
    if (s <= w2) p_le += count[static_cast<std::size_t>(s)];
    if (s >= w2) p_ge += count[static_cast<std::size_t>(s)];
  }
  return std::min(1.0, 2.0 * std::min(p_le, p_ge) / denom);
}

}  // namespace

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("wilcoxon: paired series must have equal length");

  std::vector<double> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d != 0.0) diffs.push_back(d);
  }
  const std::size_t n = diffs.size();
  if (n < 5) {
    throw ConfigError("wilcoxon: need at least 5 non-zero differences, got " + std::to_string(n));
  }

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t i, std::size_t j) { return std::abs(diffs[i]) < std::abs(diffs[j]); });

  std::vector<double> rank(n);
  std::vector<std::size_t> tie_sizes;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(diffs[idx[j + 1]]) == std::abs(diffs[idx[i]])) ++j;
    const double mid = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = mid;
    tie_sizes.push_back(j - i + 1);
    i = j + 1;
  }

  WilcoxonResult res;
  res.n_used = n;
  for (std::size_t k = 0; k < n; ++k) {
    if (diffs[k] > 0.0) {
      res.w_plus += rank[k];
    } else {
      res.w_minus += rank[k];
    }
  }
  res.statistic = std::min(res.w_plus, res.w_minus);

  if (n <= 20) {
    res.method_used = "exact";
    res.p_two_sided = exact_two_sided_p(rank, res.w_plus);
  } else {
    res.method_used = "normal_approx";
    const double nn = static_cast<double>(n);
    const double mean = nn * (nn + 1.0) / 4.0;
    double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0;
    for (std::size_t t : tie_sizes) {
      const double td = static_cast<double>(t);
      var -= (td * td * td - td) / 48.0;
    }
    if (var <= 0.0) throw NumericError("wilcoxon: degenerate variance (all ranks tied)");
    double z = res.w_plus - mean;
    z += z > 0 ? -0.5 : 0.5;  // continuity correction toward the mean
    z /= std::sqrt(var);
    res.p_two_sided = std::min(1.0, 2.0 * (1.0 - normal_cdf(std::abs(z))));
  }
  return res;
}

}  // namespace dualtta::bench
