#pragma once

#include <span>
#include <string>
#include <vector>

namespace dualtta::bench {

struct Metrics {
  double accuracy = 0.0;
  std::vector<double> per_group;  // 2 * num_classes entries
  double worst_group = 0.0;
  double macro_f1 = 0.0;
};

// worst_group = min over the 2C (class x attribute) groups; macro_f1 is the
// unweighted mean of per-class F1 with 0/0 precision or recall treated as 0.
// Every group must be represented (ConfigError otherwise).
Metrics compute_metrics(std::span<const std::size_t> predicted,
                        std::span<const std::size_t> labels,
                        std::span<const std::size_t> groups, std::size_t num_classes);

struct WilcoxonResult {
  double w_plus = 0.0;
  double w_minus = 0.0;
  double statistic = 0.0;  // min(w_plus, w_minus)
  double p_two_sided = 1.0;
  std::string method_used;  // "exact" (n <= 20) or "normal_approx"
  std::size_t n_used = 0;   // non-zero differences
};

// Paired two-sided signed-rank test. Zero differences are dropped, ties share
// mid-ranks; exact sign-assignment enumeration for n <= 20, normal
// approximation with continuity correction and tie-adjusted variance above.
// Fewer than 5 non-zero differences is an error.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

}  // namespace dualtta::bench
