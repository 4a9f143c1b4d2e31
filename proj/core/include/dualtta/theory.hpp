#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dualtta/rng.hpp"
#include "dualtta/tta.hpp"

namespace dualtta::theory {

// Margin model: M ~ folded normal with scale sigma_m; a style perturbation of
// magnitude s flips the label when M <= s, a semantic one of magnitude S when
// M <= S. The misclassification threshold combines the two structural maps
// g(s) = c1*s (increasing) and psi(S) = c2/S (decreasing) as m0 = g(s)*psi(S),
// which satisfies both monotonicity requirements at once.
struct MarginModelConfig {
  double sigma_m = 1.0;
  double c1 = 1.5;
  double c2 = 1.0;
  std::vector<double> style_magnitudes = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<double> semantic_magnitudes = {3.0, 3.5};
  std::size_t trials = 20000;
  std::uint64_t seed = 2024;
};

struct MarginRecord {
  double s = 0.0;
  double s_mag = 0.0;
  double alpha = 0.0;  // F_M(s)
  double beta = 0.0;   // F_M(S)
  double error = 0.0;  // F_M(g(s) * psi(S))
  double error_style_map = 0.0;     // F_M(g(s))
  double error_semantic_map = 0.0;  // F_M(psi(S))
};

// Uses common random numbers across sweep points, so alpha is exactly
// nondecreasing in s and beta in S (verified internally).
std::vector<MarginRecord> simulate_margin_model(const MarginModelConfig& cfg);

// Closed-form folded-normal CDF, the oracle for the Monte Carlo estimates.
double folded_normal_cdf(double t, double sigma);

enum class CheckStatus { pass, fail, inconclusive };

const char* check_status_name(CheckStatus s);

struct SpearmanResult {
  double rho = 0.0;
  CheckStatus status = CheckStatus::inconclusive;
  std::string note;
};

// Spearman rank correlation (average ranks on ties) between alpha/beta and
// error; passes at rho >= min_rho. A constant series is inconclusive.
SpearmanResult check_theorem1_monotonicity(const std::vector<MarginRecord>& records,
                                           double min_rho = 0.95);

double spearman_rho(std::span<const double> a, std::span<const double> b);

// Symmetric zero-mean shift families with support in [-1, 1]. Symmetry makes
// the lower flip-probability bound hold for the empirical measure (a no-flip
// draw can otherwise carry |Delta| above delta and break the bound the proof
// sketches over).
class ShiftDistribution {
 public:
  enum class Family { gaussian, uniform, two_point, laplace, constant };

  static ShiftDistribution truncated_gaussian(double sigma);
  static ShiftDistribution uniform_sym(double half_width);
  static ShiftDistribution two_point(double magnitude);
  static ShiftDistribution truncated_laplace(double scale);
  static ShiftDistribution constant(double value);  // degenerate, for forced cases

  double sample(ndgrad::RngStream& rng) const;
  std::string describe() const;

 private:
  Family family_ = Family::gaussian;
  double param_ = 0.1;
};

struct BoundReport {
  double delta = 0.0;
  double e_abs_delta = 0.0;
  double flip_freq = 0.0;
  double lower = 0.0;  // max(0, (E|D| - delta) / (1 - delta))
  double upper = 1.0;  // min(1, E|D| / delta)
  double slack = 0.0;  // 3-sigma binomial slack applied on both sides
  bool pass = false;
  std::size_t trials = 0;
  std::string distribution;
};

// Binary model: p = 1/2 + delta, p' = clip(p + Delta, 0, 1); a flip is the
// post-shift probability crossing 1/2. Delta is measured after clipping.
BoundReport check_theorem2_bounds(double delta, const ShiftDistribution& shift,
                                  std::size_t trials, std::uint64_t seed);

struct Theorem2SweepReport {
  std::size_t configs = 0;
  std::size_t passes = 0;
  bool all_pass = false;
  std::vector<BoundReport> reports;
};

// Seeded sweep over (delta, shift distribution) configurations with
// delta in [0.05, 0.5] and symmetric families.
Theorem2SweepReport run_theorem2_sweep(std::size_t n_configs, std::size_t trials,
                                       std::uint64_t seed);

struct CorollaryReport {
  std::size_t n_plus = 0;
  std::size_t n_minus = 0;
  double acc_plus = 0.0;
  double acc_minus = 0.0;
  double error_plus = 0.0;   // lower end of the empirical rho * tau_sp/tau_sa interval
  double error_minus = 0.0;  // upper end
  bool conclusive = false;   // both sets non-empty
  bool separated = false;    // error_plus < error_minus
};

CorollaryReport estimate_corollary_separation(std::span<const tta::Membership> membership,
                                              std::span<const std::size_t> predicted,
                                              std::span<const std::size_t> labels);

}  // namespace dualtta::theory
