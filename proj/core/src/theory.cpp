#include "dualtta/theory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dualtta/errors.hpp"

namespace dualtta::theory {

double folded_normal_cdf(double t, double sigma) {
  if (t <= 0.0) return 0.0;
  return std::erf(t / (sigma * std::sqrt(2.0)));
}

std::vector<MarginRecord> simulate_margin_model(const MarginModelConfig& cfg) {
  if (cfg.trials < 10000) throw ConfigError("simulate_margin_model: trials must be >= 10^4");
  if (cfg.sigma_m <= 0 || cfg.c1 <= 0 || cfg.c2 <= 0) {
    throw ConfigError("simulate_margin_model: sigma_m, c1, c2 must be positive");
  }
  for (double s : cfg.style_magnitudes) {
    for (double S : cfg.semantic_magnitudes) {
      if (!(S > s)) throw ConfigError("simulate_margin_model: semantic magnitude must exceed s");
    }
  }

  // common random numbers: one margin sample reused across the whole sweep
  ndgrad::RngStream rng = ndgrad::RngStream(cfg.seed).split("margins");
  std::vector<double> margins(cfg.trials);
  for (double& m : margins) m = cfg.sigma_m * std::abs(rng.gaussian());
  std::sort(margins.begin(), margins.end());

  auto frac_leq = [&](double t) {
    auto it = std::upper_bound(margins.begin(), margins.end(), t);
    return static_cast<double>(it - margins.begin()) / static_cast<double>(margins.size());
  };
  auto frac_lt = [&](double t) {
    auto it = std::lower_bound(margins.begin(), margins.end(), t);
    return static_cast<double>(it - margins.begin()) / static_cast<double>(margins.size());
  };

  std::vector<MarginRecord> records;
  double prev_alpha = -1.0;
  for (double s : cfg.style_magnitudes) {
    MarginRecord probe;
    probe.alpha = frac_leq(s);
    if (probe.alpha < prev_alpha) {
      throw ContractError("margin sweep: alpha must be nondecreasing in s");
    }
    prev_alpha = probe.alpha;
    for (double S : cfg.semantic_magnitudes) {
      MarginRecord r;
      r.s = s;
      r.s_mag = S;
      r.alpha = frac_leq(s);
      r.beta = frac_leq(S);
      const double g = cfg.c1 * s;
      const double psi = cfg.c2 / S;
      r.error = frac_lt(g * psi);
      r.error_style_map = frac_lt(g);
      r.error_semantic_map = frac_lt(psi);
      records.push_back(r);
    }
  }

  // beta nondecreasing in S at fixed s (CDF monotonicity under common draws)
  for (std::size_t i = 0; i + 1 < records.size(); ++i) {
    if (records[i].s == records[i + 1].s && records[i + 1].s_mag > records[i].s_mag &&
        records[i + 1].beta < records[i].beta) {
      throw ContractError("margin sweep: beta must be nondecreasing in S");
    }
  }
  return records;
}

double spearman_rho(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw ContractError("spearman_rho: need two equally sized series");
  }
  auto ranks = [](std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  std::vector<double> ra = ranks(a), rb = ranks(b);
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= ra.size();
  mb /= rb.size();
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return std::nan("");
  return cov / std::sqrt(va * vb);
}

const char* check_status_name(CheckStatus s) {
  switch (s) {
    case CheckStatus::pass: return "pass";
    case CheckStatus::fail: return "fail";
    case CheckStatus::inconclusive: return "inconclusive";
  }
  return "?";
}

SpearmanResult check_theorem1_monotonicity(const std::vector<MarginRecord>& records,
                                           double min_rho) {
  if (records.size() < 20) {
    throw ContractError("check_theorem1_monotonicity: need >= 20 sweep points");
  }
  std::vector<double> ratio, error;
  for (const MarginRecord& r : records) {
    if (r.beta <= 0.0) {
      throw ContractError("check_theorem1_monotonicity: beta must be positive (S too small)");
    }
    ratio.push_back(r.alpha / r.beta);
    error.push_back(r.error);
  }
  SpearmanResult res;
  res.rho = spearman_rho(ratio, error);
  if (std::isnan(res.rho)) {
    res.status = CheckStatus::inconclusive;
    res.note = "constant series, correlation undefined";
    return res;
  }
  res.status = res.rho >= min_rho ? CheckStatus::pass : CheckStatus::fail;
  return res;
}

ShiftDistribution ShiftDistribution::truncated_gaussian(double sigma) {
  ShiftDistribution d;
  d.family_ = Family::gaussian;
  d.param_ = sigma;
  return d;
}
ShiftDistribution ShiftDistribution::uniform_sym(double half_width) {
  ShiftDistribution d;
  d.family_ = Family::uniform;
  d.param_ = half_width;
  return d;
}
ShiftDistribution ShiftDistribution::two_point(double magnitude) {
  ShiftDistribution d;
  d.family_ = Family::two_point;
  d.param_ = magnitude;
  return d;
}
ShiftDistribution ShiftDistribution::truncated_laplace(double scale) {
  ShiftDistribution d;
  d.family_ = Family::laplace;
  d.param_ = scale;
  return d;
}
ShiftDistribution ShiftDistribution::constant(double value) {
  ShiftDistribution d;
  d.family_ = Family::constant;
  d.param_ = value;
  return d;
}

double ShiftDistribution::sample(ndgrad::RngStream& rng) const {
  switch (family_) {
    case Family::gaussian: {
      double x;
      do {
        x = param_ * rng.gaussian();
      } while (x < -1.0 || x > 1.0);
      return x;
    }
    case Family::uniform:
      return param_ * (2.0 * rng.uniform() - 1.0);
    case Family::two_point:
      return rng.uniform() < 0.5 ? param_ : -param_;
    case Family::laplace: {
      double x;
      do {
        const double u = rng.uniform() - 0.5;
        const double sgn = u < 0.0 ? -1.0 : 1.0;
        x = -param_ * sgn * std::log(1.0 - 2.0 * std::abs(u));
      } while (x < -1.0 || x > 1.0);
      return x;
    }
    case Family::constant:
      return param_;
  }
  return 0.0;
}

std::string ShiftDistribution::describe() const {
  const char* names[] = {"gaussian", "uniform", "two_point", "laplace", "constant"};
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s(%.4f)", names[static_cast<int>(family_)], param_);
  return buf;
}

BoundReport check_theorem2_bounds(double delta, const ShiftDistribution& shift,
                                  std::size_t trials, std::uint64_t seed) {
  if (delta <= 0.0 || delta > 0.5) {
    throw ConfigError("check_theorem2_bounds: delta must be in (0, 1/2]");
  }
  if (trials == 0) throw ConfigError("check_theorem2_bounds: trials must be positive");

  ndgrad::RngStream rng = ndgrad::RngStream(seed).split("theorem2");
  const double p = 0.5 + delta;
  std::size_t flips = 0;
  double abs_delta_sum = 0.0;
  for (std::size_t i = 0; i < trials; ++i) {
    const double raw = shift.sample(rng);
    const double p_shifted = std::clamp(p + raw, 0.0, 1.0);
    const double effective = p_shifted - p;  // Diff after clipping
    abs_delta_sum += std::abs(effective);
    if (p_shifted < 0.5) ++flips;
  }

  BoundReport rep;
  rep.delta = delta;
  rep.trials = trials;
  rep.distribution = shift.describe();
  rep.e_abs_delta = abs_delta_sum / static_cast<double>(trials);
  rep.flip_freq = static_cast<double>(flips) / static_cast<double>(trials);
  rep.lower = std::max(0.0, (rep.e_abs_delta - delta) / (1.0 - delta));
  rep.upper = std::min(1.0, rep.e_abs_delta / delta);
  // 3-sigma binomial slack with Laplace smoothing so degenerate frequencies
  // still get a nonzero allowance
  const double smoothed =
      (static_cast<double>(flips) + 1.0) / (static_cast<double>(trials) + 2.0);
  rep.slack = 3.0 * std::sqrt(smoothed * (1.0 - smoothed) / static_cast<double>(trials));
  rep.pass = rep.flip_freq >= rep.lower - rep.slack && rep.flip_freq <= rep.upper + rep.slack;
  return rep;
}

Theorem2SweepReport run_theorem2_sweep(std::size_t n_configs, std::size_t trials,
                                       std::uint64_t seed) {
  Theorem2SweepReport sweep;
  sweep.configs = n_configs;
  ndgrad::RngStream rng = ndgrad::RngStream(seed).split("theorem2-sweep");
  for (std::size_t i = 0; i < n_configs; ++i) {
    ndgrad::RngStream cfg_rng = rng.split(static_cast<std::uint64_t>(i));
    const double delta = 0.05 + 0.45 * cfg_rng.uniform();
    ShiftDistribution dist = ShiftDistribution::truncated_gaussian(0.2);
    switch (cfg_rng.bounded(4)) {
      case 0:
        dist = ShiftDistribution::truncated_gaussian(0.05 + 0.45 * cfg_rng.uniform());
        break;
      case 1:
        dist = ShiftDistribution::uniform_sym(0.05 + 0.95 * cfg_rng.uniform());
        break;
      case 2:
        dist = ShiftDistribution::two_point(0.05 + 0.85 * cfg_rng.uniform());
        break;
      case 3:
        dist = ShiftDistribution::truncated_laplace(0.05 + 0.25 * cfg_rng.uniform());
        break;
    }
    BoundReport rep = check_theorem2_bounds(delta, dist, trials, cfg_rng.next_u64());
    if (rep.pass) ++sweep.passes;
    sweep.reports.push_back(std::move(rep));
  }
  sweep.all_pass = sweep.passes == sweep.configs;
  return sweep;
}

CorollaryReport estimate_corollary_separation(std::span<const tta::Membership> membership,
                                              std::span<const std::size_t> predicted,
                                              std::span<const std::size_t> labels) {
  if (membership.size() != predicted.size() || membership.size() != labels.size()) {
    throw ContractError("estimate_corollary_separation: input length mismatch");
  }
  CorollaryReport rep;
  std::size_t correct_plus = 0, correct_minus = 0;
  for (std::size_t i = 0; i < membership.size(); ++i) {
    if (membership[i] == tta::Membership::d_plus) {
      ++rep.n_plus;
      if (predicted[i] == labels[i]) ++correct_plus;
    } else if (membership[i] == tta::Membership::d_minus) {
      ++rep.n_minus;
      if (predicted[i] == labels[i]) ++correct_minus;
    }
  }
  rep.conclusive = rep.n_plus > 0 && rep.n_minus > 0;
  if (rep.n_plus > 0) rep.acc_plus = static_cast<double>(correct_plus) / rep.n_plus;
  if (rep.n_minus > 0) rep.acc_minus = static_cast<double>(correct_minus) / rep.n_minus;
  rep.error_plus = 1.0 - rep.acc_plus;
  rep.error_minus = 1.0 - rep.acc_minus;
  rep.separated = rep.conclusive && rep.error_plus < rep.error_minus;
  return rep;
}

}  // namespace dualtta::theory
