#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dualtta/errors.hpp"
#include "dualtta/theory.hpp"

using namespace dualtta;
using namespace dualtta::theory;

TEST_CASE("margin model limits") {
  MarginModelConfig cfg;
  cfg.style_magnitudes = {0.0, 0.5};
  cfg.semantic_magnitudes = {10.0};
  cfg.trials = 20000;
  auto records = simulate_margin_model(cfg);
  REQUIRE(records.size() == 2);
  CHECK(records[0].alpha == 0.0);       // s = 0: M <= 0 almost never
  CHECK(records[0].beta > 0.999);       // S = 10 sigma
  CHECK(records[1].beta > 0.999);
}

TEST_CASE("alpha estimate matches the closed-form folded-normal CDF") {
  MarginModelConfig cfg;
  cfg.style_magnitudes = {1.0};
  cfg.semantic_magnitudes = {5.0};
  cfg.trials = 100000;
  auto records = simulate_margin_model(cfg);
  const double expected = folded_normal_cdf(1.0, 1.0);  // erf(1/sqrt(2)) ~ 0.6827
  CHECK(expected == doctest::Approx(0.682689).epsilon(1e-5));
  const double n = static_cast<double>(cfg.trials);
  const double three_sigma = 3.0 * std::sqrt(expected * (1.0 - expected) / n);
  CHECK(std::abs(records[0].alpha - expected) < three_sigma);
}

TEST_CASE("spearman on clean series") {
  std::vector<double> inc{1, 2, 3, 4, 5};
  std::vector<double> up{0.1, 0.2, 0.4, 0.5, 0.9};
  std::vector<double> down{0.9, 0.5, 0.4, 0.2, 0.1};
  CHECK(spearman_rho(inc, up) == doctest::Approx(1.0));
  CHECK(spearman_rho(inc, down) == doctest::Approx(-1.0));
}

TEST_CASE("theorem 1: perfect and reversed rankings") {
  std::vector<MarginRecord> records;
  for (int i = 0; i < 20; ++i) {
    MarginRecord r;
    r.alpha = 0.01 * (i + 1);
    r.beta = 0.9;
    r.error = 0.02 * (i + 1);  // strictly increasing with alpha at fixed beta
    records.push_back(r);
  }
  auto res = check_theorem1_monotonicity(records);
  CHECK(res.status == CheckStatus::pass);
  CHECK(res.rho == doctest::Approx(1.0));

  for (auto& r : records) r.error = 1.0 - r.error;  // reversed
  auto rev = check_theorem1_monotonicity(records);
  CHECK(rev.rho == doctest::Approx(-1.0));
  CHECK(rev.status == CheckStatus::fail);
}

TEST_CASE("theorem 1: constant error series is inconclusive") {
  std::vector<MarginRecord> records;
  for (int i = 0; i < 20; ++i) {
    MarginRecord r;
    r.alpha = 0.01 * (i + 1);
    r.beta = 0.9;
    r.error = 0.25;
    records.push_back(r);
  }
  auto res = check_theorem1_monotonicity(records);
  CHECK(res.status == CheckStatus::inconclusive);
}

TEST_CASE("theorem 1: default sweep passes at rho >= 0.95") {
  MarginModelConfig cfg;  // 10 style x 2 semantic magnitudes
  auto records = simulate_margin_model(cfg);
  REQUIRE(records.size() == 20);
  auto res = check_theorem1_monotonicity(records);
  CAPTURE(res.rho);
  CHECK(res.status == CheckStatus::pass);
}

TEST_CASE("theorem 2: forced cases") {
  SUBCASE("no shift means no flips") {
    auto rep = check_theorem2_bounds(0.3, ShiftDistribution::constant(0.0), 10000, 1);
    CHECK(rep.flip_freq == 0.0);
    CHECK(rep.lower <= 0.0 + rep.slack);
    CHECK(rep.pass);
  }
  SUBCASE("shift of exactly -2*delta always flips") {
    const double delta = 0.3;
    auto rep = check_theorem2_bounds(delta, ShiftDistribution::constant(-2.0 * delta), 10000, 2);
    CHECK(rep.flip_freq == 1.0);
    CHECK(rep.e_abs_delta == doctest::Approx(2.0 * delta).epsilon(1e-12));
    CHECK(rep.upper == 1.0);  // 2*delta/delta = 2, clamped
    CHECK(rep.pass);
  }
  SUBCASE("truncated gaussian at delta = 0.3") {
    auto rep =
        check_theorem2_bounds(0.3, ShiftDistribution::truncated_gaussian(0.2), 100000, 3);
    CHECK(rep.pass);
    CHECK(rep.flip_freq > 0.0);
    CHECK(rep.lower <= rep.upper);
  }
}

TEST_CASE("theorem 2: inclusion holds across a 50-config sweep") {
  auto sweep = run_theorem2_sweep(50, 10000, 7);
  CHECK(sweep.passes == 50);
  CHECK(sweep.all_pass);
  for (const auto& rep : sweep.reports) {
    CHECK(rep.lower <= rep.upper + 1e-12);
  }
}

TEST_CASE("corollary separation report") {
  using tta::Membership;
  SUBCASE("extreme separation gives the (0,1) interval") {
    std::vector<Membership> m{Membership::d_plus, Membership::d_plus, Membership::d_minus,
                              Membership::d_minus};
    std::vector<std::size_t> pred{0, 1, 0, 1};
    std::vector<std::size_t> label{0, 1, 1, 0};  // D+ all correct, D- all wrong
    auto rep = estimate_corollary_separation(m, pred, label);
    CHECK(rep.conclusive);
    CHECK(rep.acc_plus == 1.0);
    CHECK(rep.acc_minus == 0.0);
    CHECK(rep.error_plus == 0.0);
    CHECK(rep.error_minus == 1.0);
    CHECK(rep.separated);
  }
  SUBCASE("equal error gives an empty interval") {
    std::vector<Membership> m{Membership::d_plus, Membership::d_plus, Membership::d_minus,
                              Membership::d_minus};
    std::vector<std::size_t> pred{0, 1, 0, 1};
    std::vector<std::size_t> label{0, 0, 0, 0};  // both sets 50% correct
    auto rep = estimate_corollary_separation(m, pred, label);
    CHECK(rep.conclusive);
    CHECK_FALSE(rep.separated);
  }
  SUBCASE("empty set is inconclusive, not a failure") {
    std::vector<Membership> m{Membership::d_plus, Membership::neither};
    std::vector<std::size_t> pred{0, 1};
    std::vector<std::size_t> label{0, 1};
    auto rep = estimate_corollary_separation(m, pred, label);
    CHECK_FALSE(rep.conclusive);
  }
}

TEST_CASE("validators are deterministic per seed") {
  auto a = check_theorem2_bounds(0.2, ShiftDistribution::uniform_sym(0.6), 20000, 11);
  auto b = check_theorem2_bounds(0.2, ShiftDistribution::uniform_sym(0.6), 20000, 11);
  CHECK(a.flip_freq == b.flip_freq);
  CHECK(a.e_abs_delta == b.e_abs_delta);

  MarginModelConfig cfg;
  auto r1 = simulate_margin_model(cfg);
  auto r2 = simulate_margin_model(cfg);
  REQUIRE(r1.size() == r2.size());
  for (std::size_t i = 0; i < r1.size(); ++i) {
    CHECK(r1[i].alpha == r2[i].alpha);
    CHECK(r1[i].error == r2[i].error);
  }
}

TEST_CASE("config validation") {
  MarginModelConfig bad;
  bad.trials = 10;
  CHECK_THROWS_AS(simulate_margin_model(bad), ConfigError);

  CHECK_THROWS_AS(check_theorem2_bounds(0.0, ShiftDistribution::constant(0.0), 100, 1),
                  ConfigError);
  CHECK_THROWS_AS(check_theorem2_bounds(0.6, ShiftDistribution::constant(0.0), 100, 1),
                  ConfigError);
}
