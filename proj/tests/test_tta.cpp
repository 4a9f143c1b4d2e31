#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "dualtta/errors.hpp"
#include "dualtta/model.hpp"
#include "dualtta/tta.hpp"

using namespace dualtta;
using namespace dualtta::tta;

namespace {

Tensor small_batch(std::uint64_t seed, std::size_t b, std::size_t hw = 12) {
  ndgrad::RngStream rng(seed);
  Tensor t = rng.gaussian_tensor(Shape{b, 3, hw, hw});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.5 + 0.25 * t[i];
  return t;
}

PredictionTriple triple(double ent, double diff_sa, double diff_sp) {
  PredictionTriple t;
  t.y_hat = {1.0, 0.0};
  t.ent = ent;
  t.diff_sa = diff_sa;
  t.diff_sp = diff_sp;
  return t;
}

double binary_p_for_entropy(double target) {
  // smallest-p solution of -p ln p - (1-p) ln(1-p) = target
  double lo = 1e-9, hi = 0.5;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double e = -mid * std::log(mid) - (1 - mid) * std::log(1 - mid);
    (e < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

double batch_entropy_over(const Tensor& probs, const std::vector<Membership>& members,
                          Membership which) {
  double s = 0.0;
  const std::size_t C = probs.dim(1);
  for (std::size_t b = 0; b < probs.dim(0); ++b) {
    if (members[b] == which) {
      s += entropy(std::span<const double>(probs.data() + b * C, C));
    }
  }
  return s;
}

}  // namespace

TEST_CASE("entropy values") {
  std::vector<double> uniform{0.5, 0.5};
  CHECK(entropy(uniform) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  std::vector<double> onehot{1.0, 0.0};
  CHECK(entropy(onehot) >= 0.0);
  CHECK(entropy(onehot) < 3e-11);

  std::vector<double> p{0.7, 0.2, 0.1};
  const double direct = -(0.7 * std::log(0.7) + 0.2 * std::log(0.2) + 0.1 * std::log(0.1));
  CHECK(direct == doctest::Approx(0.801819).epsilon(1e-5));
  CHECK(entropy(p) == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("diff values and tie-breaking") {
  std::vector<double> a{0.9, 0.1}, b{0.3, 0.7};
  CHECK(diff(a, b) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(diff(a, a) == 0.0);

  std::vector<double> c{0.4, 0.6}, d{0.6, 0.4};
  CHECK(diff(c, d) == doctest::Approx(0.2).epsilon(1e-12));

  std::vector<double> tie{0.5, 0.5}, other{0.2, 0.8};
  CHECK(diff(tie, other) == doctest::Approx(0.3).epsilon(1e-12));  // k = 0 on ties
}

TEST_CASE("partition predicates") {
  DualTtaConfig cfg;  // tau_sa 0.4, tau_sp 0.7
  std::vector<PredictionTriple> ts = {
      triple(0.1, 0.6, 0.05),  // D+
      triple(0.1, 0.1, 0.8),   // D-
      triple(0.1, 0.6, 0.8),   // neither (both high)
      triple(0.1, 0.1, 0.05),  // neither (both low)
      triple(0.1, 0.4, 0.7),   // boundary equality -> neither
  };
  PartitionRecord rec = partition(ts, cfg);
  CHECK(rec.membership[0] == Membership::d_plus);
  CHECK(rec.membership[1] == Membership::d_minus);
  CHECK(rec.membership[2] == Membership::neither);
  CHECK(rec.membership[3] == Membership::neither);
  CHECK(rec.membership[4] == Membership::neither);
  CHECK(rec.count(Membership::d_plus) + rec.count(Membership::d_minus) +
            rec.count(Membership::neither) ==
        ts.size());
}

TEST_CASE("weights formulas") {
  DualTtaConfig cfg;  // ent0 0.4, diff0 0.7
  SUBCASE("exponents of zero give alpha = 3") {
    std::vector<PredictionTriple> ts = {triple(0.4, 0.0, 0.7)};
    PartitionRecord rec;
    rec.membership = {Membership::d_plus};
    assign_weights(ts, rec, cfg);
    CHECK(rec.weight[0] == doctest::Approx(3.0).epsilon(1e-12));
  }
  SUBCASE("beta = 1 at Ent = Ent0") {
    std::vector<PredictionTriple> ts = {triple(0.4, 0.0, 0.9)};
    PartitionRecord rec;
    rec.membership = {Membership::d_minus};
    assign_weights(ts, rec, cfg);
    CHECK(rec.weight[0] == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("direct evaluation oracle") {
    std::vector<PredictionTriple> ts = {triple(0.4, 0.6, 0.05)};
    PartitionRecord rec;
    rec.membership = {Membership::d_plus};
    assign_weights(ts, rec, cfg);
    const double expected = 1.0 + std::exp(0.6) + std::exp(0.65);
    CHECK(expected == doctest::Approx(4.73766).epsilon(1e-5));
    CHECK(rec.weight[0] == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("weights strictly positive on both sets") {
    std::vector<PredictionTriple> ts = {triple(2.3, 0.9, -0.9), triple(1.9, -0.9, 0.9)};
    PartitionRecord rec;
    rec.membership = {Membership::d_plus, Membership::d_minus};
    assign_weights(ts, rec, cfg);
    CHECK(rec.weight[0] > 0.0);
    CHECK(rec.weight[1] > 0.0);
  }
}

TEST_CASE("dual_loss on a tape") {
  using ndgrad::OpKind;
  using ndgrad::Tape;

  SUBCASE("empty sets give zero loss") {
    Tape tape;
    Tensor probs(Shape{2, 2}, {0.6, 0.4, 0.3, 0.7});
    ndgrad::NodeId pn = tape.leaf(probs);
    ndgrad::NodeId lp = tape.apply(OpKind::log_clamped, {pn});
    PartitionRecord rec;
    rec.membership = {Membership::neither, Membership::neither};
    rec.weight = {0.0, 0.0};
    ndgrad::NodeId loss = dual_loss(tape, pn, lp, rec, 0.5);
    CHECK(tape.value(loss)[0] == 0.0);
  }

  SUBCASE("single D+ sample with alpha=2 and Ent=0.5 gives 1.0") {
    const double p = binary_p_for_entropy(0.5);
    Tape tape;
    Tensor probs(Shape{1, 2}, {p, 1.0 - p});
    ndgrad::NodeId pn = tape.leaf(probs);
    ndgrad::NodeId lp = tape.apply(OpKind::log_clamped, {pn});
    PartitionRecord rec;
    rec.membership = {Membership::d_plus};
    rec.weight = {2.0};
    ndgrad::NodeId loss = dual_loss(tape, pn, lp, rec, 123.0);  // lambda irrelevant
    CHECK(tape.value(loss)[0] == doctest::Approx(1.0).epsilon(1e-9));
  }

  SUBCASE("scaling all alpha weights scales the gradient linearly") {
    ndgrad::RngStream rng(12);
    Tensor logits = rng.gaussian_tensor(Shape{4, 3});
    PartitionRecord rec;
    rec.membership = {Membership::d_plus, Membership::d_plus, Membership::neither,
                      Membership::d_plus};
    rec.weight = {0.7, 1.3, 0.0, 2.1};

    auto grad_with = [&](double scale) {
      Tape tape;
      ndgrad::NodeId ln = tape.leaf(logits);
      ndgrad::NodeId lp = tape.apply(OpKind::log_softmax, {ln});
      ndgrad::NodeId pn = tape.apply(OpKind::exp, {lp});
      PartitionRecord scaled = rec;
      for (double& w : scaled.weight) w *= scale;
      ndgrad::NodeId loss = dual_loss(tape, pn, lp, scaled, 0.5);
      ndgrad::NodeId tr[] = {ln};
      return tape.backward(loss, tr).at(ln);
    };
    Tensor g1 = grad_with(1.0);
    Tensor g3 = grad_with(3.0);
    for (std::size_t i = 0; i < g1.numel(); ++i) {
      CHECK(g3[i] == doctest::Approx(3.0 * g1[i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("make_adapter validates the method name") {
  CHECK(method_from_string("dualtta") == Method::dualtta);
  CHECK(method_from_string("eata_lite") == Method::eata_lite);
  CHECK_THROWS_AS(method_from_string("sar"), ConfigError);
}

TEST_CASE("noadapt leaves parameters bitwise unchanged") {
  model::ModelState m = model::build_reference_net(2, 3, 3);
  model::ModelState before = m;
  AdapterConfig cfg;
  cfg.method = Method::noadapt;
  auto adapter = make_adapter(cfg, ndgrad::RngStream(1));
  for (int i = 0; i < 3; ++i) {
    AdaptOutcome out = adapter->adapt_step(m, small_batch(100 + i, 6));
    CHECK_FALSE(out.updated);
    CHECK(out.n_neither == 6);
  }
  for (const auto& [name, t] : before.params) {
    CHECK(t.values() == m.params.at(name).values());
  }
}

TEST_CASE("tent at exactly uniform predictions is stationary") {
  model::ModelState m = model::build_reference_net(2, 3, 3);
  // zero classifier head: logits are identically zero, probs exactly uniform
  m.params.at("fc.weight") = Tensor(Shape{16, 2});
  m.params.at("fc.bias") = Tensor(Shape{2});
  model::ModelState before = m;

  AdapterConfig cfg;
  cfg.method = Method::tent;
  auto adapter = make_adapter(cfg, ndgrad::RngStream(1));
  AdaptOutcome out = adapter->adapt_step(m, small_batch(7, 4));
  CHECK(out.updated);
  for (const auto& [name, t] : before.params) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      CHECK(std::abs(t[i] - m.params.at(name)[i]) < 1e-12);
    }
  }
}

TEST_CASE("an update changes the next prediction on an identical batch") {
  model::ModelState m = model::build_reference_net(2, 3, 5);
  AdapterConfig cfg;
  cfg.method = Method::tent;
  cfg.optimizer.lr = 5e-3;
  auto adapter = make_adapter(cfg, ndgrad::RngStream(2));
  Tensor batch = small_batch(9, 6);
  AdaptOutcome first = adapter->adapt_step(m, batch);
  REQUIRE(first.updated);
  AdaptOutcome second = adapter->adapt_step(m, batch);
  bool differs = false;
  for (std::size_t i = 0; i < first.eval_probs.numel(); ++i) {
    differs |= first.eval_probs[i] != second.eval_probs[i];
  }
  CHECK(differs);
}

TEST_CASE("dualtta partition totality and loss bookkeeping") {
  model::ModelState m = model::build_reference_net(2, 3, 17);
  AdapterConfig cfg;
  cfg.method = Method::dualtta;
  auto adapter = make_adapter(cfg, ndgrad::RngStream(5));
  AdaptOutcome out = adapter->adapt_step(m, small_batch(21, 16));
  CHECK(out.n_plus + out.n_minus + out.n_neither == 16);
  CHECK(out.loss_dual ==
        doctest::Approx(out.loss_plus - cfg.dual.lambda * out.loss_minus).epsilon(1e-12));
}

TEST_CASE("lambda=0 with empty D+ performs no update") {
  model::ModelState m = model::build_reference_net(2, 3, 23);
  model::ModelState before = m;
  AdapterConfig cfg;
  cfg.method = Method::dualtta;
  cfg.dual.lambda = 0.0;
  cfg.dual.tau_sa = 1.0 - 1e-12;  // D+ unreachable
  cfg.dual.tau_sp = 1e-12;        // D- likely non-empty
  auto adapter = make_adapter(cfg, ndgrad::RngStream(6));
  AdaptOutcome out = adapter->adapt_step(m, small_batch(31, 12));
  CHECK(out.n_plus == 0);
  CHECK_FALSE(out.updated);
  for (const auto& [name, t] : before.params) {
    CHECK(t.values() == m.params.at(name).values());
  }
}

TEST_CASE("extreme thresholds degenerate dualtta to noadapt") {
  // tau_sa -> 1 kills D+ (Diff <= 1, strict inequality); tau_sp -> 1 kills D-.
  model::ModelState m = model::build_reference_net(2, 3, 29);
  model::ModelState before = m;
  AdapterConfig cfg;
  cfg.method = Method::dualtta;
  cfg.dual.tau_sa = 1.0 - 1e-9;
  cfg.dual.tau_sp = 1.0 - 1e-9;
  auto adapter = make_adapter(cfg, ndgrad::RngStream(7));
  for (int i = 0; i < 4; ++i) {
    AdaptOutcome out = adapter->adapt_step(m, small_batch(40 + i, 8));
    CHECK(out.n_plus == 0);
    CHECK(out.n_minus == 0);
    CHECK_FALSE(out.updated);
  }
  for (const auto& [name, t] : before.params) {
    CHECK(t.values() == m.params.at(name).values());
  }
}

TEST_CASE("entropy maximization direction on D- batches") {
  // One dualtta step on batches where only D- fires must not reduce the
  // summed entropy of those samples (eta <= 5e-4).
  int batches_with_dminus = 0;
  int violations = 0;
  for (std::uint64_t seed = 0; seed < 24; ++seed) {
    model::ModelState m = model::build_reference_net(2, 3, 200 + seed);
    AdapterConfig cfg;
    cfg.method = Method::dualtta;
    cfg.dual.tau_sa = 1.0 - 1e-12;  // D+ empty
    cfg.dual.tau_sp = 1e-12;        // D- fires whenever Diff_sp > 0
    auto adapter = make_adapter(cfg, ndgrad::RngStream(seed));
    Tensor batch = small_batch(300 + seed, 12);
    AdaptOutcome out = adapter->adapt_step(m, batch);
    if (out.n_minus == 0) continue;
    ++batches_with_dminus;
    REQUIRE(out.n_plus == 0);
    const double before = batch_entropy_over(out.eval_probs, out.membership, Membership::d_minus);
    Tensor after_probs = model::forward(m, batch).probs;
    const double after = batch_entropy_over(after_probs, out.membership, Membership::d_minus);
    if (after < before - 1e-10) ++violations;
  }
  CHECK(batches_with_dminus >= 20);
  CHECK(violations == 0);
}

TEST_CASE("entropy minimization direction on D+ batches") {
  int batches_with_dplus = 0;
  int violations = 0;
  for (std::uint64_t seed = 0; seed < 24; ++seed) {
    model::ModelState m = model::build_reference_net(2, 3, 400 + seed);
    AdapterConfig cfg;
    cfg.method = Method::dualtta;
    cfg.dual.tau_sa = 1e-12;        // D+ fires whenever Diff_sa > 0
    cfg.dual.tau_sp = 1.0 - 1e-12;  // D- empty
    auto adapter = make_adapter(cfg, ndgrad::RngStream(seed));
    Tensor batch = small_batch(500 + seed, 12);
    AdaptOutcome out = adapter->adapt_step(m, batch);
    if (out.n_plus == 0) continue;
    ++batches_with_dplus;
    REQUIRE(out.n_minus == 0);
    const double before = batch_entropy_over(out.eval_probs, out.membership, Membership::d_plus);
    Tensor after_probs = model::forward(m, batch).probs;
    const double after = batch_entropy_over(after_probs, out.membership, Membership::d_plus);
    if (after > before + 1e-10) ++violations;
  }
  CHECK(batches_with_dplus >= 20);
  CHECK(violations == 0);
}

TEST_CASE("open-gate deyo_lite equals entropy-weighted tent") {
  model::ModelState m1 = model::build_reference_net(2, 3, 31);
  model::ModelState m2 = m1;
  Tensor batch = small_batch(71, 8);

  AdapterConfig cfg;
  cfg.method = Method::deyo_lite;
  cfg.baseline.tau_ent = 1e18;
  cfg.baseline.tau_plpd = -1.0;
  auto adapter = make_adapter(cfg, ndgrad::RngStream(8));
  AdaptOutcome out = adapter->adapt_step(m1, batch);
  CHECK(out.n_plus == 8);

  // manual weighted-entropy step on the clone
  model::ForwardOptions fo;
  fo.record_tape = true;
  model::ForwardResult r = model::forward(m2, batch, fo);
  PartitionRecord rec;
  rec.membership.assign(8, Membership::d_plus);
  rec.weight.resize(8);
  for (std::size_t b = 0; b < 8; ++b) {
    std::span<const double> rowp(r.probs.data() + b * 2, 2);
    rec.weight[b] = std::exp(cfg.baseline.ent0 - entropy(rowp));
  }
  ndgrad::NodeId loss = dual_loss(*r.tape, r.probs_node, r.log_probs_node, rec, 0.0);
  auto names = model::resolve_trainables(m2, model::ParamPolicy::norm_affine_only);
  std::vector<ndgrad::NodeId> nodes;
  for (const auto& n : names) nodes.push_back(r.param_nodes.at(n));
  auto grads = r.tape->backward(loss, nodes);
  std::map<std::string, Tensor> by_name;
  for (std::size_t i = 0; i < names.size(); ++i) by_name.emplace(names[i], grads.at(nodes[i]));
  model::OptimizerState opt;
  opt.cfg = cfg.optimizer;
  model::sgd_step(m2, by_name, opt);

  for (const auto& [name, t] : m1.params) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      CHECK(t[i] == doctest::Approx(m2.params.at(name)[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("eata moving average stays normalized and gates the second batch") {
  model::ModelState m = model::build_reference_net(2, 3, 37);
  AdapterConfig cfg;
  cfg.method = Method::eata_lite;
  cfg.baseline.tau_ent = 1e18;  // entropy gate open; cosine gate does the work
  cfg.baseline.eps_cos = 0.99;
  auto adapter = make_adapter(cfg, ndgrad::RngStream(9));

  AdaptOutcome first = adapter->adapt_step(m, small_batch(81, 6));
  CHECK(first.n_plus == 6);  // no moving average yet: cosine gate inactive

  AdaptOutcome second = adapter->adapt_step(m, small_batch(82, 6));
  // with eps_cos = 0.99 most probability rows correlate with n_t above the
  // gate, so the selection must shrink
  CHECK(second.n_plus < 6);
}
