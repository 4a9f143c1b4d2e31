#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "dualtta/errors.hpp"
#include "dualtta/rng.hpp"
#include "dualtta/tape.hpp"

using namespace dualtta;
using namespace dualtta::ndgrad;

namespace {

// Loss = sum(op(params...) * W) with a fixed random weighting W, so backward
// errors cannot cancel in a plain sum.
ScalarTapeFn weighted_loss(OpKind k, OpAttrs attrs, Tensor weights,
                           std::vector<Tensor> extra_constants = {}) {
  return [k, attrs, weights, extra_constants](Tape& tape, std::span<const NodeId> leaves) {
    std::vector<NodeId> in(leaves.begin(), leaves.end());
    for (const Tensor& c : extra_constants) in.push_back(tape.leaf(c));
    NodeId y = tape.apply(k, std::span<const NodeId>(in.data(), in.size()), attrs);
    NodeId w = tape.leaf(weights);
    NodeId prod = tape.apply(OpKind::mul_elementwise, {y, w});
    return tape.apply(OpKind::reduce_sum, {prod});
  };
}

Tensor uniform_away_from(RngStream& rng, const Shape& shape, double lo, double hi) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = lo + (hi - lo) * rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("backward of linear map: sum(scale(x,3))") {
  Tape tape;
  NodeId x = tape.leaf(Tensor(Shape{4}, {1, 2, 3, 4}));
  OpAttrs a;
  a.scalar = 3.0;
  NodeId s = tape.apply(OpKind::scale, {x}, a);
  NodeId loss = tape.apply(OpKind::reduce_sum, {s});
  NodeId tr[] = {x};
  Gradients g = tape.backward(loss, tr);
  for (std::size_t i = 0; i < 4; ++i) CHECK(g.at(x)[i] == 3.0);
}

TEST_CASE("backward of x^2 at x=[1,2]") {
  Tape tape;
  NodeId x = tape.leaf(Tensor(Shape{2}, {1, 2}));
  NodeId sq = tape.apply(OpKind::mul_elementwise, {x, x});
  NodeId loss = tape.apply(OpKind::reduce_sum, {sq});
  NodeId tr[] = {x};
  Gradients g = tape.backward(loss, tr);
  CHECK(g.at(x)[0] == 2.0);
  CHECK(g.at(x)[1] == 4.0);
}

TEST_CASE("tape contract errors") {
  Tape tape;
  NodeId x = tape.leaf(Tensor(Shape{2}, {1, 2}));
  NodeId y = tape.apply(OpKind::relu, {x});
  NodeId tr[] = {x};
  CHECK_THROWS_AS(tape.backward(y, tr), ContractError);  // non-scalar loss

  Tape t2;
  NodeId a = t2.leaf(Tensor(Shape{2}, {1, 2}));
  NodeId s = t2.apply(OpKind::reduce_sum, {a});
  NodeId bad[] = {s};  // not a leaf
  CHECK_THROWS_AS(t2.backward(s, bad), ContractError);

  Tape t3;
  NodeId b = t3.leaf(Tensor(Shape{2}, {1, 2}));
  NodeId l = t3.apply(OpKind::reduce_sum, {b});
  NodeId tb[] = {b};
  t3.backward(l, tb);
  CHECK_THROWS_AS(t3.backward(l, tb), ContractError);  // consumable once
}

TEST_CASE("untouched trainables map to zeros") {
  Tape tape;
  NodeId x = tape.leaf(Tensor(Shape{2}, {1, 2}));
  NodeId unused = tape.leaf(Tensor(Shape{3}, {1, 1, 1}));
  NodeId loss = tape.apply(OpKind::reduce_sum, {x});
  NodeId tr[] = {x, unused};
  Gradients g = tape.backward(loss, tr);
  REQUIRE(g.size() == 2);
  CHECK(g.at(unused).shape() == Shape{3});
  for (std::size_t i = 0; i < 3; ++i) CHECK(g.at(unused)[i] == 0.0);
}

TEST_CASE("grad_check examples") {
  // quadratic f(p) = p^2 at p = 3
  ScalarTapeFn quad = [](Tape& t, std::span<const NodeId> leaves) {
    NodeId sq = t.apply(OpKind::mul_elementwise, {leaves[0], leaves[0]});
    return t.apply(OpKind::reduce_sum, {sq});
  };
  CHECK(grad_check(quad, {Tensor(Shape{1}, {3.0})}, 1e-5) < 1e-8);

  // entropy of softmax of a random 5-logit vector w.r.t. logits
  RngStream rng(42);
  Tensor logits = rng.gaussian_tensor(Shape{1, 5});
  ScalarTapeFn ent = [](Tape& t, std::span<const NodeId> leaves) {
    NodeId lp = t.apply(OpKind::log_softmax, {leaves[0]});
    NodeId p = t.apply(OpKind::exp, {lp});
    NodeId plp = t.apply(OpKind::mul_elementwise, {p, lp});
    NodeId s = t.apply(OpKind::reduce_sum, {plp});
    OpAttrs neg;
    neg.scalar = -1.0;
    return t.apply(OpKind::scale, {s}, neg);
  };
  CHECK(grad_check(ent, {logits}, 1e-5) < 1e-6);

  // relu away from the kink
  ScalarTapeFn rl = [](Tape& t, std::span<const NodeId> leaves) {
    NodeId r = t.apply(OpKind::relu, {leaves[0]});
    return t.apply(OpKind::reduce_sum, {r});
  };
  CHECK(grad_check(rl, {Tensor(Shape{1}, {1.0})}, 1e-5) < 1e-8);
}

TEST_CASE("grad_check rejects non-deterministic functions") {
  int calls = 0;
  ScalarTapeFn flaky = [&calls](Tape& t, std::span<const NodeId> leaves) {
    NodeId noise = t.leaf(Tensor(Shape{1}, {static_cast<double>(calls++)}));
    NodeId s = t.apply(OpKind::add, {leaves[0], noise});
    return t.apply(OpKind::reduce_sum, {s});
  };
  CHECK_THROWS_AS(grad_check(flaky, {Tensor(Shape{1}, {1.0})}, 1e-5), ContractError);
}

TEST_CASE("every primitive matches central finite differences") {
  constexpr int kInstances = 100;
  constexpr double kTol = 1e-4;
  RngStream root(2024);

  auto run = [&](const char* label, OpKind k, OpAttrs attrs,
                 std::function<std::vector<Tensor>(RngStream&)> gen_params, Shape out_shape,
                 std::vector<Tensor> constants = {}) {
    CAPTURE(label);
    double worst = 0.0;
    for (int i = 0; i < kInstances; ++i) {
      RngStream rng = root.split(label).split(static_cast<std::uint64_t>(i));
      std::vector<Tensor> params = gen_params(rng);
      Tensor w = uniform_away_from(rng, out_shape, -1.0, 1.0);
      double err = grad_check(weighted_loss(k, attrs, w, constants), params, 1e-5);
      worst = std::max(worst, err);
    }
    CHECK_MESSAGE(worst < kTol, label, " worst rel err ", worst);
  };

  auto gauss = [](RngStream& rng, Shape s) { return rng.gaussian_tensor(s); };

  run("add", OpKind::add, {},
      [&](RngStream& r) { return std::vector<Tensor>{gauss(r, {2, 3}), gauss(r, {2, 3})}; },
      Shape{2, 3});
  run("add_rowvec", OpKind::add, {},
      [&](RngStream& r) { return std::vector<Tensor>{gauss(r, {2, 3}), gauss(r, {3})}; },
      Shape{2, 3});
  run("sub", OpKind::sub, {},
      [&](RngStream& r) { return std::vector<Tensor>{gauss(r, {2, 3}), gauss(r, {2, 3})}; },
      Shape{2, 3});
  run("mul_elementwise", OpKind::mul_elementwise, {},
      [&](RngStream& r) { return std::vector<Tensor>{gauss(r, {2, 3}), gauss(r, {2, 3})}; },
      Shape{2, 3});
  {
    OpAttrs a;
    a.scalar = -1.7;
    run("scale", OpKind::scale, a,
        [&](RngStream& r) { return std::vector<Tensor>{gauss(r, {2, 3})}; }, Shape{2, 3});
  }
  run("matmul", OpKind::matmul, {},
      [&](RngStream& r) { return std::vector<Tensor>{gauss(r, {3, 4}), gauss(r, {4, 2})}; },
      Shape{3, 2});
  {
    OpAttrs a;
    a.pad = 1;
    run("conv2d", OpKind::conv2d, a,
        [&](RngStream& r) {
          return std::vector<Tensor>{gauss(r, {2, 2, 4, 4}), gauss(r, {3, 2, 3, 3}),
                                     gauss(r, {3})};
        },
        Shape{2, 3, 4, 4});
    OpAttrs a0;
    a0.pad = 0;
    run("conv2d_nopad", OpKind::conv2d, a0,
        [&](RngStream& r) {
          return std::vector<Tensor>{gauss(r, {1, 2, 4, 4}), gauss(r, {2, 2, 3, 3})};
        },
        Shape{1, 2, 2, 2});
  }
  run("relu", OpKind::relu, {},
      [&](RngStream& r) {
        Tensor t = r.gaussian_tensor(Shape{2, 3});
        for (std::size_t i = 0; i < t.numel(); ++i) {
          if (std::abs(t[i]) < 0.05) t[i] = t[i] < 0 ? t[i] - 0.1 : t[i] + 0.1;
        }
        return std::vector<Tensor>{t};
      },
      Shape{2, 3});
  run("avg_pool2d", OpKind::avg_pool2d, {},
      [&](RngStream& r) { return std::vector<Tensor>{gauss(r, {2, 3, 4, 4})}; },
      Shape{2, 3, 2, 2});
  run("global_avg_pool", OpKind::global_avg_pool, {},
      [&](RngStream& r) { return std::vector<Tensor>{gauss(r, {2, 3, 4, 4})}; }, Shape{2, 3});
  run("channel_affine", OpKind::channel_affine, {},
      [&](RngStream& r) {
        return std::vector<Tensor>{gauss(r, {2, 3, 2, 2}), gauss(r, {3}), gauss(r, {3})};
      },
      Shape{2, 3, 2, 2});
  {
    OpAttrs a;
    a.eps = 1e-5;
    run("batch_normalize", OpKind::batch_normalize, a,
        [&](RngStream& r) { return std::vector<Tensor>{gauss(r, {2, 3, 3, 3})}; },
        Shape{2, 3, 3, 3});
  }
  run("log_softmax", OpKind::log_softmax, {},
      [&](RngStream& r) { return std::vector<Tensor>{gauss(r, {4, 5})}; }, Shape{4, 5});
  run("exp", OpKind::exp, {},
      [&](RngStream& r) { return std::vector<Tensor>{uniform_away_from(r, {2, 3}, -2.0, 2.0)}; },
      Shape{2, 3});
  run("log_clamped", OpKind::log_clamped, {},
      [&](RngStream& r) { return std::vector<Tensor>{uniform_away_from(r, {2, 3}, 0.5, 2.0)}; },
      Shape{2, 3});
  run("reduce_sum", OpKind::reduce_sum, {},
      [&](RngStream& r) { return std::vector<Tensor>{gauss(r, {2, 3})}; }, Shape{1});
  run("reduce_mean", OpKind::reduce_mean, {},
      [&](RngStream& r) { return std::vector<Tensor>{gauss(r, {2, 3})}; }, Shape{1});
  {
    OpAttrs a;
    a.rows = {0, 2, 2, 3};
    run("select_rows", OpKind::select_rows, a,
        [&](RngStream& r) { return std::vector<Tensor>{gauss(r, {4, 3})}; }, Shape{4, 3});
  }
}
