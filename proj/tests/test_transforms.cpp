#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dualtta/errors.hpp"
#include "dualtta/transforms.hpp"

using namespace dualtta;
using namespace dualtta::transforms;

namespace {

// Independent two-pass mean/std oracle used to pin instance_stats and
// cross_batch_std; deliberately does not share code with the implementation.
void brute_force_stats(const Tensor& z, Tensor& u, Tensor& s) {
  const std::size_t B = z.dim(0), C = z.dim(1), H = z.dim(2), W = z.dim(3);
  u = Tensor(Shape{B, C});
  s = Tensor(Shape{B, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) acc += z.at4(b, c, h, w);
      const double mean = acc / static_cast<double>(H * W);
      double var = 0.0;
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const double d = z.at4(b, c, h, w) - mean;
          var += d * d;
        }
      u.at2(b, c) = mean;
      s.at2(b, c) = std::sqrt(var / static_cast<double>(H * W));
    }
}

}  // namespace

TEST_CASE("instance_stats on constant and two-point maps") {
  Tensor z = Tensor::full(Shape{2, 3, 4, 4}, 5.0);
  StyleStats st = instance_stats(z);
  for (std::size_t i = 0; i < st.u.numel(); ++i) {
    CHECK(st.u[i] == 5.0);
    CHECK(st.s[i] == 0.0);
  }

  Tensor two(Shape{1, 1, 1, 2}, {1.0, 3.0});
  StyleStats st2 = instance_stats(two);
  CHECK(st2.u[0] == 2.0);
  CHECK(st2.s[0] == 1.0);
}

TEST_CASE("instance_stats matches the two-pass oracle on 1000 random maps") {
  ndgrad::RngStream root(314);
  double max_err = 0.0;
  for (int i = 0; i < 1000; ++i) {
    ndgrad::RngStream rng = root.split(static_cast<std::uint64_t>(i));
    Tensor z = rng.gaussian_tensor(Shape{3, 4, 5, 6});
    for (std::size_t j = 0; j < z.numel(); ++j) z[j] = 2.0 * z[j] - 0.7;
    StyleStats st = instance_stats(z);
    Tensor u, s;
    brute_force_stats(z, u, s);
    for (std::size_t j = 0; j < u.numel(); ++j) {
      max_err = std::max(max_err, std::abs(st.u[j] - u[j]));
      max_err = std::max(max_err, std::abs(st.s[j] - s[j]));
    }
  }
  CHECK(max_err < 1e-12);
}

TEST_CASE("cross_batch_std") {
  Tensor u(Shape{2, 1}, {2.0, 4.0});
  Tensor sig = cross_batch_std(u);
  CHECK(sig[0] == doctest::Approx(1.0).epsilon(1e-15));

  Tensor single(Shape{1, 3}, {1.0, 2.0, 3.0});
  Tensor z = cross_batch_std(single);
  for (std::size_t i = 0; i < 3; ++i) CHECK(z[i] == 0.0);

  ndgrad::RngStream rng(17);
  Tensor r = rng.gaussian_tensor(Shape{7, 5});
  Tensor got = cross_batch_std(r);
  for (std::size_t c = 0; c < 5; ++c) {
    double mean = 0.0;
    for (std::size_t b = 0; b < 7; ++b) mean += r.at2(b, c) / 7.0;
    double var = 0.0;
    for (std::size_t b = 0; b < 7; ++b) var += (r.at2(b, c) - mean) * (r.at2(b, c) - mean) / 7.0;
    CHECK(std::abs(got[c] - std::sqrt(var)) < 1e-12);
  }
}

TEST_CASE("perturbation with zero noise") {
  ndgrad::RngStream rng(5);
  Tensor z = rng.gaussian_tensor(Shape{3, 2, 4, 4});
  StyleStats st = instance_stats(z);
  fill_cross_batch_std(st);
  apply_perturbation(st, Tensor(Shape{3, 1}), Tensor(Shape{3, 1}));
  for (std::size_t i = 0; i < st.u.numel(); ++i) {
    CHECK(st.u_sp[i] == st.u[i]);
    CHECK(st.s_sp[i] == std::max(st.s[i], kStdFloor));
  }
}

TEST_CASE("B=1 perturbation is inert regardless of noise") {
  ndgrad::RngStream rng(6);
  Tensor z = rng.gaussian_tensor(Shape{1, 3, 4, 4});
  StyleStats st = instance_stats(z);
  fill_cross_batch_std(st);
  ndgrad::RngStream noise(99);
  perturb_stats(st, noise);
  for (std::size_t i = 0; i < st.u.numel(); ++i) {
    CHECK(st.u_sp[i] == st.u[i]);  // sigma is 0 for a single instance
  }
}

TEST_CASE("perturbation noise scale over 1e4 draws") {
  // u_sigma = 1 for one channel: sample std of (u_sp - u) should be ~1
  StyleStats st;
  const std::size_t n = 10000;
  st.u = Tensor(Shape{n, 1});
  st.s = Tensor::full(Shape{n, 1}, 1.0);
  st.u_sigma = Tensor::full(Shape{1}, 1.0);
  st.s_sigma = Tensor(Shape{1});
  ndgrad::RngStream rng(2024);
  perturb_stats(st, rng);
  double mean = 0.0, var = 0.0;
  for (std::size_t b = 0; b < n; ++b) mean += st.u_sp.at2(b, 0) / n;
  for (std::size_t b = 0; b < n; ++b) {
    const double d = st.u_sp.at2(b, 0) - mean;
    var += d * d / n;
  }
  const double sd = std::sqrt(var);
  CHECK(sd > 0.97);
  CHECK(sd < 1.03);
}

TEST_CASE("restyle identities") {
  ndgrad::RngStream rng(8);
  Tensor z = rng.gaussian_tensor(Shape{2, 3, 5, 5});
  StyleStats st = instance_stats(z);
  fill_cross_batch_std(st);
  st.u_sp = st.u;
  st.s_sp = st.s;

  SUBCASE("u_sp=u, s_sp=s reproduces z") {
    Tensor back = restyle(z, st);
    for (std::size_t i = 0; i < z.numel(); ++i) CHECK(std::abs(back[i] - z[i]) < 1e-12);
  }
  SUBCASE("restyled map carries the target statistics") {
    ndgrad::RngStream noise(31);
    perturb_stats(st, noise);
    Tensor styled = restyle(z, st);
    StyleStats check = instance_stats(styled);
    for (std::size_t i = 0; i < check.u.numel(); ++i) {
      CHECK(std::abs(check.u[i] - st.u_sp[i]) < 1e-9);
      CHECK(std::abs(check.s[i] - st.s_sp[i]) < 1e-9);
    }
  }
  SUBCASE("constant channel maps to u_sp everywhere") {
    Tensor flat = Tensor::full(Shape{1, 1, 3, 3}, 2.5);
    StyleStats fst = instance_stats(flat);
    fill_cross_batch_std(fst);
    fst.u_sp = Tensor::full(Shape{1, 1}, -1.25);
    fst.s_sp = Tensor::full(Shape{1, 1}, 0.5);
    Tensor styled = restyle(flat, fst);
    for (std::size_t i = 0; i < styled.numel(); ++i) {
      CHECK(styled[i] == doctest::Approx(-1.25).epsilon(1e-12));
    }
  }
}

TEST_CASE("patch_shuffle with an explicit permutation") {
  // 2x2 image, P=2: patches are single pixels; permutation (0<->3, 1<->2)
  Tensor img(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor out = patch_shuffle_with_perms(img, 2, {{3, 2, 1, 0}});
  CHECK(out.at4(0, 0, 0, 0) == 4.0);
  CHECK(out.at4(0, 0, 0, 1) == 3.0);
  CHECK(out.at4(0, 0, 1, 0) == 2.0);
  CHECK(out.at4(0, 0, 1, 1) == 1.0);
}

TEST_CASE("patch_shuffle preserves per-sample pixel multisets") {
  ndgrad::RngStream root(404);
  ShuffleSpec spec;
  spec.grid = 4;
  for (int trial = 0; trial < 20; ++trial) {
    ndgrad::RngStream rng = root.split(static_cast<std::uint64_t>(trial));
    Tensor batch = rng.gaussian_tensor(Shape{3, 3, 28, 28});
    ndgrad::RngStream shuffle_rng = root.split("shuffle").split(static_cast<std::uint64_t>(trial));
    Tensor out = patch_shuffle(batch, spec, shuffle_rng);
    REQUIRE(out.shape() == batch.shape());  // 28 divisible by 4
    const std::size_t px = 28 * 28;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t c = 0; c < 3; ++c) {
        std::vector<double> before(batch.data() + (b * 3 + c) * px,
                                   batch.data() + (b * 3 + c + 1) * px);
        std::vector<double> after(out.data() + (b * 3 + c) * px,
                                  out.data() + (b * 3 + c + 1) * px);
        std::sort(before.begin(), before.end());
        std::sort(after.begin(), after.end());
        CHECK(before == after);
      }
  }
}

TEST_CASE("patch_shuffle keeps sample order and is seeded") {
  ndgrad::RngStream a(1), b(1);
  Tensor batch(Shape{2, 1, 4, 4});
  for (std::size_t i = 0; i < batch.numel(); ++i) batch[i] = static_cast<double>(i);
  ShuffleSpec spec;
  spec.grid = 2;
  Tensor o1 = patch_shuffle(batch, spec, a);
  Tensor o2 = patch_shuffle(batch, spec, b);
  CHECK(o1.values() == o2.values());

  // sample 0's pixels stay in sample 0
  std::vector<double> s0(o1.data(), o1.data() + 16);
  std::sort(s0.begin(), s0.end());
  for (std::size_t i = 0; i < 16; ++i) CHECK(s0[i] == static_cast<double>(i));
}

TEST_CASE("patch_shuffle rejects the identity permutation") {
  ndgrad::RngStream rng(3);
  ShuffleSpec spec;
  spec.grid = 4;
  Tensor batch(Shape{1, 1, 28, 28});
  for (std::size_t i = 0; i < batch.numel(); ++i) batch[i] = static_cast<double>(i);
  int identical = 0;
  for (int t = 0; t < 50; ++t) {
    Tensor out = patch_shuffle(batch, spec, rng);
    if (out.values() == batch.values()) ++identical;
  }
  CHECK(identical == 0);  // identity chance after one resample: (1/16!)^2 per draw
}

TEST_CASE("patch_shuffle error and crop behavior") {
  ndgrad::RngStream rng(4);
  ShuffleSpec spec;
  spec.grid = 4;
  Tensor tiny(Shape{1, 1, 3, 3});
  CHECK_THROWS_AS(patch_shuffle(tiny, spec, rng), ContractError);

  Tensor odd(Shape{1, 1, 30, 30});
  Tensor out = patch_shuffle(odd, spec, rng);  // center crop to 28x28
  CHECK(out.shape() == Shape{1, 1, 28, 28});
}
