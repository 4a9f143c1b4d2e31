#pragma once

#include <vector>

#include "dualtta/model.hpp"
#include "dualtta/rng.hpp"
#include "dualtta/tensor.hpp"

namespace dualtta::transforms {

inline constexpr double kStdFloor = 1e-5;

// Per-instance channel statistics of a (B,C,H,W) feature map and their
// perturbed counterparts.
struct StyleStats {
  Tensor u;        // (B,C) channel means
  Tensor s;        // (B,C) channel standard deviations (population, divisor H*W)
  Tensor u_sigma;  // (C) std of u across the batch (population, divisor B)
  Tensor s_sigma;  // (C) std of s across the batch
  Tensor u_sp;     // (B,C) perturbed means
  Tensor s_sp;     // (B,C) perturbed stds, floored at kStdFloor
};

// u(b,c) = mean over (h,w); s(b,c) = population std over (h,w).
StyleStats instance_stats(const Tensor& z);

// Population std across the batch axis per channel; B=1 gives zeros.
Tensor cross_batch_std(const Tensor& u);

void fill_cross_batch_std(StyleStats& st);

// u_sp = u + eps_u * u_sigma, s_sp = max(s + eps_s * s_sigma, kStdFloor),
// with eps_u, eps_s (B,1) standard normal scalars broadcast across channels.
void perturb_stats(StyleStats& st, ndgrad::RngStream& rng);

// Deterministic core of perturb_stats; exposed so tests can force eps = 0.
void apply_perturbation(StyleStats& st, const Tensor& eps_u, const Tensor& eps_s);

// z_sp = (z - u) * s_sp / max(s, kStdFloor) + u_sp
Tensor restyle(const Tensor& z, const StyleStats& st);

// Ready-made style injection closure for model::forward: computes instance
// statistics of the intercepted feature map, perturbs them with draws from
// `rng`, and re-styles the features.
model::StyleInjection make_style_injection(ndgrad::RngStream& rng);

struct ShuffleSpec {
  std::size_t grid = 4;            // patches per side; P >= 2
  bool share_permutation = false;  // one permutation for the whole batch
};

// Per-sample patch shuffle after a center crop to dimensions divisible by the
// grid. The identity permutation is resampled once. Channels move together
// and the per-sample pixel multiset is preserved exactly.
Tensor patch_shuffle(const Tensor& batch, const ShuffleSpec& spec, ndgrad::RngStream& rng);

// Deterministic core, one permutation of grid*grid patch indices per sample.
Tensor patch_shuffle_with_perms(const Tensor& batch, std::size_t grid,
                                const std::vector<std::vector<std::size_t>>& perms);

}  // namespace dualtta::transforms
