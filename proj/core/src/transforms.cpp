#include "dualtta/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dualtta/errors.hpp"

namespace dualtta::transforms {

StyleStats instance_stats(const Tensor& z) {
  if (z.rank() != 4) throw ShapeError("instance_stats: input must be (B,C,H,W)");
  const std::size_t B = z.dim(0), C = z.dim(1), HW = z.dim(2) * z.dim(3);
  const double n = static_cast<double>(HW);
  StyleStats st;
  st.u = Tensor(Shape{B, C});
  st.s = Tensor(Shape{B, C});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* base = z.data() + (b * C + c) * HW;
      double sum = 0.0;
      for (std::size_t i = 0; i < HW; ++i) sum += base[i];
      const double mu = sum / n;
      double var = 0.0;
      for (std::size_t i = 0; i < HW; ++i) {
        const double d = base[i] - mu;
        var += d * d;
      }
      st.u.at2(b, c) = mu;
      st.s.at2(b, c) = std::sqrt(var / n);
    }
  }
  return st;
}

Tensor cross_batch_std(const Tensor& u) {
  if (u.rank() != 2) throw ShapeError("cross_batch_std: input must be (B,C)");
  const std::size_t B = u.dim(0), C = u.dim(1);
  Tensor out(Shape{C});
  for (std::size_t c = 0; c < C; ++c) {
    double sum = 0.0;
    for (std::size_t b = 0; b < B; ++b) sum += u.at2(b, c);
    const double mu = sum / static_cast<double>(B);
    double var = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const double d = u.at2(b, c) - mu;
      var += d * d;
    }
    out[c] = std::sqrt(var / static_cast<double>(B));
  }
  return out;
}

void fill_cross_batch_std(StyleStats& st) {
  st.u_sigma = cross_batch_std(st.u);
  st.s_sigma = cross_batch_std(st.s);
}

void apply_perturbation(StyleStats& st, const Tensor& eps_u, const Tensor& eps_s) {
  const std::size_t B = st.u.dim(0), C = st.u.dim(1);
  if (eps_u.numel() != B || eps_s.numel() != B) {
    throw ShapeError("apply_perturbation: eps must be (B,1)");
  }
  st.u_sp = Tensor(Shape{B, C});
  st.s_sp = Tensor(Shape{B, C});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      st.u_sp.at2(b, c) = st.u.at2(b, c) + eps_u[b] * st.u_sigma[c];
      st.s_sp.at2(b, c) = std::max(st.s.at2(b, c) + eps_s[b] * st.s_sigma[c], kStdFloor);
    }
  }
}

void perturb_stats(StyleStats& st, ndgrad::RngStream& rng) {
  if (st.u_sigma.numel() == 0) fill_cross_batch_std(st);
  const std::size_t B = st.u.dim(0);
  Tensor eps_u = rng.gaussian_tensor(Shape{B, 1});
  Tensor eps_s = rng.gaussian_tensor(Shape{B, 1});
  apply_perturbation(st, eps_u, eps_s);
}

Tensor restyle(const Tensor& z, const StyleStats& st) {
  const std::size_t B = z.dim(0), C = z.dim(1), HW = z.dim(2) * z.dim(3);
  if (st.u_sp.numel() != B * C) throw ContractError("restyle: perturbed stats not filled");
  Tensor out(z.shape());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double u = st.u.at2(b, c);
      const double s = std::max(st.s.at2(b, c), kStdFloor);
      const double ratio = st.s_sp.at2(b, c) / s;
      const double u_sp = st.u_sp.at2(b, c);
      const double* src = z.data() + (b * C + c) * HW;
      double* dst = out.data() + (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) dst[i] = (src[i] - u) * ratio + u_sp;
    }
  }
  return out;
}

model::StyleInjection make_style_injection(ndgrad::RngStream& rng) {
  return [&rng](const Tensor& z) {
    StyleStats st = instance_stats(z);
    fill_cross_batch_std(st);
    perturb_stats(st, rng);
    return restyle(z, st);
  };
}

Tensor patch_shuffle_with_perms(const Tensor& batch, std::size_t grid,
                                const std::vector<std::vector<std::size_t>>& perms) {
  if (batch.rank() != 4) throw ShapeError("patch_shuffle: input must be (B,C,H,W)");
  if (grid < 2) throw ContractError("patch_shuffle: grid must be >= 2");
  const std::size_t B = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  if (H < grid || W < grid) {
    throw ContractError("patch_shuffle: image " + std::to_string(H) + "x" + std::to_string(W) +
                        " smaller than " + std::to_string(grid) + "x" + std::to_string(grid) +
                        " grid");
  }
  const std::size_t ph = H / grid, pw = W / grid;  // patch size after center crop
  const std::size_t Hc = ph * grid, Wc = pw * grid;
  const std::size_t oh = (H - Hc) / 2, ow = (W - Wc) / 2;
  if (perms.size() != B) throw ContractError("patch_shuffle: need one permutation per sample");

  Tensor out(Shape{B, C, Hc, Wc});
  for (std::size_t b = 0; b < B; ++b) {
    const auto& perm = perms[b];
    if (perm.size() != grid * grid) {
      throw ContractError("patch_shuffle: permutation length mismatch");
    }
    for (std::size_t dst_idx = 0; dst_idx < perm.size(); ++dst_idx) {
      const std::size_t src_idx = perm[dst_idx];
      const std::size_t dr = dst_idx / grid, dc = dst_idx % grid;
      const std::size_t sr = src_idx / grid, sc = src_idx % grid;
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t r = 0; r < ph; ++r) {
          const double* src =
              batch.data() + ((b * C + c) * H + (oh + sr * ph + r)) * W + (ow + sc * pw);
          double* dst = out.data() + ((b * C + c) * Hc + (dr * ph + r)) * Wc + dc * pw;
          std::copy(src, src + pw, dst);
        }
      }
    }
  }
  return out;
}

Tensor patch_shuffle(const Tensor& batch, const ShuffleSpec& spec, ndgrad::RngStream& rng) {
  const std::size_t B = batch.dim(0);
  const std::size_t cells = spec.grid * spec.grid;
  auto is_identity = [](const std::vector<std::size_t>& p) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] != i) return false;
    }
    return true;
  };
  auto draw = [&]() {
    auto p = rng.permutation(cells);
    if (is_identity(p)) p = rng.permutation(cells);  // resample once
    return p;
  };
  std::vector<std::vector<std::size_t>> perms;
  perms.reserve(B);
  if (spec.share_permutation) {
    auto shared = draw();
    for (std::size_t b = 0; b < B; ++b) perms.push_back(shared);
  } else {
    for (std::size_t b = 0; b < B; ++b) perms.push_back(draw());
  }
  return patch_shuffle_with_perms(batch, spec.grid, perms);
}

}  // namespace dualtta::transforms
