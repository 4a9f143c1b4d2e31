#include "dualtta/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dualtta/errors.hpp"

namespace dualtta::ndgrad {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

void require_arity(OpKind k, std::span<const Tensor* const> in, std::size_t lo, std::size_t hi) {
  if (in.size() < lo || in.size() > hi) {
    throw ShapeError(std::string(op_name(k)) + ": expected " + std::to_string(lo) +
                     (hi != lo ? ".." + std::to_string(hi) : "") + " inputs, got " +
                     std::to_string(in.size()));
  }
}

void check_finite(OpKind k, const Tensor& out) {
  if (!out.all_finite()) {
    throw NumericError(std::string("non-finite output in op '") + op_name(k) + "'");
  }
}

bool is_rowvec_broadcast(const Tensor& a, const Tensor& b) {
  return b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0) && !a.same_shape(b);
}

}  // namespace

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul_elementwise: return "mul_elementwise";
    case OpKind::scale: return "scale";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::avg_pool2d: return "avg_pool2d";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::channel_affine: return "channel_affine";
    case OpKind::batch_normalize: return "batch_normalize";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::exp: return "exp";
    case OpKind::log_clamped: return "log_clamped";
    case OpKind::reduce_sum: return "reduce_sum";
    case OpKind::reduce_mean: return "reduce_mean";
    case OpKind::select_rows: return "select_rows";
    case OpKind::leaf: return "leaf";
  }
  return "?";
}

namespace {

Tensor fw_add(const Tensor& a, const Tensor& b) {
  if (a.same_shape(b)) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
  }
  if (is_rowvec_broadcast(a, b)) {  // (.., K) + (K)
    Tensor out(a.shape());
    const std::size_t k = b.dim(0);
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i % k];
    return out;
  }
  throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
}

Tensor fw_matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// Zero-padded copy of one (H,W) plane into a (H+2p, W+2p) scratch buffer.
void pad_plane(const double* src, std::size_t H, std::size_t W, std::size_t p, double* dst) {
  const std::size_t Wp = W + 2 * p;
  std::fill(dst, dst + (H + 2 * p) * Wp, 0.0);
  for (std::size_t h = 0; h < H; ++h) {
    std::copy(src + h * W, src + (h + 1) * W, dst + (h + p) * Wp + p);
  }
}

Tensor fw_conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, std::size_t pad) {
  require(x.rank() == 4 && w.rank() == 4, "conv2d: input and kernel must be rank 4");
  require(x.dim(1) == w.dim(1), "conv2d: channel mismatch, input " + shape_str(x.shape()) +
                                    " kernel " + shape_str(w.shape()));
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  require(H + 2 * pad >= kh && W + 2 * pad >= kw, "conv2d: kernel larger than padded input");
  const std::size_t Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1;
  if (bias) {
    require(bias->rank() == 1 && bias->dim(0) == Co,
            "conv2d: bias shape " + shape_str(bias->shape()) + " does not match out channels");
  }
  Tensor out(Shape{B, Co, Ho, Wo});
  const std::size_t Hp = H + 2 * pad, Wp = W + 2 * pad;
  // Parallel over samples: each output element is written by exactly one
  // thread, so results are bitwise independent of the thread count.
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> padded(Ci * Hp * Wp);
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      pad_plane(x.data() + (b * Ci + ci) * H * W, H, W, pad, padded.data() + ci * Hp * Wp);
    }
    for (std::size_t co = 0; co < Co; ++co) {
      double* out_plane = out.data() + (b * Co + co) * Ho * Wo;
      if (bias) {
        std::fill(out_plane, out_plane + Ho * Wo, (*bias)[co]);
      }
      // shift-and-accumulate: one contiguous row pass per kernel tap
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* plane = padded.data() + ci * Hp * Wp;
        for (std::size_t r = 0; r < kh; ++r) {
          for (std::size_t c = 0; c < kw; ++c) {
            const double wv = w.at4(co, ci, r, c);
            if (wv == 0.0) continue;
            for (std::size_t oh = 0; oh < Ho; ++oh) {
              const double* srow = plane + (oh + r) * Wp + c;
              double* drow = out_plane + oh * Wo;
              for (std::size_t ow = 0; ow < Wo; ++ow) drow[ow] += wv * srow[ow];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor fw_avg_pool2d(const Tensor& x) {
  require(x.rank() == 4, "avg_pool2d: input must be rank 4");
  require(x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0,
          "avg_pool2d: spatial dims must be even, got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), Ho = x.dim(2) / 2, Wo = x.dim(3) / 2;
  Tensor out(Shape{B, C, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < Ho; ++h)
        for (std::size_t w = 0; w < Wo; ++w)
          out.at4(b, c, h, w) = 0.25 * (x.at4(b, c, 2 * h, 2 * w) + x.at4(b, c, 2 * h, 2 * w + 1) +
                                        x.at4(b, c, 2 * h + 1, 2 * w) +
                                        x.at4(b, c, 2 * h + 1, 2 * w + 1));
  return out;
}

Tensor fw_global_avg_pool(const Tensor& x) {
  require(x.rank() == 4, "global_avg_pool: input must be rank 4");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out(Shape{B, C});
  const double inv = 1.0 / static_cast<double>(HW);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* base = x.data() + (b * C + c) * HW;
      double acc = 0.0;
      for (std::size_t i = 0; i < HW; ++i) acc += base[i];
      out.at2(b, c) = acc * inv;
    }
  }
  return out;
}

Tensor fw_channel_affine(const Tensor& x, const Tensor& g, const Tensor& be) {
  require(x.rank() == 4, "channel_affine: input must be rank 4");
  const std::size_t C = x.dim(1);
  require(g.rank() == 1 && g.dim(0) == C && be.rank() == 1 && be.dim(0) == C,
          "channel_affine: scale/shift must be (C) with C=" + std::to_string(C));
  Tensor out(x.shape());
  const std::size_t B = x.dim(0), HW = x.dim(2) * x.dim(3);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double gc = g[c], bc = be[c];
      const double* src = x.data() + (b * C + c) * HW;
      double* dst = out.data() + (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) dst[i] = src[i] * gc + bc;
    }
  }
  return out;
}

// Per-channel statistics over (B, H, W); population variance, floored at eps.
void batch_stats(const Tensor& x, double eps, Tensor& mean, Tensor& var, Tensor& inv_std) {
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const double n = static_cast<double>(B * HW);
  mean = Tensor(Shape{C});
  var = Tensor(Shape{C});
  inv_std = Tensor(Shape{C});
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const double* base = x.data() + (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) s += base[i];
    }
    const double mu = s / n;
    double v = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const double* base = x.data() + (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const double d = base[i] - mu;
        v += d * d;
      }
    }
    v /= n;
    mean[c] = mu;
    var[c] = v;
    inv_std[c] = 1.0 / std::sqrt(std::max(v, eps));
  }
}

Tensor fw_batch_normalize(const Tensor& x, double eps, SavedContext* ctx) {
  require(x.rank() == 4, "batch_normalize: input must be rank 4");
  Tensor mean, var, inv_std;
  batch_stats(x, eps, mean, var, inv_std);
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out(x.shape());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double mu = mean[c], is = inv_std[c];
      const double* src = x.data() + (b * C + c) * HW;
      double* dst = out.data() + (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) dst[i] = (src[i] - mu) * is;
    }
  }
  if (ctx) ctx->extra = {mean, var, inv_std};
  return out;
}

Tensor fw_log_softmax(const Tensor& x) {
  require(x.rank() >= 1, "log_softmax: input must have rank >= 1");
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.numel() / k;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = x.data() + r * k;
    double* dst = out.data() + r * k;
    double m = src[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, src[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(src[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) dst[j] = src[j] - lse;
  }
  return out;
}

Tensor fw_select_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  require(x.rank() >= 1, "select_rows: input must have rank >= 1");
  const std::size_t R = x.dim(0), stride = x.numel() / R;
  for (std::size_t r : rows) {
    require(r < R, "select_rows: row index " + std::to_string(r) + " out of range " +
                       std::to_string(R));
  }
  Shape os = x.shape();
  os[0] = rows.size();
  Tensor out(os);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double* src = x.data() + rows[i] * stride;
    std::copy(src, src + stride, out.data() + i * stride);
  }
  return out;
}

}  // namespace

Tensor apply(OpKind k, std::span<const Tensor* const> in, const OpAttrs& attrs,
             SavedContext* ctx) {
  Tensor out;
  switch (k) {
    case OpKind::add:
      require_arity(k, in, 2, 2);
      out = fw_add(*in[0], *in[1]);
      break;
    case OpKind::sub: {
      require_arity(k, in, 2, 2);
      const Tensor &a = *in[0], &b = *in[1];
      require(a.same_shape(b), "sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                                   shape_str(b.shape()));
      out = Tensor(a.shape());
      for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
      break;
    }
    case OpKind::mul_elementwise: {
      require_arity(k, in, 2, 2);
      const Tensor &a = *in[0], &b = *in[1];
      require(a.same_shape(b), "mul_elementwise: shape mismatch " + shape_str(a.shape()) +
                                   " vs " + shape_str(b.shape()));
      out = Tensor(a.shape());
      for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
      break;
    }
    case OpKind::scale: {
      require_arity(k, in, 1, 1);
      const Tensor& a = *in[0];
      out = Tensor(a.shape());
      for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * attrs.scalar;
      break;
    }
    case OpKind::matmul:
      require_arity(k, in, 2, 2);
      out = fw_matmul(*in[0], *in[1]);
      break;
    case OpKind::conv2d:
      require_arity(k, in, 2, 3);
      out = fw_conv2d(*in[0], *in[1], in.size() == 3 ? in[2] : nullptr, attrs.pad);
      break;
    case OpKind::relu: {
      require_arity(k, in, 1, 1);
      const Tensor& a = *in[0];
      out = Tensor(a.shape());
      for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
      break;
    }
    case OpKind::avg_pool2d:
      require_arity(k, in, 1, 1);
      out = fw_avg_pool2d(*in[0]);
      break;
    case OpKind::global_avg_pool:
      require_arity(k, in, 1, 1);
      out = fw_global_avg_pool(*in[0]);
      break;
    case OpKind::channel_affine:
      require_arity(k, in, 3, 3);
      out = fw_channel_affine(*in[0], *in[1], *in[2]);
      break;
    case OpKind::batch_normalize:
      require_arity(k, in, 1, 1);
      out = fw_batch_normalize(*in[0], attrs.eps, ctx);
      break;
    case OpKind::log_softmax:
      require_arity(k, in, 1, 1);
      out = fw_log_softmax(*in[0]);
      break;
    case OpKind::exp: {
      require_arity(k, in, 1, 1);
      const Tensor& a = *in[0];
      out = Tensor(a.shape());
      for (std::size_t i = 0; i < a.numel(); ++i) out[i] = std::exp(a[i]);
      break;
    }
    case OpKind::log_clamped: {
      require_arity(k, in, 1, 1);
      const Tensor& a = *in[0];
      out = Tensor(a.shape());
      for (std::size_t i = 0; i < a.numel(); ++i)
        out[i] = std::log(std::max(a[i], attrs.clamp_floor));
      break;
    }
    case OpKind::reduce_sum: {
      require_arity(k, in, 1, 1);
      double s = 0.0;
      for (std::size_t i = 0; i < in[0]->numel(); ++i) s += (*in[0])[i];
      out = Tensor::scalar(s);
      break;
    }
    case OpKind::reduce_mean: {
      require_arity(k, in, 1, 1);
      double s = 0.0;
      for (std::size_t i = 0; i < in[0]->numel(); ++i) s += (*in[0])[i];
      out = Tensor::scalar(s / static_cast<double>(in[0]->numel()));
      break;
    }
    case OpKind::select_rows:
      require_arity(k, in, 1, 1);
      out = fw_select_rows(*in[0], attrs.rows);
      break;
    case OpKind::leaf:
      throw ContractError("leaf is not an applicable op");
  }
  check_finite(k, out);
  return out;
}

std::vector<Tensor> backward_rule(OpKind k, std::span<const Tensor* const> in,
                                  const Tensor& output, const SavedContext& ctx,
                                  const Tensor& g, const OpAttrs& attrs) {
  switch (k) {
    case OpKind::add: {
      const Tensor &a = *in[0], &b = *in[1];
      Tensor da = g;
      if (a.same_shape(b)) return {da, g};
      // row-vector broadcast: reduce over leading dims
      Tensor db(b.shape());
      const std::size_t kk = b.dim(0);
      for (std::size_t i = 0; i < g.numel(); ++i) db[i % kk] += g[i];
      return {da, db};
    }
    case OpKind::sub: {
      Tensor db(g.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) db[i] = -g[i];
      return {g, db};
    }
    case OpKind::mul_elementwise: {
      const Tensor &a = *in[0], &b = *in[1];
      Tensor da(a.shape()), db(b.shape());
      for (std::size_t i = 0; i < a.numel(); ++i) {
        da[i] = g[i] * b[i];
        db[i] = g[i] * a[i];
      }
      return {da, db};
    }
    case OpKind::scale: {
      Tensor da(g.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) da[i] = g[i] * attrs.scalar;
      return {da};
    }
    case OpKind::matmul: {
      const Tensor &a = *in[0], &b = *in[1];
      const std::size_t m = a.dim(0), kk = a.dim(1), n = b.dim(1);
      Tensor da(a.shape()), db(b.shape());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gv = g[i * n + j];
          for (std::size_t p = 0; p < kk; ++p) {
            da[i * kk + p] += gv * b[p * n + j];
            db[p * n + j] += gv * a[i * kk + p];
          }
        }
      return {da, db};
    }
    case OpKind::conv2d: {
      const Tensor &x = *in[0], &w = *in[1];
      const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
      const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
      const std::size_t Ho = g.dim(2), Wo = g.dim(3);
      const std::size_t pad = attrs.pad;
      const std::size_t Hp = H + 2 * pad, Wp = W + 2 * pad;
      Tensor dx(x.shape()), dw(w.shape());
      // per-sample kernel-gradient slabs, reduced in fixed order afterwards so
      // the result is bitwise independent of the thread count
      std::vector<double> dw_per_b(B * w.numel(), 0.0);
#pragma omp parallel for schedule(static)
      for (std::size_t b = 0; b < B; ++b) {
        std::vector<double> xpad(Ci * Hp * Wp);
        std::vector<double> dxpad(Ci * Hp * Wp, 0.0);
        for (std::size_t ci = 0; ci < Ci; ++ci) {
          pad_plane(x.data() + (b * Ci + ci) * H * W, H, W, pad, xpad.data() + ci * Hp * Wp);
        }
        double* dwb = dw_per_b.data() + b * w.numel();
        for (std::size_t co = 0; co < Co; ++co) {
          const double* gplane = g.data() + (b * Co + co) * Ho * Wo;
          for (std::size_t ci = 0; ci < Ci; ++ci) {
            double* dplane = dxpad.data() + ci * Hp * Wp;
            const double* plane = xpad.data() + ci * Hp * Wp;
            for (std::size_t r = 0; r < kh; ++r) {
              for (std::size_t c = 0; c < kw; ++c) {
                const double wv = w.at4(co, ci, r, c);
                double wacc = 0.0;
                for (std::size_t oh = 0; oh < Ho; ++oh) {
                  const double* grow = gplane + oh * Wo;
                  const double* srow = plane + (oh + r) * Wp + c;
                  double* drow = dplane + (oh + r) * Wp + c;
                  for (std::size_t ow = 0; ow < Wo; ++ow) {
                    drow[ow] += wv * grow[ow];
                    wacc += grow[ow] * srow[ow];
                  }
                }
                dwb[((co * Ci + ci) * kh + r) * kw + c] += wacc;
              }
            }
          }
        }
        // crop the padded input gradient back to (H, W)
        for (std::size_t ci = 0; ci < Ci; ++ci) {
          const double* dplane = dxpad.data() + ci * Hp * Wp;
          double* dst = dx.data() + (b * Ci + ci) * H * W;
          for (std::size_t h = 0; h < H; ++h) {
            const double* srow = dplane + (h + pad) * Wp + pad;
            for (std::size_t wcol = 0; wcol < W; ++wcol) dst[h * W + wcol] += srow[wcol];
          }
        }
      }
      for (std::size_t b = 0; b < B; ++b) {
        const double* dwb = dw_per_b.data() + b * w.numel();
        for (std::size_t i = 0; i < w.numel(); ++i) dw[i] += dwb[i];
      }
      if (in.size() == 3) {
        Tensor db(Shape{Co});
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t i = 0; i < Ho * Wo; ++i)
              db[co] += g.data()[(b * Co + co) * Ho * Wo + i];
        return {dx, dw, db};
      }
      return {dx, dw};
    }
    case OpKind::relu: {
      const Tensor& x = *in[0];
      Tensor dx(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) dx[i] = x[i] > 0.0 ? g[i] : 0.0;
      return {dx};
    }
    case OpKind::avg_pool2d: {
      const Tensor& x = *in[0];
      const std::size_t B = x.dim(0), C = x.dim(1), Ho = g.dim(2), Wo = g.dim(3);
      Tensor dx(x.shape());
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t h = 0; h < Ho; ++h)
            for (std::size_t w = 0; w < Wo; ++w) {
              const double gv = 0.25 * g.at4(b, c, h, w);
              dx.at4(b, c, 2 * h, 2 * w) += gv;
              dx.at4(b, c, 2 * h, 2 * w + 1) += gv;
              dx.at4(b, c, 2 * h + 1, 2 * w) += gv;
              dx.at4(b, c, 2 * h + 1, 2 * w + 1) += gv;
            }
      return {dx};
    }
    case OpKind::global_avg_pool: {
      const Tensor& x = *in[0];
      const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
      const double inv = 1.0 / static_cast<double>(HW);
      Tensor dx(x.shape());
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const double gv = g.at2(b, c) * inv;
          double* base = dx.data() + (b * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) base[i] = gv;
        }
      return {dx};
    }
    case OpKind::channel_affine: {
      const Tensor &x = *in[0], &ga = *in[1];
      const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
      Tensor dx(x.shape()), dgamma(Shape{C}), dbeta(Shape{C});
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const double gc = ga[c];
          const double* gs = g.data() + (b * C + c) * HW;
          const double* xs = x.data() + (b * C + c) * HW;
          double* ds = dx.data() + (b * C + c) * HW;
          double sg = 0.0, sgx = 0.0;
          for (std::size_t i = 0; i < HW; ++i) {
            ds[i] = gs[i] * gc;
            sg += gs[i];
            sgx += gs[i] * xs[i];
          }
          dgamma[c] += sgx;
          dbeta[c] += sg;
        }
      return {dx, dgamma, dbeta};
    }
    case OpKind::batch_normalize: {
      // Differentiates through the batch mean and variance. With
      // x_hat = (x - mu) * inv_std and n = B*H*W per channel:
      //   dx = inv_std/n * (n*g - sum(g) - x_hat * sum(g * x_hat))
      // When the variance sits at the floor, inv_std is constant in x and
      // only the mean term remains.
      const Tensor& x = *in[0];
      const Tensor& var = ctx.extra[1];
      const Tensor& inv_std = ctx.extra[2];
      const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
      const double n = static_cast<double>(B * HW);
      Tensor dx(x.shape());
      for (std::size_t c = 0; c < C; ++c) {
        double sg = 0.0, sgx = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
          const double* gs = g.data() + (b * C + c) * HW;
          const double* os = output.data() + (b * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) {
            sg += gs[i];
            sgx += gs[i] * os[i];
          }
        }
        const bool var_active = var[c] > attrs.eps;
        const double is = inv_std[c];
        for (std::size_t b = 0; b < B; ++b) {
          const double* gs = g.data() + (b * C + c) * HW;
          const double* os = output.data() + (b * C + c) * HW;
          double* ds = dx.data() + (b * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) {
            if (var_active) {
              ds[i] = is / n * (n * gs[i] - sg - os[i] * sgx);
            } else {
              ds[i] = is * (gs[i] - sg / n);
            }
          }
        }
      }
      return {dx};
    }
    case OpKind::log_softmax: {
      // dx = g - softmax(x) * sum_row(g); softmax = exp(output)
      const std::size_t kk = output.shape().back();
      const std::size_t rows = output.numel() / kk;
      Tensor dx(output.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gs = g.data() + r * kk;
        const double* os = output.data() + r * kk;
        double* ds = dx.data() + r * kk;
        double sg = 0.0;
        for (std::size_t j = 0; j < kk; ++j) sg += gs[j];
        for (std::size_t j = 0; j < kk; ++j) ds[j] = gs[j] - std::exp(os[j]) * sg;
      }
      return {dx};
    }
    case OpKind::exp: {
      Tensor dx(output.shape());
      for (std::size_t i = 0; i < output.numel(); ++i) dx[i] = g[i] * output[i];
      return {dx};
    }
    case OpKind::log_clamped: {
      const Tensor& x = *in[0];
      Tensor dx(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i)
        dx[i] = x[i] > attrs.clamp_floor ? g[i] / x[i] : 0.0;
      return {dx};
    }
    case OpKind::reduce_sum: {
      const Tensor& x = *in[0];
      return {Tensor::full(x.shape(), g[0])};
    }
    case OpKind::reduce_mean: {
      const Tensor& x = *in[0];
      return {Tensor::full(x.shape(), g[0] / static_cast<double>(x.numel()))};
    }
    case OpKind::select_rows: {
      const Tensor& x = *in[0];
      const std::size_t stride = x.numel() / x.dim(0);
      Tensor dx(x.shape());
      for (std::size_t i = 0; i < attrs.rows.size(); ++i) {
        const double* gs = g.data() + i * stride;
        double* ds = dx.data() + attrs.rows[i] * stride;
        for (std::size_t j = 0; j < stride; ++j) ds[j] += gs[j];
      }
      return {dx};
    }
    case OpKind::leaf:
      break;
  }
  throw ContractError(std::string("no backward rule for op '") + op_name(k) + "'");
}

namespace ops {

Tensor apply1(OpKind k, const Tensor& a, const OpAttrs& attrs) {
  const Tensor* in[] = {&a};
  return ndgrad::apply(k, in, attrs);
}

Tensor apply2(OpKind k, const Tensor& a, const Tensor& b, const OpAttrs& attrs) {
  const Tensor* in[] = {&a, &b};
  return ndgrad::apply(k, in, attrs);
}

Tensor scale(const Tensor& a, double factor) {
  OpAttrs attrs;
  attrs.scalar = factor;
  return apply1(OpKind::scale, a, attrs);
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t pad) {
  OpAttrs attrs;
  attrs.pad = pad;
  return apply2(OpKind::conv2d, input, kernel, attrs);
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t pad) {
  OpAttrs attrs;
  attrs.pad = pad;
  const Tensor* in[] = {&input, &kernel, &bias};
  return ndgrad::apply(OpKind::conv2d, in, attrs);
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const Tensor* in[] = {&x, &gamma, &beta};
  return ndgrad::apply(OpKind::channel_affine, in, {});
}

Tensor batch_normalize(const Tensor& x, double eps) {
  OpAttrs attrs;
  attrs.eps = eps;
  return apply1(OpKind::batch_normalize, x, attrs);
}

Tensor log_clamped(const Tensor& a, double floor) {
  OpAttrs attrs;
  attrs.clamp_floor = floor;
  return apply1(OpKind::log_clamped, a, attrs);
}

Tensor select_rows(const Tensor& a, std::vector<std::size_t> rows) {
  OpAttrs attrs;
  attrs.rows = std::move(rows);
  return apply1(OpKind::select_rows, a, attrs);
}

}  // namespace ops

}  // namespace dualtta::ndgrad
