#pragma once

#include <span>
#include <vector>

#include "dualtta/tensor.hpp"

namespace dualtta::ndgrad {

enum class OpKind {
  add,
  sub,
  mul_elementwise,
  scale,
  matmul,
  conv2d,
  relu,
  avg_pool2d,
  global_avg_pool,
  channel_affine,
  batch_normalize,
  log_softmax,
  exp,
  log_clamped,
  reduce_sum,
  reduce_mean,
  select_rows,
  leaf,
};

const char* op_name(OpKind k);

struct OpAttrs {
  double scalar = 1.0;            // scale factor
  std::size_t pad = 0;            // conv2d zero padding
  double eps = 1e-5;              // batch_normalize variance floor
  double clamp_floor = 1e-12;     // log_clamped argument floor
  std::vector<std::size_t> rows;  // select_rows indices
};

// Values a backward rule needs beyond the node's inputs and output
// (e.g. batch statistics for batch_normalize).
struct SavedContext {
  std::vector<Tensor> extra;
};

// Forward evaluation of one primitive. Checks input shapes, verifies the
// output is finite (NumericError naming the op otherwise) and, when ctx is
// non-null, stores whatever the backward rule will need.
Tensor apply(OpKind k, std::span<const Tensor* const> inputs, const OpAttrs& attrs,
             SavedContext* ctx = nullptr);

// Exact analytic derivative of one primitive: maps the upstream cotangent of
// the output to cotangents matching each input's shape.
std::vector<Tensor> backward_rule(OpKind k, std::span<const Tensor* const> inputs,
                                  const Tensor& output, const SavedContext& ctx,
                                  const Tensor& upstream, const OpAttrs& attrs);

namespace ops {

Tensor apply1(OpKind k, const Tensor& a, const OpAttrs& attrs = {});
Tensor apply2(OpKind k, const Tensor& a, const Tensor& b, const OpAttrs& attrs = {});

inline Tensor add(const Tensor& a, const Tensor& b) { return apply2(OpKind::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return apply2(OpKind::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return apply2(OpKind::mul_elementwise, a, b);
}
Tensor scale(const Tensor& a, double factor);
inline Tensor matmul(const Tensor& a, const Tensor& b) { return apply2(OpKind::matmul, a, b); }
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t pad);
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t pad);
inline Tensor relu(const Tensor& a) { return apply1(OpKind::relu, a); }
inline Tensor avg_pool2d(const Tensor& a) { return apply1(OpKind::avg_pool2d, a); }
inline Tensor global_avg_pool(const Tensor& a) { return apply1(OpKind::global_avg_pool, a); }
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta);
Tensor batch_normalize(const Tensor& x, double eps = 1e-5);
inline Tensor log_softmax(const Tensor& a) { return apply1(OpKind::log_softmax, a); }
inline Tensor exp(const Tensor& a) { return apply1(OpKind::exp, a); }
Tensor log_clamped(const Tensor& a, double floor = 1e-12);
inline Tensor reduce_sum(const Tensor& a) { return apply1(OpKind::reduce_sum, a); }
inline Tensor reduce_mean(const Tensor& a) { return apply1(OpKind::reduce_mean, a); }
Tensor select_rows(const Tensor& a, std::vector<std::size_t> rows);

}  // namespace ops

}  // namespace dualtta::ndgrad
