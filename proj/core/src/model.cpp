#include "dualtta/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dualtta/errors.hpp"
#include "dualtta/ops.hpp"

namespace dualtta::model {

using ndgrad::NodeId;
using ndgrad::OpAttrs;
using ndgrad::OpKind;
using ndgrad::Tape;
namespace ops = ndgrad::ops;

const char* norm_mode_name(NormMode m) {
  return m == NormMode::batch_stats ? "batch_stats" : "running_stats";
}

NormMode norm_mode_from_string(std::string_view s) {
  if (s == "batch_stats") return NormMode::batch_stats;
  if (s == "running_stats") return NormMode::running_stats;
  throw ConfigError("unknown norm mode '" + std::string(s) + "'");
}

std::map<std::string, Shape> ArchDescriptor::param_shapes() const {
  const std::size_t k = kernel;
  return {
      {"conv1.weight", {conv1_out, in_channels, k, k}},
      {"conv1.bias", {conv1_out}},
      {"norm1.gamma", {conv1_out}},
      {"norm1.beta", {conv1_out}},
      {"conv2.weight", {conv2_out, conv1_out, k, k}},
      {"conv2.bias", {conv2_out}},
      {"norm2.gamma", {conv2_out}},
      {"norm2.beta", {conv2_out}},
      {"fc.weight", {conv2_out, num_classes}},
      {"fc.bias", {num_classes}},
  };
}

std::map<std::string, Shape> ArchDescriptor::buffer_shapes() const {
  return {
      {"norm1.running_mean", {conv1_out}},
      {"norm1.running_var", {conv1_out}},
      {"norm2.running_mean", {conv2_out}},
      {"norm2.running_var", {conv2_out}},
  };
}

std::size_t ArchDescriptor::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, shape] : param_shapes()) n += ndgrad::shape_numel(shape);
  return n;
}

ModelState build_reference_net(std::size_t num_classes, std::size_t in_channels,
                               std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("build_reference_net: num_classes must be >= 2");
  if (in_channels < 1) throw ConfigError("build_reference_net: in_channels must be >= 1");

  ModelState m;
  m.arch.in_channels = in_channels;
  m.arch.num_classes = num_classes;

  ndgrad::RngStream root(seed);
  auto he_init = [](ndgrad::RngStream rng, const Shape& shape, std::size_t fan_in) {
    Tensor t = rng.gaussian_tensor(shape);
    const double s = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] *= s;
    return t;
  };

  const auto& a = m.arch;
  const std::size_t k2 = a.kernel * a.kernel;
  m.params["conv1.weight"] =
      he_init(root.split("init/conv1"), {a.conv1_out, a.in_channels, a.kernel, a.kernel},
              a.in_channels * k2);
  m.params["conv1.bias"] = Tensor(Shape{a.conv1_out});
  m.params["norm1.gamma"] = Tensor::full({a.conv1_out}, 1.0);
  m.params["norm1.beta"] = Tensor(Shape{a.conv1_out});
  m.params["conv2.weight"] =
      he_init(root.split("init/conv2"), {a.conv2_out, a.conv1_out, a.kernel, a.kernel},
              a.conv1_out * k2);
  m.params["conv2.bias"] = Tensor(Shape{a.conv2_out});
  m.params["norm2.gamma"] = Tensor::full({a.conv2_out}, 1.0);
  m.params["norm2.beta"] = Tensor(Shape{a.conv2_out});
  m.params["fc.weight"] =
      he_init(root.split("init/fc"), {a.conv2_out, a.num_classes}, a.conv2_out);
  m.params["fc.bias"] = Tensor(Shape{a.num_classes});

  m.buffers["norm1.running_mean"] = Tensor(Shape{a.conv1_out});
  m.buffers["norm1.running_var"] = Tensor::full({a.conv1_out}, 1.0);
  m.buffers["norm2.running_mean"] = Tensor(Shape{a.conv2_out});
  m.buffers["norm2.running_var"] = Tensor::full({a.conv2_out}, 1.0);
  return m;
}

namespace {

constexpr double kBnEps = 1e-5;

// One forward pass, always expressed on a tape; callers that do not record
// simply drop it. The style injection result enters as a constant leaf.
struct BuildOutput {
  NodeId logits, log_probs, probs, style;
  std::map<std::string, NodeId> param_nodes;
};

void collect_stats(const Tensor& x, std::vector<NormBatchStats>& out) {
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const double n = static_cast<double>(B * HW);
  NormBatchStats st{Tensor(Shape{C}), Tensor(Shape{C})};
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
    st.mean[c] = mu;
    st.var[c] = v / n;
  }
  out.push_back(std::move(st));
}

BuildOutput build_forward(Tape& tape, const ModelState& m, const Tensor& batch,
                          const ForwardOptions& opts, std::vector<NormBatchStats>* stats) {
  if (batch.rank() != 4 || batch.dim(1) != m.arch.in_channels) {
    throw ShapeError("forward: batch must be (B," + std::to_string(m.arch.in_channels) +
                     ",H,W), got " + ndgrad::shape_str(batch.shape()));
  }

  BuildOutput out{};
  for (const auto& [name, value] : m.params) out.param_nodes[name] = tape.leaf(value);
  const auto pn = [&](const char* n) { return out.param_nodes.at(n); };

  NodeId x = tape.leaf(batch);

  auto norm_layer = [&](NodeId h, const std::string& prefix) {
    if (opts.collect_norm_stats && stats) collect_stats(tape.value(h), *stats);
    if (m.norm_mode == NormMode::batch_stats) {
      OpAttrs a;
      a.eps = kBnEps;
      NodeId n = tape.apply(OpKind::batch_normalize, {h}, a);
      return tape.apply(OpKind::channel_affine,
                        {n, pn((prefix + ".gamma").c_str()), pn((prefix + ".beta").c_str())});
    }
    // running-stat normalization as a constant per-channel affine
    const Tensor& rm = m.buffers.at(prefix + ".running_mean");
    const Tensor& rv = m.buffers.at(prefix + ".running_var");
    Tensor ga(rm.shape()), be(rm.shape());
    for (std::size_t c = 0; c < rm.numel(); ++c) {
      const double inv = 1.0 / std::sqrt(std::max(rv[c], kBnEps));
      ga[c] = inv;
      be[c] = -rm[c] * inv;
    }
    NodeId n = tape.apply(OpKind::channel_affine, {h, tape.leaf(ga), tape.leaf(be)});
    return tape.apply(OpKind::channel_affine,
                      {n, pn((prefix + ".gamma").c_str()), pn((prefix + ".beta").c_str())});
  };

  auto style_point = [&](NodeId z, std::size_t index) {
    if (index == m.style_layer_index) {
      out.style = z;
      if (opts.style_injection) {
        Tensor replaced = (*opts.style_injection)(tape.value(z));
        if (!replaced.same_shape(tape.value(z))) {
          throw ContractError("style injection changed feature shape from " +
                              ndgrad::shape_str(tape.value(z).shape()) + " to " +
                              ndgrad::shape_str(replaced.shape()));
        }
        return tape.leaf(std::move(replaced));
      }
    }
    return z;
  };

  OpAttrs pad1;
  pad1.pad = 1;
  NodeId h1 = tape.apply(OpKind::conv2d, {x, pn("conv1.weight"), pn("conv1.bias")}, pad1);
  NodeId r1 = tape.apply(OpKind::relu, {norm_layer(h1, "norm1")});
  r1 = style_point(r1, 1);
  NodeId p1 = tape.apply(OpKind::avg_pool2d, {r1});

  NodeId h2 = tape.apply(OpKind::conv2d, {p1, pn("conv2.weight"), pn("conv2.bias")}, pad1);
  NodeId r2 = tape.apply(OpKind::relu, {norm_layer(h2, "norm2")});
  r2 = style_point(r2, 2);

  NodeId pooled = tape.apply(OpKind::global_avg_pool, {r2});
  NodeId logits = tape.apply(
      OpKind::add, {tape.apply(OpKind::matmul, {pooled, pn("fc.weight")}), pn("fc.bias")});

  out.logits = logits;
  out.log_probs = tape.apply(OpKind::log_softmax, {logits});
  out.probs = tape.apply(OpKind::exp, {out.log_probs});
  return out;
}

}  // namespace

ForwardResult forward(const ModelState& m, const Tensor& batch, const ForwardOptions& opts) {
  if (m.style_layer_index < 1 || m.style_layer_index > 2) {
    throw ConfigError("style_layer_index must be 1 or 2 for the reference net");
  }
  ForwardResult res;
  auto tape = std::make_shared<Tape>();
  BuildOutput built = build_forward(*tape, m, batch, opts, &res.norm_stats);
  res.logits = tape->value(built.logits);
  res.probs = tape->value(built.probs);
  res.style_features = tape->value(built.style);
  if (opts.record_tape) {
    res.logits_node = built.logits;
    res.log_probs_node = built.log_probs;
    res.probs_node = built.probs;
    res.param_nodes = std::move(built.param_nodes);
    res.tape = std::move(tape);
  }
  return res;
}

std::vector<std::string> resolve_trainables(const ModelState& m, ParamPolicy policy) {
  if (m.params.empty()) throw ContractError("resolve_trainables: model has no parameters");
  std::vector<std::string> out;
  for (const auto& [name, value] : m.params) {
    if (policy == ParamPolicy::all_parameters || name.find("norm") == 0) out.push_back(name);
  }
  return out;
}

void sgd_step(ModelState& m, const std::map<std::string, Tensor>& grads, OptimizerState& opt) {
  for (const auto& [name, g] : grads) {
    auto it = m.params.find(name);
    if (it == m.params.end()) throw ContractError("sgd_step: unknown parameter '" + name + "'");
    Tensor& p = it->second;
    if (!p.same_shape(g)) {
      throw ContractError("sgd_step: gradient shape " + ndgrad::shape_str(g.shape()) +
                          " does not match parameter '" + name + "' " +
                          ndgrad::shape_str(p.shape()));
    }
    auto [vit, inserted] = opt.velocity.try_emplace(name, Tensor(p.shape()));
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      v[i] = opt.cfg.momentum * v[i] + g[i];
      p[i] -= opt.cfg.lr * v[i];
    }
  }
}

double evaluate_accuracy(const ModelState& m, const Tensor& images,
                         const std::vector<std::size_t>& labels, std::size_t batch_size) {
  const std::size_t n = images.dim(0);
  const std::size_t C = images.dim(1), H = images.dim(2), W = images.dim(3);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t bs = std::min(batch_size, n - start);
    Tensor batch(Shape{bs, C, H, W});
    std::copy(images.data() + start * C * H * W, images.data() + (start + bs) * C * H * W,
              batch.data());
    ForwardResult r = forward(m, batch);
    const std::size_t nc = m.arch.num_classes;
    for (std::size_t b = 0; b < bs; ++b) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < nc; ++c) {
        if (r.probs.at2(b, c) > r.probs.at2(b, best)) best = c;
      }
      if (best == labels[start + b]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

PretrainReport pretrain(ModelState& m, const Tensor& train_images,
                        const std::vector<std::size_t>& train_labels, const Tensor& val_images,
                        const std::vector<std::size_t>& val_labels, const PretrainConfig& cfg) {
  const std::size_t n = train_images.dim(0);
  const std::size_t C = train_images.dim(1), H = train_images.dim(2), W = train_images.dim(3);
  const std::size_t nc = m.arch.num_classes;
  if (train_labels.size() != n) throw ContractError("pretrain: labels/images length mismatch");

  PretrainReport report;
  OptimizerState opt;
  opt.cfg = {cfg.lr, cfg.momentum};
  ndgrad::RngStream root(cfg.seed);
  std::vector<std::string> trainables = resolve_trainables(m, ParamPolicy::all_parameters);

  auto run_batch = [&](const std::vector<std::size_t>& idx, std::size_t start, std::size_t bs,
                       bool update) {
    Tensor batch(Shape{bs, C, H, W});
    Tensor onehot(Shape{bs, nc});
    const std::size_t px = C * H * W;
    for (std::size_t b = 0; b < bs; ++b) {
      const std::size_t src = idx[start + b];
      std::copy(train_images.data() + src * px, train_images.data() + (src + 1) * px,
                batch.data() + b * px);
      onehot.at2(b, train_labels[src]) = 1.0;
    }
    ForwardOptions fo;
    fo.record_tape = update;
    fo.collect_norm_stats = update;
    ForwardResult r = forward(m, batch, fo);

    // mean cross-entropy: -1/B * sum(onehot * log_probs)
    if (!update) {
      double loss = 0.0;
      Tensor lp = ops::log_softmax(r.logits);
      for (std::size_t i = 0; i < lp.numel(); ++i) loss -= onehot[i] * lp[i];
      return loss / static_cast<double>(bs);
    }

    Tape& tape = *r.tape;
    NodeId mask = tape.leaf(onehot);
    NodeId picked = tape.apply(OpKind::mul_elementwise, {mask, r.log_probs_node});
    OpAttrs neg;
    neg.scalar = -1.0 / static_cast<double>(bs);
    NodeId loss = tape.apply(OpKind::scale, {tape.apply(OpKind::reduce_sum, {picked})}, neg);
    const double loss_value = tape.value(loss)[0];
    if (!std::isfinite(loss_value)) {
      throw NumericError("pretrain: non-finite loss");
    }

    std::vector<NodeId> train_nodes;
    for (const std::string& name : trainables) train_nodes.push_back(r.param_nodes.at(name));
    ndgrad::Gradients grads = tape.backward(loss, train_nodes);
    std::map<std::string, Tensor> by_name;
    for (std::size_t i = 0; i < trainables.size(); ++i) {
      by_name.emplace(trainables[i], std::move(grads.at(train_nodes[i])));
    }
    sgd_step(m, by_name, opt);

    // EMA update of the frozen-at-test running statistics
    const char* prefixes[] = {"norm1", "norm2"};
    for (std::size_t li = 0; li < r.norm_stats.size() && li < 2; ++li) {
      Tensor& rm = m.buffers.at(std::string(prefixes[li]) + ".running_mean");
      Tensor& rv = m.buffers.at(std::string(prefixes[li]) + ".running_var");
      for (std::size_t c = 0; c < rm.numel(); ++c) {
        rm[c] = (1.0 - cfg.bn_momentum) * rm[c] + cfg.bn_momentum * r.norm_stats[li].mean[c];
        rv[c] = (1.0 - cfg.bn_momentum) * rv[c] + cfg.bn_momentum * r.norm_stats[li].var[c];
      }
    }
    return loss_value;
  };

  std::vector<std::size_t> ident(n);
  for (std::size_t i = 0; i < n; ++i) ident[i] = i;
  report.initial_loss = run_batch(ident, 0, std::min(cfg.batch_size, n), false);

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    auto order = root.split("epoch").split(static_cast<std::uint64_t>(e)).permutation(n);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + cfg.batch_size <= n; start += cfg.batch_size) {
      total += run_batch(order, start, cfg.batch_size, true);
      ++batches;
    }
    report.epoch_losses.push_back(batches ? total / static_cast<double>(batches)
                                          : report.initial_loss);
  }

  ModelState eval = m;
  eval.norm_mode = NormMode::running_stats;
  report.source_val_accuracy = evaluate_accuracy(eval, val_images, val_labels, cfg.batch_size);
  return report;
}

}  // namespace dualtta::model
