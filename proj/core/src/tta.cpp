#include "dualtta/tta.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dualtta/errors.hpp"

namespace dualtta::tta {

using ndgrad::NodeId;
using ndgrad::OpAttrs;
using ndgrad::OpKind;
using ndgrad::Tape;

double entropy(std::span<const double> y_hat) {
  double e = 0.0;
  for (double p : y_hat) e -= p * std::log(std::max(p, 1e-12));
  return e;
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

double diff(std::span<const double> y_hat, std::span<const double> y_other) {
  if (y_hat.size() != y_other.size()) {
    throw ShapeError("diff: probability vectors must have equal length");
  }
  const std::size_t k = argmax(y_hat);
  return y_hat[k] - y_other[k];
}

std::vector<PredictionTriple> make_triples(const Tensor& probs, const Tensor& probs_sa,
                                           const Tensor& probs_sp) {
  if (probs.rank() != 2 || !probs.same_shape(probs_sa) || !probs.same_shape(probs_sp)) {
    throw ShapeError("make_triples: expected three (B,C) tensors of identical shape");
  }
  const std::size_t B = probs.dim(0), C = probs.dim(1);
  std::vector<PredictionTriple> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    PredictionTriple& t = out[b];
    t.y_hat.assign(probs.data() + b * C, probs.data() + (b + 1) * C);
    t.y_hat_sa.assign(probs_sa.data() + b * C, probs_sa.data() + (b + 1) * C);
    t.y_hat_sp.assign(probs_sp.data() + b * C, probs_sp.data() + (b + 1) * C);
    t.argmax_index = argmax(t.y_hat);
    t.ent = entropy(t.y_hat);
    t.diff_sa = t.y_hat[t.argmax_index] - t.y_hat_sa[t.argmax_index];
    t.diff_sp = t.y_hat[t.argmax_index] - t.y_hat_sp[t.argmax_index];
  }
  return out;
}

std::size_t PartitionRecord::count(Membership m) const {
  return static_cast<std::size_t>(std::count(membership.begin(), membership.end(), m));
}

PartitionRecord partition(const std::vector<PredictionTriple>& triples, const DualTtaConfig& cfg) {
  PartitionRecord rec;
  rec.membership.resize(triples.size(), Membership::neither);
  rec.weight.assign(triples.size(), 0.0);
  const bool gated = cfg.entropy_gate;
  double gate = cfg.entropy_gate_threshold;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    const PredictionTriple& t = triples[i];
    if (gated) {
      const double thresh = gate >= 0.0 ? gate : 0.4 * std::log(static_cast<double>(t.y_hat.size()));
      if (!(t.ent < thresh)) continue;
    }
    if (t.diff_sa > cfg.tau_sa && t.diff_sp < cfg.tau_sp) {
      rec.membership[i] = Membership::d_plus;
    } else if (t.diff_sa < cfg.tau_sa && t.diff_sp > cfg.tau_sp) {
      rec.membership[i] = Membership::d_minus;
    }
  }
  return rec;
}

void assign_weights(const std::vector<PredictionTriple>& triples, PartitionRecord& part,
                    const DualTtaConfig& cfg) {
  if (part.membership.size() != triples.size()) {
    throw ContractError("assign_weights: partition/triple size mismatch");
  }
  part.weight.assign(triples.size(), 0.0);
  for (std::size_t i = 0; i < triples.size(); ++i) {
    const PredictionTriple& t = triples[i];
    if (part.membership[i] == Membership::d_plus) {
      part.weight[i] = std::exp(cfg.ent0 - t.ent) + std::exp(t.diff_sa) +
                       std::exp(cfg.diff0 - t.diff_sp);
    } else if (part.membership[i] == Membership::d_minus) {
      part.weight[i] = std::exp(cfg.ent0 - t.ent);
    }
  }
}

namespace {

// sum_b coeff[b] * Ent_b as a tape node: with per-sample constant row matrix
// W[b,:] = -coeff[b], the loss is sum(W * probs * log_probs).
NodeId weighted_entropy_node(Tape& tape, NodeId probs_node, NodeId log_probs_node,
                             std::span<const double> coeff) {
  const Tensor& probs = tape.value(probs_node);
  const std::size_t B = probs.dim(0), C = probs.dim(1);
  if (coeff.size() != B) throw ContractError("weighted entropy: coefficient length mismatch");
  Tensor w(Shape{B, C});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) w.at2(b, c) = -coeff[b];
  }
  NodeId wn = tape.leaf(std::move(w));
  NodeId plp = tape.apply(OpKind::mul_elementwise, {probs_node, log_probs_node});
  NodeId weighted = tape.apply(OpKind::mul_elementwise, {wn, plp});
  return tape.apply(OpKind::reduce_sum, {weighted});
}

}  // namespace

NodeId dual_loss(Tape& tape, NodeId probs_node, NodeId log_probs_node,
                 const PartitionRecord& part, double lambda) {
  const Tensor& probs = tape.value(probs_node);
  const std::size_t B = probs.dim(0);
  if (part.membership.size() != B) throw ContractError("dual_loss: partition size mismatch");
  std::vector<double> coeff(B, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    if (part.membership[b] == Membership::d_plus) {
      coeff[b] = part.weight[b];
    } else if (part.membership[b] == Membership::d_minus) {
      coeff[b] = -lambda * part.weight[b];
    }
  }
  return weighted_entropy_node(tape, probs_node, log_probs_node, coeff);
}

Method method_from_string(std::string_view s) {
  for (Method m : all_methods()) {
    if (method_name(m) == s) return m;
  }
  throw ConfigError("unknown adaptation method '" + std::string(s) + "'");
}

std::string_view method_name(Method m) {
  switch (m) {
    case Method::noadapt: return "noadapt";
    case Method::tent: return "tent";
    case Method::eata_lite: return "eata_lite";
    case Method::deyo_lite: return "deyo_lite";
    case Method::dualtta: return "dualtta";
    case Method::deyo_dual: return "deyo_dual";
    case Method::eata_dual: return "eata_dual";
  }
  return "?";
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> kAll = {
      Method::noadapt,  Method::tent,    Method::eata_lite, Method::deyo_lite,
      Method::dualtta,  Method::deyo_dual, Method::eata_dual};
  return kAll;
}

Adapter::Adapter(AdapterConfig cfg, ndgrad::RngStream rng)
    : cfg_(std::move(cfg)),
      rng_shuffle_(rng.split("shuffle")),
      rng_style_(rng.split("style")) {
  opt_.cfg = cfg_.optimizer;
}

model::NormMode Adapter::preferred_norm_mode() const {
  return cfg_.method == Method::noadapt ? model::NormMode::running_stats
                                        : model::NormMode::batch_stats;
}

namespace {

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0.0 ? dot / denom : 0.0;
}

std::vector<double> row(const Tensor& t, std::size_t b) {
  const std::size_t C = t.dim(1);
  return std::vector<double>(t.data() + b * C, t.data() + (b + 1) * C);
}

}  // namespace

AdaptOutcome Adapter::adapt_step(model::ModelState& m, const Tensor& batch) {
  ++batch_index_;
  const std::size_t B = batch.dim(0);
  const Method method = cfg_.method;
  const bool needs_update = method != Method::noadapt;

  model::ForwardOptions fo;
  fo.record_tape = needs_update;
  model::ForwardResult orig = model::forward(m, batch, fo);

  AdaptOutcome out;
  out.eval_probs = orig.probs;
  out.predicted.resize(B);
  out.membership.assign(B, Membership::neither);
  const std::size_t C = m.arch.num_classes;
  for (std::size_t b = 0; b < B; ++b) {
    out.predicted[b] = argmax(std::span<const double>(orig.probs.data() + b * C, C));
  }
  if (method == Method::noadapt) {
    out.n_neither = B;
    return out;
  }

  // Detached transform forwards, only for the methods that use them.
  Tensor probs_sa, probs_sp;
  const bool wants_sa =
      method == Method::deyo_lite || method == Method::deyo_dual || method == Method::dualtta;
  const bool wants_sp = method == Method::dualtta;
  if (wants_sa) {
    transforms::ShuffleSpec spec;
    spec.grid = cfg_.patch_grid;
    spec.share_permutation = cfg_.share_patch_permutation;
    Tensor shuffled = transforms::patch_shuffle(batch, spec, rng_shuffle_);
    probs_sa = model::forward(m, shuffled).probs;
  }
  if (wants_sp) {
    model::StyleInjection inj = transforms::make_style_injection(rng_style_);
    model::ForwardOptions so;
    so.style_injection = &inj;
    probs_sp = model::forward(m, batch, so).probs;
  }

  const double tau_ent = cfg_.baseline.tau_ent >= 0.0
                             ? cfg_.baseline.tau_ent
                             : 0.4 * std::log(static_cast<double>(C));

  // Per-sample unsigned weights on the two sets; the tape objective uses the
  // signed coefficient w_plus - lambda * w_minus.
  std::vector<double> w_plus(B, 0.0), w_minus(B, 0.0);
  std::vector<double> ent(B);
  for (std::size_t b = 0; b < B; ++b) {
    ent[b] = entropy(std::span<const double>(orig.probs.data() + b * C, C));
  }

  switch (method) {
    case Method::tent: {
      // unweighted entropy over the whole batch; every sample is "selected"
      for (std::size_t b = 0; b < B; ++b) {
        w_plus[b] = 1.0;
        out.membership[b] = Membership::d_plus;
      }
      break;
    }
    case Method::eata_lite:
    case Method::eata_dual: {
      std::vector<double> mean_probs(C, 0.0);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) mean_probs[c] += orig.probs.at2(b, c) / B;
      }
      for (std::size_t b = 0; b < B; ++b) {
        if (!(ent[b] < tau_ent)) continue;
        double cs = moving_avg_ ? cosine(row(orig.probs, b), *moving_avg_) : -1.0;
        const bool aligned = !moving_avg_ || cs < cfg_.baseline.eps_cos;
        if (aligned) {
          out.membership[b] = Membership::d_plus;
          w_plus[b] = std::exp(cfg_.baseline.ent0 - ent[b]);
        } else if (method == Method::eata_dual && moving_avg_ &&
                   cs > 1.5 * cfg_.baseline.eps_cos) {
          out.membership[b] = Membership::d_minus;
          w_minus[b] = std::exp(cfg_.baseline.ent0 - ent[b]);
        }
      }
      // n_t = a*avg_t + (1-a)*n_{t-1}, seeded with the first batch mean
      if (!moving_avg_) {
        moving_avg_ = mean_probs;
      } else {
        const double a = cfg_.baseline.moving_avg_coeff;
        for (std::size_t c = 0; c < C; ++c) {
          (*moving_avg_)[c] = a * mean_probs[c] + (1.0 - a) * (*moving_avg_)[c];
        }
      }
      break;
    }
    case Method::deyo_lite:
    case Method::deyo_dual: {
      for (std::size_t b = 0; b < B; ++b) {
        if (!(ent[b] < tau_ent)) continue;
        const double plpd = diff(row(orig.probs, b), row(probs_sa, b));
        if (plpd > cfg_.baseline.tau_plpd) {
          out.membership[b] = Membership::d_plus;
          w_plus[b] = std::exp(cfg_.baseline.ent0 - ent[b]);
        } else if (method == Method::deyo_dual && plpd < cfg_.baseline.tau_plpd / 2.0) {
          out.membership[b] = Membership::d_minus;
          w_minus[b] = std::exp(cfg_.baseline.ent0 - ent[b]);
        }
      }
      break;
    }
    case Method::dualtta: {
      std::vector<PredictionTriple> triples = make_triples(orig.probs, probs_sa, probs_sp);
      PartitionRecord part = partition(triples, cfg_.dual);
      assign_weights(triples, part, cfg_.dual);
      out.membership = part.membership;
      for (std::size_t b = 0; b < B; ++b) {
        if (part.membership[b] == Membership::d_plus) {
          w_plus[b] = part.weight[b];
        } else if (part.membership[b] == Membership::d_minus) {
          w_minus[b] = part.weight[b];
        }
      }
      break;
    }
    case Method::noadapt:
      break;  // returned above
  }

  const double lambda = cfg_.dual.lambda;
  std::vector<double> coeff(B, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    coeff[b] = w_plus[b] - lambda * w_minus[b];
    out.loss_plus += w_plus[b] * ent[b];
    out.loss_minus += w_minus[b] * ent[b];
    if (out.membership[b] == Membership::d_plus) {
      ++out.n_plus;
    } else if (out.membership[b] == Membership::d_minus) {
      ++out.n_minus;
    } else {
      ++out.n_neither;
    }
  }
  out.loss_dual = out.loss_plus - lambda * out.loss_minus;

  const bool any_selected = out.n_plus + out.n_minus > 0;
  bool any_nonzero_coeff = false;
  for (double c : coeff) any_nonzero_coeff |= c != 0.0;
  if (!any_selected || !any_nonzero_coeff) {
    return out;  // empty selection: loss 0, skip the update entirely
  }

  Tape& tape = *orig.tape;
  NodeId loss = weighted_entropy_node(tape, orig.probs_node, orig.log_probs_node, coeff);

  std::vector<std::string> names = model::resolve_trainables(m, cfg_.policy);
  std::vector<NodeId> nodes;
  nodes.reserve(names.size());
  for (const std::string& n : names) nodes.push_back(orig.param_nodes.at(n));
  ndgrad::Gradients grads = tape.backward(loss, nodes);
  std::map<std::string, Tensor> by_name;
  for (std::size_t i = 0; i < names.size(); ++i) {
    by_name.emplace(names[i], std::move(grads.at(nodes[i])));
  }
  model::sgd_step(m, by_name, opt_);
  out.updated = true;
  return out;
}

std::unique_ptr<Adapter> make_adapter(const AdapterConfig& cfg, ndgrad::RngStream rng) {
  return std::make_unique<Adapter>(cfg, rng);
}

}  // namespace dualtta::tta
