#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "dualtta/model.hpp"
#include "dualtta/rng.hpp"
#include "dualtta/tape.hpp"
#include "dualtta/tensor.hpp"
#include "dualtta/transforms.hpp"

namespace dualtta::tta {

// Natural-log entropy of a probability vector, with the 1e-12 log clamp.
double entropy(std::span<const double> y_hat);

// y_hat[k] - y_other[k] at k = argmax of y_hat; argmax ties break to the
// lowest index.
double diff(std::span<const double> y_hat, std::span<const double> y_other);

std::size_t argmax(std::span<const double> v);

struct PredictionTriple {
  std::vector<double> y_hat;
  std::vector<double> y_hat_sa;
  std::vector<double> y_hat_sp;
  std::size_t argmax_index = 0;
  double ent = 0.0;
  double diff_sa = 0.0;
  double diff_sp = 0.0;
};

std::vector<PredictionTriple> make_triples(const Tensor& probs, const Tensor& probs_sa,
                                           const Tensor& probs_sp);

enum class Membership { d_plus, d_minus, neither };

struct PartitionRecord {
  std::vector<Membership> membership;
  std::vector<double> weight;  // alpha on D+, beta on D-, 0 otherwise
  std::size_t count(Membership m) const;
};

struct DualTtaConfig {
  double tau_sa = 0.4;
  double tau_sp = 0.7;
  double ent0 = 0.4;
  double diff0 = 0.7;
  double lambda = 0.5;
  // Optional low-entropy pre-gate. Off by default: the update rule partitions
  // the raw batch. Threshold < 0 means 0.4 * ln(num_classes).
  bool entropy_gate = false;
  double entropy_gate_threshold = -1.0;
};

struct BaselineConfig {
  double tau_ent = -1.0;  // < 0: 0.4 * ln(num_classes)
  double tau_plpd = 0.3;
  double eps_cos = 0.05;
  double moving_avg_coeff = 0.1;
  double ent0 = 0.4;
};

// Strict-inequality predicates; boundary equality falls into neither:
//   D+ iff diff_sa > tau_sa and diff_sp < tau_sp
//   D- iff diff_sa < tau_sa and diff_sp > tau_sp
PartitionRecord partition(const std::vector<PredictionTriple>& triples, const DualTtaConfig& cfg);

// alpha(x) = e^{Ent0-Ent} + e^{Diff_sa} + e^{Diff0-Diff_sp} on D+;
// beta(x)  = e^{Ent0-Ent} on D-. Weights are stop-gradient constants.
void assign_weights(const std::vector<PredictionTriple>& triples, PartitionRecord& part,
                    const DualTtaConfig& cfg);

// L+ - lambda * L- as a scalar tape node, with L+- the weighted entropy sums
// over D+/D-. Per-sample weights enter as constants; empty sets contribute 0.
ndgrad::NodeId dual_loss(ndgrad::Tape& tape, ndgrad::NodeId probs_node,
                         ndgrad::NodeId log_probs_node, const PartitionRecord& part,
                         double lambda);

enum class Method { noadapt, tent, eata_lite, deyo_lite, dualtta, deyo_dual, eata_dual };

Method method_from_string(std::string_view s);
std::string_view method_name(Method m);
const std::vector<Method>& all_methods();

struct AdapterConfig {
  Method method = Method::dualtta;
  DualTtaConfig dual;
  BaselineConfig baseline;
  model::OptimizerConfig optimizer;  // lr 5e-4, momentum 0.9
  model::ParamPolicy policy = model::ParamPolicy::norm_affine_only;
  std::size_t patch_grid = 4;
  bool share_patch_permutation = false;
};

struct AdaptOutcome {
  Tensor eval_probs;                   // pre-update predictions for scoring
  std::vector<std::size_t> predicted;  // argmax per sample
  std::vector<Membership> membership;  // selected set per sample
  std::size_t n_plus = 0;
  std::size_t n_minus = 0;
  std::size_t n_neither = 0;
  double loss_plus = 0.0;
  double loss_minus = 0.0;
  double loss_dual = 0.0;
  bool updated = false;
};

// Streaming adapter: owns optimizer state, transform noise streams and any
// method state (EATA moving average). One adapter drives one model.
class Adapter {
 public:
  Adapter(AdapterConfig cfg, ndgrad::RngStream rng);

  AdaptOutcome adapt_step(model::ModelState& m, const Tensor& batch);

  const AdapterConfig& config() const { return cfg_; }
  // noadapt scores the unmodified source model (frozen running statistics);
  // adapting methods recalibrate on current-batch statistics.
  model::NormMode preferred_norm_mode() const;

 private:
  AdapterConfig cfg_;
  model::OptimizerState opt_;
  ndgrad::RngStream rng_shuffle_;
  ndgrad::RngStream rng_style_;
  std::optional<std::vector<double>> moving_avg_;  // EATA n_t
  std::size_t batch_index_ = 0;
};

std::unique_ptr<Adapter> make_adapter(const AdapterConfig& cfg, ndgrad::RngStream rng);

}  // namespace dualtta::tta
