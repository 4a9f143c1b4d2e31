#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dualtta/rng.hpp"
#include "dualtta/tape.hpp"
#include "dualtta/tensor.hpp"

namespace dualtta::model {

enum class NormMode { batch_stats, running_stats };
enum class ParamPolicy { norm_affine_only, all_parameters };

const char* norm_mode_name(NormMode m);
NormMode norm_mode_from_string(std::string_view s);

// Fixed reference architecture:
//   Conv(in->c1, 3x3, pad 1) -> Norm -> ReLU -> AvgPool 2x2
//   -> Conv(c1->c2, 3x3, pad 1) -> Norm -> ReLU -> GlobalAvgPool
//   -> Linear(c2 -> num_classes)
struct ArchDescriptor {
  std::size_t in_channels = 3;
  std::size_t num_classes = 2;
  std::size_t conv1_out = 8;
  std::size_t conv2_out = 16;
  std::size_t kernel = 3;

  std::map<std::string, Shape> param_shapes() const;
  std::map<std::string, Shape> buffer_shapes() const;
  std::size_t param_count() const;
  bool operator==(const ArchDescriptor&) const = default;
};

struct ModelState {
  ArchDescriptor arch;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> buffers;  // norm running mean/var, frozen during adaptation
  NormMode norm_mode = NormMode::batch_stats;
  std::size_t style_layer_index = 1;  // 1 = first Norm+ReLU block output, 2 = second
};

ModelState build_reference_net(std::size_t num_classes, std::size_t in_channels,
                               std::uint64_t seed);

// Callback that receives the (B,C,H,W) feature map at the style layer and
// returns a replacement of identical shape.
using StyleInjection = std::function<Tensor(const Tensor&)>;

struct NormBatchStats {
  Tensor mean;  // (C)
  Tensor var;   // (C), population
};

struct ForwardOptions {
  bool record_tape = false;
  const StyleInjection* style_injection = nullptr;
  bool collect_norm_stats = false;  // fill ForwardResult::norm_stats (pretraining EMA)
};

struct ForwardResult {
  Tensor logits;          // (B, num_classes)
  Tensor probs;           // softmax rows
  Tensor style_features;  // captured Z_i at the style layer
  std::vector<NormBatchStats> norm_stats;

  // Set when record_tape was requested. Gradient flows through the original
  // path only; an injected style tensor enters the tape as a constant.
  std::shared_ptr<ndgrad::Tape> tape;
  ndgrad::NodeId logits_node = 0;
  ndgrad::NodeId log_probs_node = 0;
  ndgrad::NodeId probs_node = 0;
  std::map<std::string, ndgrad::NodeId> param_nodes;
};

ForwardResult forward(const ModelState& m, const Tensor& batch, const ForwardOptions& opts = {});

std::vector<std::string> resolve_trainables(const ModelState& m, ParamPolicy policy);

struct OptimizerConfig {
  double lr = 5e-4;
  double momentum = 0.9;
};

struct OptimizerState {
  OptimizerConfig cfg;
  std::map<std::string, Tensor> velocity;  // lazily sized to parameter shapes
};

// v <- momentum * v + g;  p <- p - lr * v. Parameters absent from grads are
// untouched.
void sgd_step(ModelState& m, const std::map<std::string, Tensor>& grads, OptimizerState& opt);

struct PretrainConfig {
  std::size_t epochs = 14;
  double lr = 0.2;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double bn_momentum = 0.1;  // running-stat EMA coefficient
};

struct PretrainReport {
  double initial_loss = 0.0;
  std::vector<double> epoch_losses;
  double source_val_accuracy = 0.0;
};

// Cross-entropy training on the labeled source split; deterministic per seed.
PretrainReport pretrain(ModelState& m, const Tensor& train_images,
                        const std::vector<std::size_t>& train_labels, const Tensor& val_images,
                        const std::vector<std::size_t>& val_labels, const PretrainConfig& cfg);

double evaluate_accuracy(const ModelState& m, const Tensor& images,
                         const std::vector<std::size_t>& labels, std::size_t batch_size = 64);

void save_checkpoint(const ModelState& m, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);

}  // namespace dualtta::model
