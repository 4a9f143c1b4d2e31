#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dualtta/rng.hpp"
#include "dualtta/tensor.hpp"

namespace dualtta::data {

// Synthetic analogue of the colored-digit / background-bird settings: the
// class is carried by a wide soft bar pattern (class 0 horizontal, class 1
// vertical, jittered per sample), while a color tint correlates with the
// label with probability p_corr. Train/test p_corr differ, so the tint is a
// spurious shortcut that inverts at test time.
struct SpuriousDatasetConfig {
  std::size_t num_classes = 2;
  std::size_t channels = 3;
  std::size_t height = 28;
  std::size_t width = 28;
  double p_corr_train = 0.9;
  double p_corr_test = 0.1;
  double label_noise = 0.05;
  std::size_t n_train = 2048;
  std::size_t n_val = 512;
  std::size_t n_test = 12288;
  std::uint64_t seed = 2024;
};

struct Split {
  Tensor images;  // (N,C,H,W), values in [0,1]
  std::vector<std::size_t> labels;
  std::vector<std::size_t> attributes;  // spurious color id
  std::vector<std::size_t> groups;      // g = y*2 + a
  std::size_t size() const { return labels.size(); }
};

struct SpuriousDataset {
  SpuriousDatasetConfig config;
  Split source_train;
  Split source_val;
  Split target_test;
};

SpuriousDataset gen_spurious_dataset(const SpuriousDatasetConfig& cfg);

enum class CorruptionKind { gaussian_noise, impulse_noise, contrast, box_blur };

const char* corruption_name(CorruptionKind k);
CorruptionKind corruption_from_string(std::string_view s);

// Severity 1..5; outputs clipped to [0,1]; labels are untouched by design
// (corruption operates on images only).
Tensor corrupt(const Tensor& batch, CorruptionKind kind, int severity, ndgrad::RngStream& rng);

enum class ScenarioKind { mild, imbalanced_label, mixed_shift };

const char* scenario_name(ScenarioKind k);
ScenarioKind scenario_from_string(std::string_view s);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 3;
};

struct StreamScenario {
  ScenarioKind kind = ScenarioKind::mild;
  std::size_t batch_size = 64;
  std::vector<CorruptionSpec> corruptions;  // mixed_shift pool; default: all kinds, severity 3
};

struct StreamBatch {
  Tensor images;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> attributes;
  std::vector<std::size_t> groups;
};

// Batches partition the test split; ordering per scenario:
//   mild             - uniform shuffle
//   imbalanced_label - contiguous label blocks in seeded order
//   mixed_shift      - mild order, one randomly drawn corruption per batch
std::vector<StreamBatch> make_stream(const Split& split, const StreamScenario& scenario,
                                     std::uint64_t seed);

void dump_split(const SpuriousDatasetConfig& cfg, const Split& split, const std::string& name,
                const std::filesystem::path& path);

}  // namespace dualtta::data
